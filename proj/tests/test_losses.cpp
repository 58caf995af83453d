#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "heed/losses.hpp"
#include "heed/mat.hpp"

using namespace heed;

namespace {

ResidualTrace random_trace(Rng& rng, int L, int T, int d) {
    ResidualTrace tr;
    for (int l = 0; l < L; ++l) {
        tr.layers.push_back(l + 1);
        Mat r(T, d);
        for (auto& v : r.a) v = rng.uniform(-1.0, 1.0);
        tr.residuals.push_back(std::move(r));
    }
    return tr;
}

// Vector-level relative error between an analytic gradient and central finite
// differences of a scalar function of the student trace.
double fd_trace_error(const std::function<double(const ResidualTrace&)>& f, ResidualTrace student,
                      const std::vector<Mat>& analytic, double h = 1e-4) {
    double max_abs = 1e-12, max_err = 0.0;
    for (int l = 0; l < student.n_layers(); ++l)
        for (size_t i = 0; i < student.residuals[l].a.size(); ++i) {
            double& x = student.residuals[l].a[i];
            const double x0 = x;
            x = x0 + h;
            const double fp = f(student);
            x = x0 - h;
            const double fm = f(student);
            x = x0;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic[l].a[i];
            max_abs = std::max({max_abs, std::fabs(fd), std::fabs(an)});
            max_err = std::max(max_err, std::fabs(fd - an));
        }
    return max_err / max_abs;
}

WeightVector uniform_weights(int T) {
    WeightVector w;
    w.weights.assign(T, 1.0);
    w.visual_count = T;
    return w;
}

}  // namespace

TEST_CASE("rsa loss of identical traces is zero", "[losses]") {
    Rng rng(71);
    const auto tr = random_trace(rng, 2, 4, 3);
    const auto loss = rsa_loss(tr, tr);
    CHECK(loss.value == 0.0);
    for (const auto& g : loss.grad)
        for (double v : g.a) CHECK(v == 0.0);
}

TEST_CASE("rsa loss closed form", "[losses]") {
    ResidualTrace teacher, student;
    teacher.layers = student.layers = {1};
    teacher.residuals.emplace_back(2, 2);
    Mat s(2, 2);
    s(0, 0) = 1.0;  // row [1,0]
    s(1, 1) = 2.0;  // row [0,2]
    student.residuals.push_back(s);
    const auto loss = rsa_loss(student, teacher);
    CHECK(loss.value == Catch::Approx(2.5));
    CHECK(loss.grad[0](0, 0) == Catch::Approx(1.0));  // 2*1/(1*2)
    CHECK(loss.grad[0](1, 1) == Catch::Approx(2.0));
}

TEST_CASE("rsa gradient matches finite differences", "[losses]") {
    Rng rng(73);
    for (int trial = 0; trial < 10; ++trial) {
        const int L = rng.uniform_int(1, 3), T = rng.uniform_int(1, 6), d = rng.uniform_int(1, 4);
        const auto teacher = random_trace(rng, L, T, d);
        const auto student = random_trace(rng, L, T, d);
        const auto loss = rsa_loss(student, teacher);
        const double err = fd_trace_error(
            [&](const ResidualTrace& s) { return rsa_loss(s, teacher).value; }, student, loss.grad);
        CHECK(err <= 1e-5);
    }
}

TEST_CASE("heed loss with uniform weights equals rsa exactly", "[losses]") {
    Rng rng(79);
    for (int trial = 0; trial < 20; ++trial) {
        const int L = rng.uniform_int(1, 3), T = rng.uniform_int(1, 6), d = rng.uniform_int(1, 4);
        const auto teacher = random_trace(rng, L, T, d);
        const auto student = random_trace(rng, L, T, d);
        const auto a = rsa_loss(student, teacher);
        const auto b = heed_loss(student, teacher, uniform_weights(T));
        CHECK(a.value == b.value);  // bit-exact: same summation order, weights are 1.0
        for (int l = 0; l < L; ++l)
            for (size_t i = 0; i < a.grad[l].a.size(); ++i) CHECK(a.grad[l].a[i] == b.grad[l].a[i]);
    }
}

TEST_CASE("heed loss closed form with non-uniform weights", "[losses]") {
    ResidualTrace teacher, student;
    teacher.layers = student.layers = {1};
    teacher.residuals.emplace_back(2, 2);
    Mat s(2, 2);
    s(0, 0) = 1.0;
    s(1, 1) = 2.0;
    student.residuals.push_back(s);
    WeightVector w;
    w.weights = {0.5, 1.5};
    const auto loss = heed_loss(student, teacher, w);
    CHECK(loss.value == Catch::Approx(3.25));  // (0.5*1 + 1.5*4)/2
}

TEST_CASE("heed gradient matches finite differences", "[losses]") {
    Rng rng(83);
    for (int trial = 0; trial < 10; ++trial) {
        const int L = rng.uniform_int(1, 3), T = rng.uniform_int(1, 6), d = rng.uniform_int(1, 4);
        const auto teacher = random_trace(rng, L, T, d);
        const auto student = random_trace(rng, L, T, d);
        WeightVector w;
        w.weights.resize(T);
        for (auto& v : w.weights) v = rng.uniform(0.1, 3.0);
        const auto loss = heed_loss(student, teacher, w);
        const double err = fd_trace_error(
            [&](const ResidualTrace& s) { return heed_loss(s, teacher, w).value; }, student, loss.grad);
        CHECK(err <= 1e-5);
    }
}

TEST_CASE("heed loss is homogeneous of degree one in the weights", "[losses]") {
    Rng rng(89);
    const auto teacher = random_trace(rng, 2, 5, 3);
    const auto student = random_trace(rng, 2, 5, 3);
    WeightVector w;
    w.weights.resize(5);
    for (auto& v : w.weights) v = rng.uniform(0.2, 2.0);
    const double c = 3.7;
    WeightVector cw = w;
    for (auto& v : cw.weights) v *= c;
    const auto a = heed_loss(student, teacher, w);
    const auto b = heed_loss(student, teacher, cw);
    CHECK(b.value == Catch::Approx(c * a.value).epsilon(1e-12));
    for (int l = 0; l < 2; ++l)
        for (size_t i = 0; i < a.grad[l].a.size(); ++i)
            CHECK(b.grad[l].a[i] == Catch::Approx(c * a.grad[l].a[i]).margin(1e-12));
}

TEST_CASE("heed loss validates weights and shapes", "[losses]") {
    Rng rng(97);
    const auto teacher = random_trace(rng, 1, 3, 2);
    const auto student = random_trace(rng, 1, 3, 2);
    WeightVector w;
    w.weights = {1.0, 0.0, 1.0};
    CHECK_THROWS_AS(heed_loss(student, teacher, w), std::invalid_argument);
    w.weights = {1.0, 1.0};
    CHECK_THROWS_AS(heed_loss(student, teacher, w), std::invalid_argument);
    const auto short_teacher = random_trace(rng, 1, 2, 2);
    CHECK_THROWS_AS(rsa_loss(student, short_teacher), std::invalid_argument);
}

TEST_CASE("hsa loss closed forms", "[losses]") {
    std::vector<Mat> same = {Mat(3, 2)};
    CHECK(hsa_loss(same, same).value == 0.0);

    Mat s(1, 2), t(1, 2);
    s(0, 0) = 3.0;
    s(0, 1) = 4.0;
    const auto loss = hsa_loss({s}, {t});
    CHECK(loss.value == Catch::Approx(25.0));  // 25 / (1 layer * 1 position)
}

TEST_CASE("hsa gradient matches finite differences", "[losses]") {
    Rng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        const int L = rng.uniform_int(1, 3), T = rng.uniform_int(1, 6), d = rng.uniform_int(1, 4);
        std::vector<Mat> student(L), teacher(L);
        for (int l = 0; l < L; ++l) {
            student[l] = Mat(T, d);
            teacher[l] = Mat(T, d);
            for (auto& v : student[l].a) v = rng.uniform(-1, 1);
            for (auto& v : teacher[l].a) v = rng.uniform(-1, 1);
        }
        const auto loss = hsa_loss(student, teacher);
        double max_err = 0.0, max_abs = 1e-12;
        const double h = 1e-4;
        for (int l = 0; l < L; ++l)
            for (size_t i = 0; i < student[l].a.size(); ++i) {
                const double x0 = student[l].a[i];
                student[l].a[i] = x0 + h;
                const double fp = hsa_loss(student, teacher).value;
                student[l].a[i] = x0 - h;
                const double fm = hsa_loss(student, teacher).value;
                student[l].a[i] = x0;
                const double fd = (fp - fm) / (2 * h);
                max_err = std::max(max_err, std::fabs(fd - loss.grad[l].a[i]));
                max_abs = std::max({max_abs, std::fabs(fd), std::fabs(loss.grad[l].a[i])});
            }
        CHECK(max_err / max_abs <= 1e-5);
    }
}

TEST_CASE("kd loss of identical logits has zero KL term", "[losses]") {
    Rng rng(103);
    Mat logits(3, 5);
    for (auto& v : logits.a) v = rng.uniform(-2, 2);
    std::vector<int> labels = {kIgnoreLabel, 2, 4};
    const auto kl_only = kd_loss(logits, logits, labels, 1.0, 0.0);
    CHECK(kl_only.value == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("kd loss two-class closed form", "[losses]") {
    Mat teacher(1, 2), student(1, 2);
    student(0, 0) = std::log(3.0);
    const std::vector<int> labels = {0};
    const auto kl = kd_loss(student, teacher, labels, 1.0, 0.0);
    CHECK(kl.value == Catch::Approx(0.143841036225890464).epsilon(1e-12));
    const auto full = kd_loss(student, teacher, labels, 1.0, 0.1);
    CHECK(full.value == Catch::Approx(0.172609243471068556).epsilon(1e-12));
}

TEST_CASE("kd loss excludes ignore-marked positions from both means", "[losses]") {
    Rng rng(107);
    Mat s(4, 6), t(4, 6);
    for (auto& v : s.a) v = rng.uniform(-1, 1);
    for (auto& v : t.a) v = rng.uniform(-1, 1);
    // restricting to position 1 must equal a single-position computation
    const auto masked = kd_loss(s, t, {kIgnoreLabel, 3, kIgnoreLabel, kIgnoreLabel}, 1.0, 0.1);
    Mat s1(1, 6), t1(1, 6);
    for (int v = 0; v < 6; ++v) {
        s1(0, v) = s(1, v);
        t1(0, v) = t(1, v);
    }
    const auto single = kd_loss(s1, t1, {3}, 1.0, 0.1);
    CHECK(masked.value == Catch::Approx(single.value).epsilon(1e-12));
    for (int v = 0; v < 6; ++v) {
        CHECK(masked.grad[0](0, v) == 0.0);
        CHECK(masked.grad[0](1, v) == Catch::Approx(single.grad[0](0, v)).margin(1e-15));
    }
}

TEST_CASE("kd loss KL term is nonnegative and zero only at equality", "[losses]") {
    Rng rng(109);
    for (int trial = 0; trial < 50; ++trial) {
        const int T = rng.uniform_int(1, 5), V = rng.uniform_int(2, 8);
        Mat s(T, V), t(T, V);
        for (auto& v : s.a) v = rng.uniform(-3, 3);
        for (auto& v : t.a) v = rng.uniform(-3, 3);
        std::vector<int> labels(T);
        for (auto& l : labels) l = rng.uniform_int(0, V - 1);
        const auto kl = kd_loss(s, t, labels, 1.0, 0.0);
        CHECK(kl.value >= -1e-14);
    }
}

TEST_CASE("kd gradient matches finite differences", "[losses]") {
    Rng rng(113);
    for (int trial = 0; trial < 10; ++trial) {
        const int T = rng.uniform_int(1, 6), V = rng.uniform_int(2, 8);
        Mat s(T, V), t(T, V);
        for (auto& v : s.a) v = rng.uniform(-2, 2);
        for (auto& v : t.a) v = rng.uniform(-2, 2);
        std::vector<int> labels(T);
        for (int i = 0; i < T; ++i) labels[i] = (i % 3 == 2) ? kIgnoreLabel : rng.uniform_int(0, V - 1);
        if (std::all_of(labels.begin(), labels.end(), [](int l) { return l == kIgnoreLabel; })) labels[0] = 0;
        const auto loss = kd_loss(s, t, labels, 1.0, 0.1);
        double max_err = 0.0, max_abs = 1e-12;
        const double h = 1e-4;
        for (size_t i = 0; i < s.a.size(); ++i) {
            const double x0 = s.a[i];
            s.a[i] = x0 + h;
            const double fp = kd_loss(s, t, labels, 1.0, 0.1).value;
            s.a[i] = x0 - h;
            const double fm = kd_loss(s, t, labels, 1.0, 0.1).value;
            s.a[i] = x0;
            const double fd = (fp - fm) / (2 * h);
            max_err = std::max(max_err, std::fabs(fd - loss.grad[0].a[i]));
            max_abs = std::max({max_abs, std::fabs(fd), std::fabs(loss.grad[0].a[i])});
        }
        CHECK(max_err / max_abs <= 1e-5);
    }
}

TEST_CASE("kd loss rejects an all-ignored batch", "[losses]") {
    Mat s(2, 3), t(2, 3);
    CHECK_THROWS_WITH(kd_loss(s, t, {kIgnoreLabel, kIgnoreLabel}, 1.0, 0.1),
                      Catch::Matchers::ContainsSubstring("empty loss support"));
}

TEST_CASE("topk mask weights: selection rules", "[losses]") {
    DensityMap m;
    m.rho = {0.1, 0.9, 0.2, 0.8};

    const auto w0 = topk_mask_weights(m, 0.0, 5.0, MaskMode::Density);
    CHECK(w0.weights == std::vector<double>{1, 1, 1, 1});

    const auto w50 = topk_mask_weights(m, 50.0, 5.0, MaskMode::Density);
    CHECK(w50.weights == std::vector<double>{1, 5, 1, 5});

    // ties broken by lower position index
    DensityMap tied;
    tied.rho = {0.5, 0.5, 0.5, 0.1};
    const auto wt = topk_mask_weights(tied, 50.0, 5.0, MaskMode::Density);
    CHECK(wt.weights == std::vector<double>{5, 5, 1, 1});

    CHECK_THROWS_AS(topk_mask_weights(m, 101.0, 5.0, MaskMode::Density), std::invalid_argument);
    CHECK_THROWS_AS(topk_mask_weights(m, 10.0, 0.0, MaskMode::Density), std::invalid_argument);
}

TEST_CASE("topk density and random modes select the same cardinality", "[losses]") {
    Rng rng(127);
    for (int trial = 0; trial < 50; ++trial) {
        DensityMap m;
        m.rho.resize(rng.uniform_int(1, 60));
        for (auto& r : m.rho) r = rng.uniform(0.0, 2.0);
        const double k = std::vector<double>{0, 10, 25, 50}[rng.uniform_int(0, 3)];
        const auto wd = topk_mask_weights(m, k, 5.0, MaskMode::Density);
        const auto wr = topk_mask_weights(m, k, 5.0, MaskMode::Random, trial);
        auto count = [](const WeightVector& w) {
            return std::count(w.weights.begin(), w.weights.end(), 5.0);
        };
        CHECK(count(wd) == count(wr));
        CHECK(count(wd) == static_cast<long>(std::ceil(k / 100.0 * m.size())));

        // density mode: min selected rho >= max unselected rho
        double min_sel = 2.5, max_unsel = -1.0;
        for (int p = 0; p < m.size(); ++p) {
            if (wd.weights[p] == 5.0) min_sel = std::min(min_sel, m.rho[p]);
            else max_unsel = std::max(max_unsel, m.rho[p]);
        }
        if (min_sel <= 2.0 && max_unsel >= 0.0) CHECK(min_sel >= max_unsel);
    }
}
