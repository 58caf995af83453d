#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "heed/diagnostics.hpp"
#include "heed/fisher.hpp"
#include "test_world.hpp"

using namespace heed;

namespace {

// Random orthogonal matrix via Gram-Schmidt on a gaussian matrix.
Mat random_orthogonal(Rng& rng, int d) {
    Mat q(d, d);
    for (int i = 0; i < d; ++i) {
        std::vector<double> v(d);
        for (auto& x : v) x = rng.normal();
        for (int j = 0; j < i; ++j) {
            double proj = 0.0;
            for (int k = 0; k < d; ++k) proj += v[k] * q(j, k);
            for (int k = 0; k < d; ++k) v[k] -= proj * q(j, k);
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (int k = 0; k < d; ++k) q(i, k) = v[k] / norm;
    }
    return q;
}

}  // namespace

TEST_CASE("residual drift: closed forms and rotation invariance", "[diagnostics]") {
    ResidualTrace a, b;
    a.layers = b.layers = {1};
    a.residuals.emplace_back(2, 2);
    b.residuals.emplace_back(2, 2);
    b.residuals[0](0, 0) = 3.0;
    b.residuals[0](0, 1) = 4.0;
    const Mat d0 = residual_drift(a, a);
    CHECK(d0(0, 0) == 0.0);
    const Mat d1 = residual_drift(b, a);
    CHECK(d1(0, 0) == Catch::Approx(5.0));
    CHECK(d1(0, 1) == 0.0);

    Rng rng(7);
    ResidualTrace s, t;
    s.layers = t.layers = {1, 2};
    const int T = 5, d = 6;
    for (int l = 0; l < 2; ++l) {
        Mat ms(T, d), mt(T, d);
        for (auto& v : ms.a) v = rng.normal();
        for (auto& v : mt.a) v = rng.normal();
        s.residuals.push_back(ms);
        t.residuals.push_back(mt);
    }
    const Mat base = residual_drift(s, t);
    const Mat q = random_orthogonal(rng, d);
    ResidualTrace sr = s, tr = t;
    for (int l = 0; l < 2; ++l) {
        Mat rs, rt;
        matmul_nt(s.residuals[l], q, rs);  // rotate channels identically
        matmul_nt(t.residuals[l], q, rt);
        sr.residuals[l] = rs;
        tr.residuals[l] = rt;
    }
    const Mat rotated = residual_drift(sr, tr);
    for (size_t i = 0; i < base.a.size(); ++i)
        CHECK(rotated.a[i] == Catch::Approx(base.a[i]).margin(1e-10));
}

TEST_CASE("mask importance: no-op and causally dead masks", "[diagnostics]") {
    const auto& w = testworld::small_trained();
    const SynthSample* dense = nullptr;
    for (const auto& s : w.eval)
        if (s.dense) {
            dense = &s;
            break;
        }
    REQUIRE(dense != nullptr);

    CHECK(mask_importance(w.teacher, *dense, {}) == 0.0);

    // masking a position strictly after every answer position changes nothing
    const int last_answer = dense->answer_positions.back();
    REQUIRE(last_answer + 1 < w.cfg.seq_len());
    CHECK(mask_importance(w.teacher, *dense, {last_answer + 1}) == 0.0);

    std::vector<int> everything(w.cfg.seq_len());
    std::iota(everything.begin(), everything.end(), 0);
    CHECK_THROWS_AS(mask_importance(w.teacher, *dense, everything), std::invalid_argument);
    CHECK_THROWS_AS(mask_importance(w.teacher, *dense, {-1}), std::invalid_argument);
}

TEST_CASE("masking glyph patches hurts the teacher's answer", "[diagnostics]") {
    const auto& w = testworld::small_trained();
    int checked = 0;
    double mean_glyph = 0.0, mean_background = 0.0;
    for (const auto& s : w.eval) {
        if (!s.dense || checked >= 12) continue;
        ++checked;
        // re-forward oracle: recompute both scores from raw logits
        FwdCache cache;
        forward(w.teacher, s.grid, s.text_tokens, cache);
        auto score_of = [&](const Mat& logits) {
            double sc = 0.0;
            for (size_t i = 0; i < s.answer_positions.size(); ++i) {
                const int t = s.answer_positions[i];
                long double z = 0.0L, m = logits(t, 0);
                for (int v = 1; v < logits.cols; ++v) m = std::max<long double>(m, logits(t, v));
                for (int v = 0; v < logits.cols; ++v) z += expl(logits(t, v) - m);
                sc += static_cast<double>(logits(t, s.answer_tokens[i]) - (m + logl(z)));
            }
            return sc / static_cast<double>(s.answer_positions.size());
        };
        std::vector<char> mask(w.cfg.seq_len(), 0);
        for (int cell : s.glyph_cells) mask[cell] = 1;
        FwdCache masked;
        ForwardOptions opt;
        opt.attention_key_mask = &mask;
        forward(w.teacher, s.grid, s.text_tokens, masked, opt);
        const double oracle = score_of(cache.logits) - score_of(masked.logits);
        const double a = mask_importance(w.teacher, s, s.glyph_cells);
        CHECK(a == Catch::Approx(oracle).margin(1e-9));
        mean_glyph += a;

        std::vector<int> background;
        for (int p = 0; p < w.cfg.visual_len() && background.size() < s.glyph_cells.size(); ++p)
            if (std::find(s.glyph_cells.begin(), s.glyph_cells.end(), p) == s.glyph_cells.end())
                background.push_back(p);
        mean_background += mask_importance(w.teacher, s, background);

        // monotonicity on this family: glyphs plus anything >= background only
        std::vector<int> glyph_union = s.glyph_cells;
        glyph_union.insert(glyph_union.end(), background.begin(), background.end());
        CHECK(mask_importance(w.teacher, s, glyph_union) >=
              mask_importance(w.teacher, s, background) - 1e-9);
    }
    REQUIRE(checked >= 8);
    CHECK(mean_glyph / checked > 0.0);
    CHECK(mean_glyph > mean_background);
}

TEST_CASE("attention received is a distribution over positions", "[diagnostics]") {
    const auto& w = testworld::small_trained();
    const auto& s = w.eval.front();
    const auto received = attention_received(w.teacher, s);
    REQUIRE(static_cast<int>(received.size()) == w.cfg.seq_len());
    double sum = 0.0;
    for (double r : received) {
        CHECK(r >= 0.0);
        sum += r;
    }
    CHECK(sum == Catch::Approx(1.0).epsilon(1e-9));
    const auto student = hybridize(w.teacher, w.cfg);
    // hybrid still has one attention layer, so the statistic stays defined
    CHECK_NOTHROW(attention_received(student, s));
}

TEST_CASE("token records cover every (image, layer, position) cell", "[diagnostics]") {
    const auto& w = testworld::small_trained();
    const auto student = hybridize(w.teacher, w.cfg);
    std::vector<SynthSample> slice(w.eval.begin(), w.eval.begin() + 3);
    DiagnosticOptions opt;
    opt.with_mask_importance = true;
    const auto records = collect_token_records(w.teacher, student, slice, opt);
    const int L = static_cast<int>(w.cfg.alignment_layers().size());
    REQUIRE(static_cast<int>(records.size()) == 3 * L * w.cfg.seq_len());
    for (const auto& r : records) {
        CHECK(r.drift >= 0.0);
        CHECK(r.density >= 0.0);
        CHECK(r.density <= 1.0);
        CHECK((r.token_type == 0 || r.token_type == 1));
        CHECK(r.layer_depth >= 0.0);
        CHECK(r.layer_depth <= 1.0);
        if (r.position < w.cfg.visual_len())
            CHECK(r.mask_importance.has_value());
        else
            CHECK_FALSE(r.mask_importance.has_value());
    }
}

TEST_CASE("token table round trips through TSV", "[diagnostics]") {
    const auto& w = testworld::small_trained();
    const auto student = hybridize(w.teacher, w.cfg);
    std::vector<SynthSample> slice(w.eval.begin(), w.eval.begin() + 2);
    DiagnosticOptions opt;
    const auto records = collect_token_records(w.teacher, student, slice, opt);

    std::stringstream ss;
    write_token_table(records, ss);
    const auto parsed = read_token_table(ss);
    REQUIRE(parsed.size() == records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        CHECK(parsed[i].image_id == records[i].image_id);
        CHECK(parsed[i].position == records[i].position);
        CHECK(parsed[i].density == records[i].density);
        CHECK(parsed[i].token_type == records[i].token_type);
        CHECK(parsed[i].layer_depth == records[i].layer_depth);
        CHECK(parsed[i].teacher_attention == records[i].teacher_attention);
        CHECK(parsed[i].drift == records[i].drift);
        CHECK(parsed[i].mask_importance.has_value() == records[i].mask_importance.has_value());
    }

    std::stringstream bad("not_a_header\n");
    CHECK_THROWS_AS(read_token_table(bad), std::runtime_error);
}
