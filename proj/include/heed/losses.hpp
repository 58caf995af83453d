#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "heed/density.hpp"
#include "heed/mat.hpp"

namespace heed {

constexpr int kIgnoreLabel = -1;

// Residual-stream activations at the alignment layers, plus final logits.
// residuals[i] is a T x d matrix for alignment layer layers[i].
struct ResidualTrace {
    std::vector<int> layers;     // alignment layer indices (readout points)
    std::vector<Mat> residuals;  // one T x d matrix per alignment layer
    std::vector<Mat> block_outputs;  // mixer/attention sublayer outputs at replaced layers
    Mat logits;                  // T x vocab

    int T() const { return residuals.empty() ? logits.rows : residuals.front().rows; }
    int dim() const { return residuals.empty() ? 0 : residuals.front().cols; }
    int n_layers() const { return static_cast<int>(residuals.size()); }
};

// Loss value plus gradient with respect to the differentiated argument.
struct LossValue {
    double value = 0.0;
    std::vector<Mat> grad;  // same shape as the student-side input
};

namespace detail {
inline void check_trace_shapes(const ResidualTrace& a, const ResidualTrace& b, const char* who) {
    if (a.n_layers() != b.n_layers() || a.n_layers() == 0)
        throw std::invalid_argument(std::string(who) + ": layer count mismatch");
    for (int l = 0; l < a.n_layers(); ++l)
        if (!a.residuals[l].same_shape(b.residuals[l]))
            throw std::invalid_argument(std::string(who) + ": residual shape mismatch");
}
}  // namespace detail

// Uniform residual alignment: mean over layers and positions of the squared
// residual difference. Gradient is with respect to the student residuals.
inline LossValue rsa_loss(const ResidualTrace& student, const ResidualTrace& teacher) {
    detail::check_trace_shapes(student, teacher, "rsa_loss");
    const int L = student.n_layers();
    const int T = student.residuals.front().rows;
    const double norm = 1.0 / (static_cast<double>(L) * T);
    LossValue out;
    out.grad.reserve(L);
    for (int l = 0; l < L; ++l) {
        const Mat& rs = student.residuals[l];
        const Mat& rt = teacher.residuals[l];
        Mat g(rs.rows, rs.cols);
        for (int p = 0; p < rs.rows; ++p) {
            for (int c = 0; c < rs.cols; ++c) {
                const double diff = rs(p, c) - rt(p, c);
                out.value += norm * (diff * diff);
                g(p, c) = 2.0 * norm * diff;
            }
        }
        out.grad.push_back(std::move(g));
    }
    return out;
}

// Density-weighted residual alignment; the same per-position weight is applied
// at every alignment layer. Uniform weights make this identical to rsa_loss.
inline LossValue heed_loss(const ResidualTrace& student, const ResidualTrace& teacher,
                           const WeightVector& w) {
    detail::check_trace_shapes(student, teacher, "heed_loss");
    const int L = student.n_layers();
    const int T = student.residuals.front().rows;
    if (w.size() != T) throw std::invalid_argument("heed_loss: weight length mismatch");
    for (double v : w.weights)
        if (!(v > 0.0)) throw std::invalid_argument("heed_loss: nonpositive weight");
    const double norm = 1.0 / (static_cast<double>(L) * T);
    LossValue out;
    out.grad.reserve(L);
    for (int l = 0; l < L; ++l) {
        const Mat& rs = student.residuals[l];
        const Mat& rt = teacher.residuals[l];
        Mat g(rs.rows, rs.cols);
        for (int p = 0; p < rs.rows; ++p) {
            const double wp = w.weights[p];
            for (int c = 0; c < rs.cols; ++c) {
                const double diff = rs(p, c) - rt(p, c);
                out.value += norm * wp * (diff * diff);
                g(p, c) = 2.0 * norm * wp * diff;
            }
        }
        out.grad.push_back(std::move(g));
    }
    return out;
}

// Per-layer block-output matching (the C2 baseline): mean over replaced layers
// and positions of the squared difference between student mixer output and
// teacher attention output. Uses the same normalization convention as
// rsa_loss so that C2 and C3 loss magnitudes are comparable.
inline LossValue hsa_loss(const std::vector<Mat>& student_outputs, const std::vector<Mat>& teacher_outputs) {
    if (student_outputs.size() != teacher_outputs.size() || student_outputs.empty())
        throw std::invalid_argument("hsa_loss: layer count mismatch");
    const int L = static_cast<int>(student_outputs.size());
    const int T = student_outputs.front().rows;
    for (int l = 0; l < L; ++l)
        if (!student_outputs[l].same_shape(teacher_outputs[l]))
            throw std::invalid_argument("hsa_loss: shape mismatch");
    const double norm = 1.0 / (static_cast<double>(L) * T);
    LossValue out;
    out.grad.reserve(L);
    for (int l = 0; l < L; ++l) {
        const Mat& os = student_outputs[l];
        const Mat& ot = teacher_outputs[l];
        Mat g(os.rows, os.cols);
        for (int p = 0; p < os.rows; ++p) {
            for (int c = 0; c < os.cols; ++c) {
                const double diff = os(p, c) - ot(p, c);
                out.value += norm * (diff * diff);
                g(p, c) = 2.0 * norm * diff;
            }
        }
        out.grad.push_back(std::move(g));
    }
    return out;
}

namespace detail {
// Row-wise log-softmax of logits.
inline Mat log_softmax(const Mat& logits) {
    Mat out(logits.rows, logits.cols);
    for (int t = 0; t < logits.rows; ++t) {
        const double* x = logits.row(t);
        double m = x[0];
        for (int v = 1; v < logits.cols; ++v) m = std::max(m, x[v]);
        double lse = 0.0;
        for (int v = 0; v < logits.cols; ++v) lse += std::exp(x[v] - m);
        lse = m + std::log(lse);
        for (int v = 0; v < logits.cols; ++v) out(t, v) = x[v] - lse;
    }
    return out;
}
}  // namespace detail

// End-to-end logit distillation: lambda_kl * mean KL(teacher || student) plus
// lambda_ce * mean cross-entropy on labels. Ignore-marked positions are
// excluded from both means. Gradient is with respect to the student logits.
inline LossValue kd_loss(const Mat& student_logits, const Mat& teacher_logits,
                         const std::vector<int>& labels, double lambda_kl, double lambda_ce) {
    if (!student_logits.same_shape(teacher_logits))
        throw std::invalid_argument("kd_loss: logits shape mismatch");
    const int T = student_logits.rows;
    const int V = student_logits.cols;
    if (static_cast<int>(labels.size()) != T) throw std::invalid_argument("kd_loss: label length mismatch");
    int supported = 0;
    for (int t = 0; t < T; ++t) {
        if (labels[t] == kIgnoreLabel) continue;
        if (labels[t] < 0 || labels[t] >= V) throw std::invalid_argument("kd_loss: label out of range");
        ++supported;
    }
    if (supported == 0) throw std::invalid_argument("kd_loss: empty loss support");

    const Mat logp = detail::log_softmax(student_logits);
    const Mat logq = detail::log_softmax(teacher_logits);
    const double inv = 1.0 / supported;

    LossValue out;
    out.grad.assign(1, Mat(T, V));
    Mat& g = out.grad[0];
    double kl = 0.0, ce = 0.0;
    for (int t = 0; t < T; ++t) {
        if (labels[t] == kIgnoreLabel) continue;
        for (int v = 0; v < V; ++v) {
            const double q = std::exp(logq(t, v));
            const double p = std::exp(logp(t, v));
            kl += q * (logq(t, v) - logp(t, v));
            g(t, v) = inv * (lambda_kl * (p - q) + lambda_ce * p);
        }
        ce -= logp(t, labels[t]);
        g(t, labels[t]) -= inv * lambda_ce;
    }
    out.value = lambda_kl * kl * inv + lambda_ce * ce * inv;
    return out;
}

// Binary-mask control weights: the top ceil(k% * n) positions by raw density
// (ties broken by lower index) get `boost`, the rest stay at 1, with no
// renormalization. Random mode selects the same cardinality uniformly without
// replacement from the given seed.
enum class MaskMode { Density, Random };

inline WeightVector topk_mask_weights(const DensityMap& map, double k_percent, double boost,
                                      MaskMode mode, uint64_t seed = 0) {
    if (!(k_percent >= 0.0 && k_percent <= 100.0))
        throw std::invalid_argument("topk_mask_weights: k_percent outside [0,100]");
    if (!(boost > 0.0)) throw std::invalid_argument("topk_mask_weights: boost must be > 0");
    if (map.rho.empty()) throw std::invalid_argument("topk_mask_weights: empty density map");
    const int n = map.size();
    const int k = static_cast<int>(std::ceil(k_percent / 100.0 * n));

    WeightVector wv;
    wv.visual_count = n;
    wv.text_count = 0;
    wv.beta = 0.0;
    wv.tau = 0.0;
    wv.weights.assign(n, 1.0);
    if (k == 0) return wv;

    std::vector<int> selected;
    if (mode == MaskMode::Density) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (map.rho[a] != map.rho[b]) return map.rho[a] > map.rho[b];
            return a < b;
        });
        selected.assign(order.begin(), order.begin() + k);
    } else {
        Rng rng(seed);
        selected = rng.sample_without_replacement(n, k);
    }
    for (int p : selected) wv.weights[p] = boost;
    return wv;
}

}  // namespace heed
