#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "heed/density.hpp"
#include "heed/losses.hpp"
#include "heed/mat.hpp"
#include "heed/model.hpp"
#include "heed/synth.hpp"

namespace heed {

// Per-position sensitivity of the teacher loss to its own residual stream:
// s(l,p) = |g(l,p)|^2 / d where g is the gradient of the summed NLL over
// supervised label positions with respect to the residual at alignment
// layer l, position p.
struct SensitivityField {
    std::vector<int> layers;  // alignment layer indices
    Mat g_norms_sq;           // n_layers x T
    Mat s;                    // n_layers x T, = g_norms_sq / d
    int d = 0;
};

// Gradient of summed NLL over supervised positions, with respect to logits.
inline Mat nll_logit_grad(const Mat& logits, const std::vector<int>& labels, double* nll_out = nullptr) {
    const int T = logits.rows, V = logits.cols;
    Mat g(T, V);
    double nll = 0.0;
    int supervised = 0;
    for (int t = 0; t < T; ++t) {
        if (labels[t] == kIgnoreLabel) continue;
        ++supervised;
        const double* x = logits.row(t);
        double m = x[0];
        for (int v = 1; v < V; ++v) m = std::max(m, x[v]);
        double z = 0.0;
        for (int v = 0; v < V; ++v) z += std::exp(x[v] - m);
        const double lse = m + std::log(z);
        nll += lse - x[labels[t]];
        for (int v = 0; v < V; ++v) g(t, v) = std::exp(x[v] - lse);
        g(t, labels[t]) -= 1.0;
    }
    if (supervised == 0) throw std::invalid_argument("nll_logit_grad: no supervised positions");
    if (nll_out) *nll_out = nll;
    return g;
}

// One cached backward pass through the unmodified teacher; the residual
// adjoints at the alignment taps are exactly the substitution-semantics
// partial derivatives.
inline SensitivityField position_sensitivity(const ToyModel& teacher, const SynthSample& sample) {
    if (teacher.is_hybrid()) throw std::invalid_argument("position_sensitivity: teacher must be all-attention");
    FwdCache cache;
    forward(teacher, sample.grid, sample.text_tokens, cache);
    const Mat d_logits = nll_logit_grad(cache.logits, sample.labels);

    BackwardInputs bi;
    bi.d_logits = &d_logits;
    const auto replaced = teacher.cfg.replaced_layers();
    for (int l : replaced) bi.capture_residual.insert(l);
    ToyModel grads = make_grads_like(teacher);
    const auto bo = backward(teacher, cache, bi, grads, sample.grid, sample.text_tokens);

    SensitivityField field;
    field.layers = teacher.cfg.alignment_layers();
    field.d = teacher.cfg.d_model;
    const int L = static_cast<int>(replaced.size());
    const int T = cache.emb.rows;
    field.g_norms_sq = Mat(L, T);
    field.s = Mat(L, T);
    for (int i = 0; i < L; ++i) {
        const Mat& adj = bo.residual_adjoints.at(replaced[i]);
        for (int p = 0; p < T; ++p) {
            double n2 = 0.0;
            for (int c = 0; c < adj.cols; ++c) n2 += adj(p, c) * adj(p, c);
            field.g_norms_sq(i, p) = n2;
            field.s(i, p) = n2 / field.d;
        }
    }
    return field;
}

// Layer-summed gradient weight (the HEED-G reference): w(p) proportional to
// the sum over alignment layers of |g(l,p)|^2, rescaled to sum to T.
// All-zero sensitivities fall back to uniform weights.
inline WeightVector grad_weight(const SensitivityField& field, int T) {
    if (field.g_norms_sq.cols != T) throw std::invalid_argument("grad_weight: T mismatch");
    WeightVector wv;
    wv.visual_count = T;
    wv.text_count = 0;
    std::vector<double> sums(T, 0.0);
    double total = 0.0;
    for (int p = 0; p < T; ++p) {
        for (int l = 0; l < field.g_norms_sq.rows; ++l) sums[p] += field.g_norms_sq(l, p);
        total += sums[p];
    }
    wv.weights.assign(T, 1.0);
    if (total <= 0.0) return wv;  // degenerate sample: uniform fallback
    const double scale = static_cast<double>(T) / total;
    for (int p = 0; p < T; ++p) wv.weights[p] = sums[p] * scale;
    return wv;
}

// Diagonal quadratic preservation surrogate: Q = 1/2 sum s(l,p) |dr(l,p)|^2.
inline double quadratic_surrogate(const std::vector<Mat>& delta_r, const SensitivityField& field) {
    if (static_cast<int>(delta_r.size()) != field.s.rows)
        throw std::invalid_argument("quadratic_surrogate: layer count mismatch");
    double q = 0.0;
    for (int l = 0; l < field.s.rows; ++l) {
        const Mat& dr = delta_r[l];
        if (dr.rows != field.s.cols) throw std::invalid_argument("quadratic_surrogate: shape mismatch");
        for (int p = 0; p < dr.rows; ++p) {
            double n2 = 0.0;
            for (int c = 0; c < dr.cols; ++c) n2 += dr(p, c) * dr(p, c);
            q += 0.5 * field.s(l, p) * n2;
        }
    }
    return q;
}

// Teacher NLL with an additive residual perturbation injected after one
// replaced block (finite-difference oracle hook).
inline double nll_with_residual_bump(const ToyModel& teacher, const SynthSample& sample, int block,
                                     const Mat& bump) {
    FwdCache cache;
    ForwardOptions opt;
    opt.bump_block = block;
    opt.bump = &bump;
    forward(teacher, sample.grid, sample.text_tokens, cache, opt);
    double nll = 0.0;
    nll_logit_grad(cache.logits, sample.labels, &nll);
    return nll;
}

}  // namespace heed
