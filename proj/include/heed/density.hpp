#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace heed {

// Per-patch features on a 2-D grid, the input to the density statistic.
struct PatchGrid {
    int height = 0;
    int width = 0;
    int feature_dim = 0;
    std::vector<double> features;  // height*width rows of feature_dim, row-major

    PatchGrid() = default;
    PatchGrid(int h, int w, int d)
        : height(h), width(w), feature_dim(d),
          features(static_cast<size_t>(h) * w * d, 0.0) {}

    int patches() const { return height * width; }
    double* patch(int p) { return features.data() + static_cast<size_t>(p) * feature_dim; }
    const double* patch(int p) const { return features.data() + static_cast<size_t>(p) * feature_dim; }
    double* patch(int r, int c) { return patch(r * width + c); }
    const double* patch(int r, int c) const { return patch(r * width + c); }
};

// Per-patch density: raw values, per-image min-max normalized values, and a
// flag marking the all-equal case (which downstream maps to uniform weights).
struct DensityMap {
    std::vector<double> rho;        // in [0, 2]
    std::vector<double> rho_tilde;  // in [0, 1], empty until normalize_density
    bool degenerate = false;

    int size() const { return static_cast<int>(rho.size()); }
};

// Per-position alignment weights over the full aligned sequence
// (visual positions first, then text positions).
struct WeightVector {
    std::vector<double> weights;
    int visual_count = 0;
    int text_count = 0;
    double tau = 0.0;
    double beta = 0.0;

    int size() const { return static_cast<int>(weights.size()); }
};

namespace detail {
// Symmetric reflection: indices fold back at the borders, so out-of-range
// neighbors map onto in-range cells (a 1x1 grid maps every neighbor onto
// the patch itself).
inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}
}  // namespace detail

// rho(p) = 1 - mean cosine similarity between patch p and its 8 neighbors in
// the reflected 3x3 window (center offset excluded). Zero-norm features are
// rejected: their cosine is undefined and they indicate corrupt inputs.
inline DensityMap patch_density(const PatchGrid& grid) {
    if (grid.height < 1 || grid.width < 1 || grid.feature_dim < 1)
        throw std::invalid_argument("patch_density: empty grid");
    const int n = grid.patches();
    const int d = grid.feature_dim;

    std::vector<double> norms(n);
    for (int p = 0; p < n; ++p) {
        double s = 0.0;
        const double* v = grid.patch(p);
        for (int i = 0; i < d; ++i) {
            if (!std::isfinite(v[i])) throw std::invalid_argument("patch_density: non-finite feature");
            s += v[i] * v[i];
        }
        if (s == 0.0) throw std::invalid_argument("patch_density: undefined cosine (zero-norm feature)");
        norms[p] = std::sqrt(s);
    }

    DensityMap map;
    map.rho.resize(n);
    for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
            const int p = r * grid.width + c;
            const double* vp = grid.patch(p);
            double mean_cos = 0.0;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    if (dr == 0 && dc == 0) continue;
                    const int rr = detail::reflect_index(r + dr, grid.height);
                    const int cc = detail::reflect_index(c + dc, grid.width);
                    const int q = rr * grid.width + cc;
                    double num = 0.0;
                    const double* vq = grid.patch(q);
                    for (int i = 0; i < d; ++i) num += vp[i] * vq[i];
                    mean_cos += num / (norms[p] * norms[q]);
                }
            }
            map.rho[p] = 1.0 - mean_cos / 8.0;
        }
    }
    return map;
}

// Per-image min-max normalization of rho into [0, 1]. An all-equal map is
// degenerate: rho_tilde is identically zero and the flag is set.
inline DensityMap normalize_density(DensityMap map) {
    if (map.rho.empty()) throw std::invalid_argument("normalize_density: rho not populated");
    const auto [mn_it, mx_it] = std::minmax_element(map.rho.begin(), map.rho.end());
    const double mn = *mn_it, mx = *mx_it;
    map.rho_tilde.assign(map.rho.size(), 0.0);
    if (mx == mn) {
        map.degenerate = true;
        return map;
    }
    map.degenerate = false;
    const double inv = 1.0 / (mx - mn);
    for (size_t p = 0; p < map.rho.size(); ++p) map.rho_tilde[p] = (map.rho[p] - mn) * inv;
    return map;
}

// Full-sequence alignment weights. Text positions are assigned the density
// beta * mean(visual rho) before a joint min-max normalization over all T
// positions; weights are exp(rho_tilde/tau) rescaled so they sum to T.
// A degenerate visual map yields uniform weights.
inline WeightVector sequence_weights(const DensityMap& map, int text_count, double tau, double beta) {
    if (tau <= 0.0) throw std::invalid_argument("sequence_weights: tau must be > 0");
    if (beta <= 0.0) throw std::invalid_argument("sequence_weights: beta must be > 0");
    if (text_count < 0) throw std::invalid_argument("sequence_weights: negative text_count");
    if (map.rho.empty()) throw std::invalid_argument("sequence_weights: rho not populated");

    const int nv = map.size();
    const int total = nv + text_count;
    WeightVector wv;
    wv.visual_count = nv;
    wv.text_count = text_count;
    wv.tau = tau;
    wv.beta = beta;

    const auto [mn_it, mx_it] = std::minmax_element(map.rho.begin(), map.rho.end());
    if (*mx_it == *mn_it) {
        // No selective signal: uniform allocation, sum is exactly T.
        wv.weights.assign(total, 1.0);
        return wv;
    }

    double mean_rho = 0.0;
    for (double r : map.rho) mean_rho += r;
    mean_rho /= nv;
    const double rho_text = beta * mean_rho;

    std::vector<double> rho_all(map.rho);
    rho_all.resize(total, rho_text);
    const auto [jmn_it, jmx_it] = std::minmax_element(rho_all.begin(), rho_all.end());
    const double jmn = *jmn_it, jmx = *jmx_it;
    const double inv = 1.0 / (jmx - jmn);

    wv.weights.resize(total);
    const double clip = 1.0 / tau;  // rho_tilde <= 1, so this only guards bad inputs
    double sum = 0.0;
    for (int p = 0; p < total; ++p) {
        const double rt = (rho_all[p] - jmn) * inv;
        wv.weights[p] = std::exp(std::min(rt / tau, clip));
        sum += wv.weights[p];
    }
    const double scale = static_cast<double>(total) / sum;
    for (auto& w : wv.weights) w *= scale;
    return wv;
}

}  // namespace heed
