#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "heed/mat.hpp"

namespace heed {

// ---------------------------------------------------------------------------
// Ranks and Spearman correlation
// ---------------------------------------------------------------------------

// Average-fractional ranks (1-based); tied values share the mean of the ranks
// they occupy.
inline std::vector<double> fractional_ranks(const std::vector<double>& x) {
    const size_t n = x.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double mean_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const size_t n = x.size();
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

// Spearman rank correlation with mean ranks for ties. Returns nullopt when
// either argument has zero rank variance (undefined marker).
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("spearman: need at least 2 points");
    const double r = pearson(fractional_ranks(x), fractional_ranks(y));
    if (std::isnan(r)) return std::nullopt;
    return r;
}

struct SpearmanSummary {
    double mean = 0.0;            // mean over groups with defined correlation
    double top_quartile_mean = 0.0;  // same, restricted to top-25%-by-x tokens
    int defined = 0;
    int undefined = 0;            // groups excluded for zero rank variance
    int tail_defined = 0;
    int tail_undefined = 0;
};

// Per-group Spearman between x and y, averaged across groups, plus the
// tail variant restricted to the ceil(n/4) highest-x tokens of each group.
inline SpearmanSummary mean_per_group_spearman(const std::vector<std::vector<double>>& xs,
                                               const std::vector<std::vector<double>>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("mean_per_group_spearman: group count mismatch");
    SpearmanSummary s;
    double sum = 0.0, tail_sum = 0.0;
    for (size_t g = 0; g < xs.size(); ++g) {
        if (auto r = spearman(xs[g], ys[g])) {
            sum += *r;
            ++s.defined;
        } else {
            ++s.undefined;
        }
        const size_t n = xs[g].size();
        const size_t k = (n + 3) / 4;
        if (k >= 2) {
            std::vector<size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](size_t a, size_t b) { return xs[g][a] > xs[g][b]; });
            std::vector<double> tx(k), ty(k);
            for (size_t i = 0; i < k; ++i) {
                tx[i] = xs[g][order[i]];
                ty[i] = ys[g][order[i]];
            }
            if (auto r = spearman(tx, ty)) {
                tail_sum += *r;
                ++s.tail_defined;
            } else {
                ++s.tail_undefined;
            }
        } else {
            ++s.tail_undefined;
        }
    }
    s.mean = s.defined ? sum / s.defined : std::numeric_limits<double>::quiet_NaN();
    s.top_quartile_mean = s.tail_defined ? tail_sum / s.tail_defined : std::numeric_limits<double>::quiet_NaN();
    return s;
}

// ---------------------------------------------------------------------------
// Decile analysis
// ---------------------------------------------------------------------------

struct DecileSummary {
    std::vector<double> means;  // 10 group means of `values`, ordered low to high score
    double top_bottom_ratio = 0.0;
    bool ratio_infinite = false;  // bottom mean was zero
};

// Sort by score, split into ten equal groups (remainder to the lowest groups),
// return group means of `values` and the top/bottom ratio. Ties keep their
// original order, so the grouping is deterministic.
inline DecileSummary decile_summary(const std::vector<double>& scores, const std::vector<double>& values) {
    if (scores.size() != values.size()) throw std::invalid_argument("decile_summary: length mismatch");
    const size_t n = scores.size();
    if (n < 10) throw std::invalid_argument("decile_summary: need at least 10 tokens");
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    DecileSummary out;
    out.means.resize(10, 0.0);
    size_t pos = 0;
    for (int g = 0; g < 10; ++g) {
        size_t size = n / 10 + (static_cast<size_t>(g) < n % 10 ? 1 : 0);
        double sum = 0.0;
        for (size_t i = 0; i < size; ++i) sum += values[order[pos + i]];
        out.means[g] = sum / static_cast<double>(size);
        pos += size;
    }
    if (out.means.front() == 0.0) {
        out.ratio_infinite = true;
        out.top_bottom_ratio = std::numeric_limits<double>::infinity();
    } else {
        out.top_bottom_ratio = out.means.back() / out.means.front();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ordinary least squares and semi-partial R^2
// ---------------------------------------------------------------------------

struct RegressionReport {
    double joint_r2 = 0.0;
    std::vector<double> semi_partial_r2;  // one per predictor
    int n = 0;
};

namespace detail {
// Solve the symmetric positive-definite system A x = b by Cholesky.
inline std::vector<double> solve_spd(std::vector<std::vector<double>> A, std::vector<double> b) {
    const size_t n = A.size();
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j <= i; ++j) {
            double s = A[i][j];
            for (size_t k = 0; k < j; ++k) s -= A[i][k] * A[j][k];
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("solve_spd: matrix not positive definite");
                A[i][i] = std::sqrt(s);
            } else {
                A[i][j] = s / A[j][j];
            }
        }
    }
    for (size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (size_t k = 0; k < i; ++k) s -= A[i][k] * b[k];
        b[i] = s / A[i][i];
    }
    for (size_t i = n; i-- > 0;) {
        double s = b[i];
        for (size_t k = i + 1; k < n; ++k) s -= A[k][i] * b[k];
        b[i] = s / A[i][i];
    }
    return b;
}

// R^2 of an OLS fit with intercept over the selected predictor columns.
inline double ols_r2(const Mat& X, const std::vector<double>& y, const std::vector<int>& cols) {
    const int n = X.rows;
    const int p = static_cast<int>(cols.size());
    const int m = p + 1;  // intercept first
    std::vector<std::vector<double>> xtx(m, std::vector<double>(m, 0.0));
    std::vector<double> xty(m, 0.0);
    for (int i = 0; i < n; ++i) {
        std::vector<double> row(m);
        row[0] = 1.0;
        for (int j = 0; j < p; ++j) row[j + 1] = X(i, cols[j]);
        for (int a = 0; a < m; ++a) {
            xty[a] += row[a] * y[i];
            for (int b = 0; b <= a; ++b) xtx[a][b] += row[a] * row[b];
        }
    }
    for (int a = 0; a < m; ++a)
        for (int b = a + 1; b < m; ++b) xtx[a][b] = xtx[b][a];
    const auto beta = solve_spd(xtx, xty);

    double ymean = 0.0;
    for (double v : y) ymean += v;
    ymean /= n;
    double sst = 0.0, ssr = 0.0;
    for (int i = 0; i < n; ++i) {
        double pred = beta[0];
        for (int j = 0; j < p; ++j) pred += beta[j + 1] * X(i, cols[j]);
        const double dy = y[i] - ymean;
        const double r = y[i] - pred;
        sst += dy * dy;
        ssr += r * r;
    }
    if (sst == 0.0) throw std::runtime_error("ols_r2: zero target variance");
    return 1.0 - ssr / sst;
}
}  // namespace detail

// Joint R^2 with intercept plus semi-partial R^2 per predictor
// (R^2_full - R^2_without_j). Predictors are standardized internally; a
// zero-variance or collinear design is an error naming the offending columns.
inline RegressionReport semi_partial_r2(const Mat& X, const std::vector<double>& y,
                                        const std::vector<std::string>& names = {}) {
    const int n = X.rows;
    const int p = X.cols;
    if (n <= 5) throw std::invalid_argument("semi_partial_r2: need n > 5");
    if (static_cast<int>(y.size()) != n) throw std::invalid_argument("semi_partial_r2: y length mismatch");

    auto col_name = [&](int j) { return j < static_cast<int>(names.size()) ? names[j] : "x" + std::to_string(j); };

    Mat Z(n, p);
    for (int j = 0; j < p; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += X(i, j);
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) {
            const double d = X(i, j) - mean;
            var += d * d;
        }
        var /= n;
        if (var <= 1e-30)
            throw std::runtime_error("semi_partial_r2: zero-variance predictor '" + col_name(j) + "'");
        const double inv = 1.0 / std::sqrt(var);
        for (int i = 0; i < n; ++i) Z(i, j) = (X(i, j) - mean) * inv;
    }

    std::vector<int> all(p);
    std::iota(all.begin(), all.end(), 0);
    RegressionReport rep;
    rep.n = n;
    try {
        rep.joint_r2 = detail::ols_r2(Z, y, all);
    } catch (const std::runtime_error&) {
        // Identify which columns are collinear by checking pairwise correlation.
        std::string cols;
        for (int a = 0; a < p; ++a)
            for (int b = a + 1; b < p; ++b) {
                std::vector<double> za(n), zb(n);
                for (int i = 0; i < n; ++i) {
                    za[i] = Z(i, a);
                    zb[i] = Z(i, b);
                }
                if (std::fabs(pearson(za, zb)) > 1.0 - 1e-10) {
                    if (!cols.empty()) cols += ", ";
                    cols += col_name(a) + "/" + col_name(b);
                }
            }
        throw std::runtime_error("semi_partial_r2: rank-deficient design" +
                                 (cols.empty() ? std::string() : " (collinear: " + cols + ")"));
    }

    rep.semi_partial_r2.resize(p);
    for (int j = 0; j < p; ++j) {
        std::vector<int> rest;
        for (int k = 0; k < p; ++k)
            if (k != j) rest.push_back(k);
        const double r2_rest = detail::ols_r2(Z, y, rest);
        rep.semi_partial_r2[j] = rep.joint_r2 - r2_rest;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

// Linear-interpolation percentile of a sample (q in [0,1]).
inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) throw std::invalid_argument("percentile: empty sample");
    std::sort(v.begin(), v.end());
    const double h = q * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(h));
    if (lo + 1 >= v.size()) return v.back();
    const double frac = h - static_cast<double>(lo);
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

// Percentile bootstrap over groups (images): resample group ids with
// replacement, recompute the statistic on the pooled groups of each resample.
// Resample r draws from a generator seeded with base_seed + r, so the result
// does not depend on scheduling.
template <typename Group>
std::pair<double, double> bootstrap_ci(const std::vector<Group>& groups,
                                       const std::function<double(const std::vector<const Group*>&)>& statistic,
                                       int n_resamples, double alpha, uint64_t base_seed = 0) {
    if (groups.size() < 2) throw std::invalid_argument("bootstrap_ci: need at least 2 groups");
    if (n_resamples < 100) throw std::invalid_argument("bootstrap_ci: need at least 100 resamples");
    const size_t n = groups.size();
    std::vector<double> stats(n_resamples);
    for (int r = 0; r < n_resamples; ++r) {
        std::mt19937_64 gen(base_seed + static_cast<uint64_t>(r));
        std::uniform_int_distribution<size_t> pick(0, n - 1);
        std::vector<const Group*> resample(n);
        for (size_t i = 0; i < n; ++i) resample[i] = &groups[pick(gen)];
        try {
            stats[r] = statistic(resample);
        } catch (const std::exception& e) {
            throw std::runtime_error("bootstrap_ci: statistic failed on resample " + std::to_string(r) + ": " +
                                     e.what());
        }
    }
    return {percentile(stats, alpha / 2.0), percentile(stats, 1.0 - alpha / 2.0)};
}

// ---------------------------------------------------------------------------
// Paired statistics over seeds
// ---------------------------------------------------------------------------

struct PairedStat {
    double mean = 0.0;
    double se = 0.0;  // std of the paired differences / sqrt(n)
    int n = 0;
};

inline PairedStat paired_diff_stat(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("paired_diff_stat: size mismatch");
    PairedStat s;
    s.n = static_cast<int>(a.size());
    std::vector<double> d(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        d[i] = a[i] - b[i];
        s.mean += d[i];
    }
    s.mean /= s.n;
    if (s.n > 1) {
        double var = 0.0;
        for (double v : d) var += (v - s.mean) * (v - s.mean);
        var /= (s.n - 1);
        s.se = std::sqrt(var / s.n);
    }
    return s;
}

}  // namespace heed
