#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "heed/density.hpp"
#include "heed/losses.hpp"
#include "heed/model.hpp"
#include "heed/stats.hpp"
#include "heed/synth.hpp"

namespace heed {

// One measurement row at (image, alignment layer, position).
struct TokenRecord {
    uint64_t image_id = 0;
    int position = 0;
    double density = 0.0;        // joint-normalized rho_tilde in [0,1]
    int token_type = 0;          // 1 visual, 0 text
    double layer_depth = 0.0;    // layer index / (n_layers - 1)
    double teacher_attention = 0.0;
    double drift = 0.0;          // |r_student - r_teacher| at this (layer, position)
    std::optional<double> mask_importance;
};

// Euclidean residual drift per (alignment layer, position).
inline Mat residual_drift(const ResidualTrace& student, const ResidualTrace& teacher) {
    if (student.n_layers() != teacher.n_layers() || student.n_layers() == 0)
        throw std::invalid_argument("residual_drift: layer count mismatch");
    const int L = student.n_layers();
    const int T = student.residuals.front().rows;
    Mat drift(L, T);
    for (int l = 0; l < L; ++l) {
        const Mat& rs = student.residuals[l];
        const Mat& rt = teacher.residuals[l];
        if (!rs.same_shape(rt)) throw std::invalid_argument("residual_drift: shape mismatch");
        for (int p = 0; p < T; ++p) {
            double n2 = 0.0;
            for (int c = 0; c < rs.cols; ++c) {
                const double d = rs(p, c) - rt(p, c);
                n2 += d * d;
            }
            drift(l, p) = std::sqrt(n2);
        }
    }
    return drift;
}

// Mean log-probability of the gold answer tokens under teacher forcing,
// optionally with a set of positions hidden from every attention map.
inline double answer_score(const ToyModel& model, const SynthSample& sample,
                           const std::vector<int>& masked_positions) {
    const int T = model.cfg.seq_len();
    std::vector<char> mask(T, 0);
    for (int p : masked_positions) {
        if (p < 0 || p >= T) throw std::invalid_argument("answer_score: masked position out of range");
        mask[p] = 1;
    }
    int hidden = 0;
    for (char c : mask) hidden += c;
    if (hidden == T) throw std::invalid_argument("answer_score: cannot mask all positions");

    FwdCache cache;
    ForwardOptions opt;
    if (!masked_positions.empty()) opt.attention_key_mask = &mask;
    forward(model, sample.grid, sample.text_tokens, cache, opt);

    double score = 0.0;
    for (size_t i = 0; i < sample.answer_positions.size(); ++i) {
        const int t = sample.answer_positions[i];
        const double* x = cache.logits.row(t);
        double m = x[0];
        for (int v = 1; v < cache.logits.cols; ++v) m = std::max(m, x[v]);
        double z = 0.0;
        for (int v = 0; v < cache.logits.cols; ++v) z += std::exp(x[v] - m);
        score += x[sample.answer_tokens[i]] - (m + std::log(z));
    }
    return score / static_cast<double>(sample.answer_positions.size());
}

// Masking importance: drop in the answer score when the positions are hidden.
inline double mask_importance(const ToyModel& teacher, const SynthSample& sample,
                              const std::vector<int>& masked_positions) {
    if (masked_positions.empty()) return 0.0;
    return answer_score(teacher, sample, {}) - answer_score(teacher, sample, masked_positions);
}

// Mean attention mass received by each position, averaged over layers, heads
// and query positions of an all-attention model.
inline std::vector<double> attention_received(const ToyModel& model, const SynthSample& sample) {
    FwdCache cache;
    forward(model, sample.grid, sample.text_tokens, cache);
    const int T = cache.emb.rows;
    std::vector<double> received(T, 0.0);
    int maps = 0;
    for (const auto& bc : cache.blocks) {
        if (bc.att_probs.empty()) continue;
        for (const auto& P : bc.att_probs) {
            ++maps;
            for (int t = 0; t < T; ++t)
                for (int j = 0; j <= t; ++j) received[j] += P(t, j);
        }
    }
    if (maps == 0) throw std::invalid_argument("attention_received: model has no attention layers");
    for (auto& r : received) r /= static_cast<double>(maps) * T;
    return received;
}

// ---------------------------------------------------------------------------
// Token table: one record per (image, alignment layer, position)
// ---------------------------------------------------------------------------

struct DiagnosticOptions {
    bool with_mask_importance = false;  // per-position teacher re-forwards are costly
    double tau = 0.5;
    double beta = 2.0;
};

// Runs the measurement protocol for one (student, teacher) pair over a
// diagnostic slice and emits the flat token table.
inline std::vector<TokenRecord> collect_token_records(const ToyModel& teacher, const ToyModel& student,
                                                      const std::vector<SynthSample>& slice,
                                                      const DiagnosticOptions& opt = {}) {
    std::vector<TokenRecord> records;
    const ToyConfig& cfg = teacher.cfg;
    const int nv = cfg.visual_len();
    const int T = cfg.seq_len();
    const auto align = cfg.alignment_layers();
    const double depth_norm = cfg.n_layers > 1 ? 1.0 / (cfg.n_layers - 1) : 1.0;

    for (const auto& s : slice) {
        FwdCache tc, sc;
        const ResidualTrace teacher_trace = forward_with_residuals(teacher, s.grid, s.text_tokens, tc);
        const ResidualTrace student_trace = forward_with_residuals(student, s.grid, s.text_tokens, sc);
        const Mat drift = residual_drift(student_trace, teacher_trace);
        const auto received = attention_received(teacher, s);

        // Joint-normalized density over the full sequence (uniform-weight
        // images give identically zero density).
        const DensityMap map = patch_density(s.grid);
        const WeightVector wv = sequence_weights(map, cfg.text_len, opt.tau, opt.beta);
        std::vector<double> density(T, 0.0);
        {
            double mean_rho = 0.0;
            for (double r : map.rho) mean_rho += r;
            mean_rho /= map.size();
            std::vector<double> rho_all(map.rho);
            rho_all.resize(T, opt.beta * mean_rho);
            const auto [mn, mx] = std::minmax_element(rho_all.begin(), rho_all.end());
            if (*mx > *mn)
                for (int p = 0; p < T; ++p) density[p] = (rho_all[p] - *mn) / (*mx - *mn);
        }

        std::vector<std::optional<double>> mask_imp(T);
        if (opt.with_mask_importance) {
            const double base = answer_score(teacher, s, {});
            for (int p = 0; p < nv; ++p) mask_imp[p] = base - answer_score(teacher, s, {p});
        }

        for (int li = 0; li < static_cast<int>(align.size()); ++li) {
            for (int p = 0; p < T; ++p) {
                TokenRecord r;
                r.image_id = s.image_id;
                r.position = p;
                r.density = density[p];
                r.token_type = p < nv ? 1 : 0;
                r.layer_depth = align[li] * depth_norm;
                r.teacher_attention = received[p];
                r.drift = drift(li, p);
                r.mask_importance = mask_imp[p];
                records.push_back(r);
            }
        }
    }
    return records;
}

// Tab-separated token table. Header line, then one record per line;
// mask_importance is empty when absent.
inline void write_token_table(const std::vector<TokenRecord>& records, std::ostream& os) {
    os << "image_id\tposition\tdensity\ttoken_type\tlayer_depth\tteacher_attention\tdrift\tmask_importance\n";
    os.precision(17);
    for (const auto& r : records) {
        os << r.image_id << '\t' << r.position << '\t' << r.density << '\t' << r.token_type << '\t'
           << r.layer_depth << '\t' << r.teacher_attention << '\t' << r.drift << '\t';
        if (r.mask_importance) os << *r.mask_importance;
        os << '\n';
    }
}

inline std::vector<TokenRecord> read_token_table(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("read_token_table: empty input");
    if (line.rfind("image_id\t", 0) != 0) throw std::runtime_error("read_token_table: bad header");
    std::vector<TokenRecord> records;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        TokenRecord r;
        auto next = [&]() {
            if (!std::getline(ss, field, '\t')) throw std::runtime_error("read_token_table: short row");
            return field;
        };
        r.image_id = std::stoull(next());
        r.position = std::stoi(next());
        r.density = std::stod(next());
        r.token_type = std::stoi(next());
        r.layer_depth = std::stod(next());
        r.teacher_attention = std::stod(next());
        r.drift = std::stod(next());
        if (std::getline(ss, field, '\t') && !field.empty()) r.mask_importance = std::stod(field);
        records.push_back(r);
    }
    return records;
}

}  // namespace heed
