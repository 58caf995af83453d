#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "heed/density.hpp"
#include "heed/mat.hpp"
#include "heed/model.hpp"

namespace heed {

// Token ids shared by the generator and the evaluation code.
namespace tok {
constexpr int kPad = 0;
constexpr int kEos = 1;
constexpr int kSep = 2;
constexpr int kAskDense = 3;
constexpr int kAskSmooth = 4;
constexpr int kRowBase = 5;    // row-query tokens, one per grid row
constexpr int kGlyphBase = 16;
constexpr int kGlyphCount = 24;
constexpr int kSmoothBase = 40;
constexpr int kSmoothCount = 16;
}  // namespace tok

// One synthetic sample. Dense-recall samples hide glyphs in a few locally
// distinctive patches and chain a two-hop lookup through them (the glyph in
// the prompted row points at the row holding the answer glyph), so the final
// read must happen in a late layer against the pointed-at cell's
// representation. Smooth samples encode the answer in the shared background
// direction (global, low-density evidence).
struct SynthSample {
    uint64_t image_id = 0;
    bool dense = true;
    PatchGrid grid;
    std::vector<int> glyph_cells;        // raster positions of glyph patches
    int pointer_cell = -1;               // glyph cell in the prompted row
    int answer_cell = -1;                // glyph cell the pointer designates
    std::vector<int> text_tokens;        // length text_len
    std::vector<int> labels;             // length seq_len, kIgnoreLabel off the answer span
    std::vector<int> answer_positions;   // positions whose label is an answer token
    std::vector<int> answer_tokens;
};

struct SynthParams {
    int glyph_count = 2;          // glyph patches per dense sample
    double background_noise = 0.05;
    double glyph_noise = 0.05;
    double dense_fraction = 0.5;  // fraction of dense-recall samples
};

// Feature dictionary shared by every dataset drawn under one config: one unit
// direction per glyph token and per smooth class, plus the shared dense-task
// background direction. Depends only on the config.
struct SynthDictionary {
    std::vector<std::vector<double>> glyph_dirs;   // kGlyphCount x D
    std::vector<std::vector<double>> smooth_dirs;  // kSmoothCount x D
    std::vector<double> dense_background;

    explicit SynthDictionary(const ToyConfig& cfg) {
        Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0x5d1ce5eeddeadbeeULL);
        for (int g = 0; g < tok::kGlyphCount; ++g) glyph_dirs.push_back(rng.unit_vector(cfg.feature_dim));
        for (int c = 0; c < tok::kSmoothCount; ++c) smooth_dirs.push_back(rng.unit_vector(cfg.feature_dim));
        dense_background = rng.unit_vector(cfg.feature_dim);
    }
};

namespace detail {
inline void add_noisy_direction(double* dst, const std::vector<double>& dir, double noise, Rng& rng) {
    const int d = static_cast<int>(dir.size());
    double norm2 = 0.0;
    for (int i = 0; i < d; ++i) {
        dst[i] = dir[i] + noise * rng.normal();
        norm2 += dst[i] * dst[i];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (int i = 0; i < d; ++i) dst[i] *= inv;
}
}  // namespace detail

// Deterministic dataset draw: same (config, seed) -> identical samples.
// Dense prompt: [ask, row_r, sep] -> answer is the glyph token in row r
// (glyph cells sit in distinct rows). Smooth prompt: [ask, pad, sep] ->
// answer is the background class token. Both answers land at position
// visual_len + 2, followed by an EOS target.
inline std::vector<SynthSample> synth_dataset(const ToyConfig& cfg, const SynthParams& params,
                                              int n_samples, uint64_t seed) {
    cfg.validate();
    if (tok::kSmoothBase + tok::kSmoothCount > cfg.vocab)
        throw std::invalid_argument("synth_dataset: vocab too small for token layout");
    if (tok::kRowBase + cfg.grid_h > tok::kGlyphBase)
        throw std::invalid_argument("synth_dataset: too many grid rows for the token layout");
    if (cfg.grid_h > tok::kGlyphCount)
        throw std::invalid_argument("synth_dataset: grid_h exceeds the glyph alphabet");
    if (params.glyph_count < 1 || params.glyph_count > cfg.grid_h)
        throw std::invalid_argument("synth_dataset: glyph_count must be in [1, grid_h]");
    if (cfg.text_len < 5)
        throw std::invalid_argument("synth_dataset: text_len too short for prompt+answer+eos");

    const SynthDictionary dict(cfg);
    Rng rng(seed * 0x2545f4914f6cdd1dULL + 0x1234567890abcdefULL);
    std::vector<SynthSample> out;
    out.reserve(n_samples);
    const int nv = cfg.visual_len();
    const int T = cfg.seq_len();

    for (int s = 0; s < n_samples; ++s) {
        SynthSample sample;
        sample.image_id = seed * 1000003ULL + static_cast<uint64_t>(s);
        sample.dense = rng.uniform() < params.dense_fraction;
        sample.grid = PatchGrid(cfg.grid_h, cfg.grid_w, cfg.feature_dim);
        sample.text_tokens.assign(cfg.text_len, tok::kPad);
        sample.labels.assign(T, kIgnoreLabel);

        if (sample.dense) {
            for (int p = 0; p < nv; ++p)
                detail::add_noisy_direction(sample.grid.patch(p), dict.dense_background,
                                            params.background_noise, rng);
            // one glyph per chosen row; the prompted row holds the pointer
            // glyph whose id designates the row of the answer glyph
            const auto rows = rng.sample_without_replacement(cfg.grid_h, params.glyph_count);
            const int pointer_row = rows[0];
            const int answer_row = rows[1 % params.glyph_count];
            std::vector<int> glyph_ids(params.glyph_count);
            std::vector<int> cells(params.glyph_count);
            for (int g = 0; g < params.glyph_count; ++g) {
                cells[g] = rows[g] * cfg.grid_w + rng.uniform_int(0, cfg.grid_w - 1);
                glyph_ids[g] = rng.uniform_int(0, tok::kGlyphCount - 1);
            }
            // pointer id encodes the answer row: id mod grid_h == answer_row
            const int stride = tok::kGlyphCount / cfg.grid_h;
            glyph_ids[0] = answer_row + cfg.grid_h * rng.uniform_int(0, std::max(1, stride) - 1);
            for (int g = 0; g < params.glyph_count; ++g) {
                sample.glyph_cells.push_back(cells[g]);
                detail::add_noisy_direction(sample.grid.patch(cells[g]), dict.glyph_dirs[glyph_ids[g]],
                                            params.glyph_noise, rng);
            }
            sample.pointer_cell = cells[0];
            sample.answer_cell = cells[1 % params.glyph_count];
            const int answer_id = glyph_ids[1 % params.glyph_count];
            sample.text_tokens[0] = tok::kAskDense;
            sample.text_tokens[1] = tok::kSep;
            sample.text_tokens[2] = tok::kRowBase + pointer_row;
            sample.text_tokens[3] = tok::kGlyphBase + answer_id;
            sample.text_tokens[4] = tok::kEos;
            sample.labels[nv + 2] = tok::kGlyphBase + answer_id;
            sample.labels[nv + 3] = tok::kEos;
            sample.answer_positions.push_back(nv + 2);
            sample.answer_tokens.push_back(tok::kGlyphBase + answer_id);
            std::sort(sample.glyph_cells.begin(), sample.glyph_cells.end());
        } else {
            const int cls = rng.uniform_int(0, tok::kSmoothCount - 1);
            for (int p = 0; p < nv; ++p)
                detail::add_noisy_direction(sample.grid.patch(p), dict.smooth_dirs[cls],
                                            params.background_noise, rng);
            sample.text_tokens[0] = tok::kAskSmooth;
            sample.text_tokens[1] = tok::kSep;
            sample.text_tokens[2] = tok::kPad;
            sample.text_tokens[3] = tok::kSmoothBase + cls;
            sample.text_tokens[4] = tok::kEos;
            sample.labels[nv + 2] = tok::kSmoothBase + cls;
            sample.labels[nv + 3] = tok::kEos;
            sample.answer_positions.push_back(nv + 2);
            sample.answer_tokens.push_back(tok::kSmoothBase + cls);
        }
        out.push_back(std::move(sample));
    }
    return out;
}

// Generation-time measurement: fraction of dense samples whose every glyph
// patch has strictly higher raw density than every background patch.
inline double glyph_density_dominance(const std::vector<SynthSample>& samples) {
    int dense = 0, dominated = 0;
    for (const auto& s : samples) {
        if (!s.dense) continue;
        ++dense;
        const auto map = patch_density(s.grid);
        double min_glyph = std::numeric_limits<double>::infinity();
        for (int cell : s.glyph_cells) min_glyph = std::min(min_glyph, map.rho[cell]);
        bool ok = true;
        for (int p = 0; p < map.size(); ++p) {
            if (std::find(s.glyph_cells.begin(), s.glyph_cells.end(), p) != s.glyph_cells.end()) continue;
            if (map.rho[p] >= min_glyph) {
                ok = false;
                break;
            }
        }
        dominated += ok;
    }
    return dense == 0 ? 0.0 : static_cast<double>(dominated) / dense;
}

}  // namespace heed
