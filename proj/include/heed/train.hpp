#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "heed/cache.hpp"
#include "heed/density.hpp"
#include "heed/fisher.hpp"
#include "heed/losses.hpp"
#include "heed/model.hpp"
#include "heed/synth.hpp"

namespace heed {

// ---------------------------------------------------------------------------
// Optimizer: decoupled weight decay + adaptive moments, cosine schedule.
// ---------------------------------------------------------------------------

struct OptimConfig {
    double peak_lr = 1e-3;
    double final_lr_frac = 0.1;   // cosine decays to this fraction of peak
    double warmup_frac = 0.01;
    double weight_decay = 0.01;   // norms and biases excluded
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double grad_clip = 1.0;
    int batch_size = 16;
};

inline double lr_at(const OptimConfig& oc, long step, long total_steps) {
    if (total_steps <= 0) return oc.peak_lr;
    const long warmup = std::max<long>(1, static_cast<long>(oc.warmup_frac * total_steps));
    if (step < warmup) return oc.peak_lr * static_cast<double>(step + 1) / warmup;
    const double t = static_cast<double>(step - warmup) / std::max<long>(1, total_steps - warmup);
    const double cosine = 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
    return oc.peak_lr * (oc.final_lr_frac + (1.0 - oc.final_lr_frac) * cosine);
}

struct AdamW {
    OptimConfig oc;
    std::vector<Mat> m, v;
    long t = 0;

    explicit AdamW(const OptimConfig& cfg, const std::vector<ParamRef>& refs) : oc(cfg) {
        m.reserve(refs.size());
        v.reserve(refs.size());
        for (const auto& r : refs) {
            m.emplace_back(r.value->rows, r.value->cols);
            v.emplace_back(r.value->rows, r.value->cols);
        }
    }

    // Applies one update to every parameter the mask selects. Gradients of
    // unmasked parameters are ignored (their moments do not advance either).
    void step(const std::vector<ParamRef>& refs, const std::vector<char>& mask, double lr) {
        ++t;
        // global-norm clip over the masked gradients
        double norm2 = 0.0;
        for (size_t i = 0; i < refs.size(); ++i) {
            if (!mask[i]) continue;
            for (double g : refs[i].grad->a) norm2 += g * g;
        }
        double scale = 1.0;
        if (oc.grad_clip > 0.0 && norm2 > oc.grad_clip * oc.grad_clip)
            scale = oc.grad_clip / std::sqrt(norm2);

        const double bc1 = 1.0 - std::pow(oc.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(oc.beta2, static_cast<double>(t));
        for (size_t i = 0; i < refs.size(); ++i) {
            if (!mask[i]) continue;
            Mat& val = *refs[i].value;
            const Mat& grad = *refs[i].grad;
            const double wd = refs[i].decay ? oc.weight_decay : 0.0;
            for (size_t j = 0; j < val.a.size(); ++j) {
                const double g = grad.a[j] * scale;
                m[i].a[j] = oc.beta1 * m[i].a[j] + (1.0 - oc.beta1) * g;
                v[i].a[j] = oc.beta2 * v[i].a[j] + (1.0 - oc.beta2) * g * g;
                const double mhat = m[i].a[j] / bc1;
                const double vhat = v[i].a[j] / bc2;
                val.a[j] -= lr * (mhat / (std::sqrt(vhat) + oc.eps) + wd * val.a[j]);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double dense_acc = 0.0;
    double smooth_acc = 0.0;
    int dense_n = 0;
    int smooth_n = 0;

    double overall() const {
        const int n = dense_n + smooth_n;
        return n == 0 ? 0.0 : (dense_acc * dense_n + smooth_acc * smooth_n) / n;
    }
};

// Exact-match answer accuracy under teacher forcing: a sample counts only if
// every answer position is predicted correctly.
inline EvalResult evaluate(const ToyModel& model, const std::vector<SynthSample>& samples) {
    EvalResult r;
    int dense_ok = 0, smooth_ok = 0;
    FwdCache cache;
    for (const auto& s : samples) {
        forward(model, s.grid, s.text_tokens, cache);
        bool ok = true;
        for (size_t i = 0; i < s.answer_positions.size(); ++i) {
            const int t = s.answer_positions[i];
            const double* row = cache.logits.row(t);
            int best = 0;
            for (int v = 1; v < cache.logits.cols; ++v)
                if (row[v] > row[best]) best = v;
            if (best != s.answer_tokens[i]) {
                ok = false;
                break;
            }
        }
        if (s.dense) {
            ++r.dense_n;
            dense_ok += ok;
        } else {
            ++r.smooth_n;
            smooth_ok += ok;
        }
    }
    r.dense_acc = r.dense_n ? static_cast<double>(dense_ok) / r.dense_n : 0.0;
    r.smooth_acc = r.smooth_n ? static_cast<double>(smooth_ok) / r.smooth_n : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Teacher pre-training
// ---------------------------------------------------------------------------

struct TeacherConfig {
    int max_steps = 3000;
    int eval_every = 100;
    double competence_threshold = 0.95;
    OptimConfig optim{.peak_lr = 3e-3, .warmup_frac = 0.02, .batch_size = 16};
};

// Builds the all-attention teacher and trains it on synthetic samples until
// it clears the competence gate on held-out data (error if it never does:
// distillation contrasts would be meaningless).
inline ToyModel build_teacher(const ToyConfig& cfg, const std::vector<SynthSample>& train,
                              const std::vector<SynthSample>& held_out, const TeacherConfig& tc,
                              double* final_acc = nullptr) {
    ToyModel model = init_teacher_model(cfg);
    ToyModel grads = make_grads_like(model);
    auto refs = param_refs(model, &grads);
    std::vector<char> mask(refs.size(), 1);
    AdamW opt(tc.optim, refs);
    Rng order_rng(cfg.seed * 7919 + 13);

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = train.size();

    double best_acc = 0.0;
    for (int step = 0; step < tc.max_steps; ++step) {
        zero_grads(grads);
        for (int b = 0; b < tc.optim.batch_size; ++b) {
            if (cursor >= train.size()) {
                for (size_t i = train.size(); i-- > 1;)
                    std::swap(order[i], order[order_rng.uniform_int(0, static_cast<int>(i))]);
                cursor = 0;
            }
            const SynthSample& s = train[order[cursor++]];
            FwdCache cache;
            forward(model, s.grid, s.text_tokens, cache);
            Mat d_logits = nll_logit_grad(cache.logits, s.labels);
            int supervised = 0;
            for (int lab : s.labels) supervised += lab != kIgnoreLabel;
            const double inv = 1.0 / (supervised * tc.optim.batch_size);
            for (auto& g : d_logits.a) g *= inv;
            BackwardInputs bi;
            bi.d_logits = &d_logits;
            backward(model, cache, bi, grads, s.grid, s.text_tokens);
        }
        opt.step(refs, mask, lr_at(tc.optim, step, tc.max_steps));

        if ((step + 1) % tc.eval_every == 0 || step + 1 == tc.max_steps) {
            const auto ev = evaluate(model, held_out);
            best_acc = std::max(best_acc, ev.overall());
            if (ev.overall() >= tc.competence_threshold) {
                if (final_acc) *final_acc = ev.overall();
                return model;
            }
        }
    }
    throw std::runtime_error("build_teacher: teacher failed the competence gate (best accuracy " +
                             std::to_string(best_acc) + ")");
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

enum class Condition { C1, C2, C3, C4, C5 };

inline std::string condition_name(Condition c) {
    switch (c) {
        case Condition::C1: return "C1";
        case Condition::C2: return "C2";
        case Condition::C3: return "C3";
        case Condition::C4: return "C4";
        case Condition::C5: return "C5";
    }
    return "?";
}

inline Condition parse_condition(const std::string& s) {
    if (s == "C1") return Condition::C1;
    if (s == "C2") return Condition::C2;
    if (s == "C3") return Condition::C3;
    if (s == "C4") return Condition::C4;
    if (s == "C5") return Condition::C5;
    throw std::invalid_argument("unknown condition '" + s + "' (expected C1..C5)");
}

struct StageBudget {
    long total_tokens = 200000;
    double fractions[3] = {0.1, 0.3, 0.6};

    void validate() const {
        if (total_tokens <= 0) throw std::invalid_argument("StageBudget: total_tokens must be > 0");
        const double sum = fractions[0] + fractions[1] + fractions[2];
        if (std::fabs(sum - 1.0) > 1e-9) throw std::invalid_argument("StageBudget: fractions must sum to 1");
        for (double f : fractions)
            if (f < 0.0) throw std::invalid_argument("StageBudget: negative fraction");
    }
};

// Per-sample density map source for C4: either recomputed from the grid or
// dequantized from an encoded cache.
struct DensityCacheMap {
    std::map<uint64_t, std::vector<double>> rho;  // sample_id -> per-visual-position density
};

inline DensityCacheMap decode_cache_map(const std::vector<uint8_t>& bytes) {
    DensityCacheMap m;
    for (const auto& e : decode_cache(bytes)) m.rho[e.sample_id] = entry_rho(e);
    return m;
}

// Optional control-mask arm (the random-vs-density upweighting experiment):
// stage-1/2 alignment runs with binary mask weights over visual positions.
struct ControlMask {
    double k_percent = 25.0;
    double boost = 5.0;
    MaskMode mode = MaskMode::Density;
    uint64_t seed = 0;
};

struct DistillSpec {
    Condition condition = Condition::C3;
    StageBudget budget;
    OptimConfig optim;
    double lambda_kl = 1.0;
    double lambda_ce = 0.1;
    double tau = 0.5;
    double beta = 2.0;
    uint64_t run_seed = 0;
    const DensityCacheMap* density_cache = nullptr;  // consulted by C4 when present
    std::optional<ControlMask> control;
};

struct StepLog {
    long step = 0;
    int stage = 0;
    long tokens = 0;
    double loss = 0.0;
};

struct DistillResult {
    std::vector<StepLog> log;
    long stage_tokens[3] = {0, 0, 0};
    long total_steps = 0;
};

namespace detail {

// Alignment weights for one sample under C4/C5/control. Memoized: the weight
// is a one-time per-sample quantity.
struct WeightSource {
    const DistillSpec& spec;
    const ToyModel& teacher;
    std::map<uint64_t, WeightVector> memo;

    const WeightVector& get(const SynthSample& s) {
        auto it = memo.find(s.image_id);
        if (it != memo.end()) return it->second;
        WeightVector wv;
        const int T = teacher.cfg.seq_len();
        if (spec.control) {
            DensityMap map = patch_density(s.grid);
            const uint64_t mask_seed = spec.control->seed * 0x9e3779b97f4a7c15ULL + s.image_id;
            WeightVector vis = topk_mask_weights(map, spec.control->k_percent, spec.control->boost,
                                                 spec.control->mode, mask_seed);
            wv.weights = vis.weights;
            wv.weights.resize(T, 1.0);  // text positions left unchanged
            wv.visual_count = vis.visual_count;
            wv.text_count = T - vis.visual_count;
        } else if (spec.condition == Condition::C4) {
            DensityMap map;
            if (spec.density_cache) {
                auto rit = spec.density_cache->rho.find(s.image_id);
                if (rit == spec.density_cache->rho.end())
                    throw std::runtime_error("distill: sample " + std::to_string(s.image_id) +
                                             " missing from density cache");
                map.rho = rit->second;
            } else {
                map = patch_density(s.grid);
            }
            wv = sequence_weights(map, teacher.cfg.text_len, spec.tau, spec.beta);
        } else if (spec.condition == Condition::C5) {
            const SensitivityField field = position_sensitivity(teacher, s);
            wv = grad_weight(field, T);
            // Causally dead positions can carry exactly zero sensitivity;
            // clamp so the weighted loss contract (w > 0) holds.
            for (auto& w : wv.weights) w = std::max(w, 1e-12);
        }
        return memo.emplace(s.image_id, std::move(wv)).first->second;
    }
};

}  // namespace detail

// Batch-mean loss for one stage of one condition, with optional parameter
// gradient accumulation. Shared by distill() and the gradient checks.
inline double batch_loss(const ToyModel& teacher, const ToyModel& student,
                         const std::vector<const SynthSample*>& batch, const DistillSpec& spec,
                         int stage, ToyModel* grads, detail::WeightSource& weights) {
    if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
    const auto replaced = teacher.cfg.replaced_layers();
    const double batch_inv = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const SynthSample* sp : batch) {
        const SynthSample& s = *sp;
        FwdCache teacher_cache;
        const ResidualTrace teacher_trace =
            forward_with_residuals(teacher, s.grid, s.text_tokens, teacher_cache);
        FwdCache student_cache;
        const ResidualTrace student_trace =
            forward_with_residuals(student, s.grid, s.text_tokens, student_cache);

        BackwardInputs bi;
        LossValue loss;
        Mat d_logits;
        if (stage < 3) {
            if (spec.control || spec.condition == Condition::C4 || spec.condition == Condition::C5) {
                // Weighted residual alignment; control arms substitute the
                // binary mask for the density/gradient weight.
                loss = heed_loss(student_trace, teacher_trace, weights.get(s));
                for (size_t l = 0; l < replaced.size(); ++l) {
                    for (auto& g : loss.grad[l].a) g *= batch_inv;
                    bi.d_residual[replaced[l]] = &loss.grad[l];
                }
            } else if (spec.condition == Condition::C2) {
                loss = hsa_loss(student_trace.block_outputs, teacher_trace.block_outputs);
                for (size_t l = 0; l < replaced.size(); ++l) {
                    for (auto& g : loss.grad[l].a) g *= batch_inv;
                    bi.d_sub_out[replaced[l]] = &loss.grad[l];
                }
            } else if (spec.condition == Condition::C3) {
                loss = rsa_loss(student_trace, teacher_trace);
                for (size_t l = 0; l < replaced.size(); ++l) {
                    for (auto& g : loss.grad[l].a) g *= batch_inv;
                    bi.d_residual[replaced[l]] = &loss.grad[l];
                }
            } else {
                throw std::logic_error("batch_loss: C1 has no stage-1/2 loss");
            }
        } else {
            loss = kd_loss(student_trace.logits, teacher_trace.logits, s.labels, spec.lambda_kl,
                           spec.lambda_ce);
            d_logits = std::move(loss.grad[0]);
            for (auto& g : d_logits.a) g *= batch_inv;
            bi.d_logits = &d_logits;
        }
        total += loss.value * batch_inv;
        if (grads) backward(student, student_cache, bi, *grads, s.grid, s.text_tokens);
    }
    return total;
}

// Three-stage distillation. Stage 1 trains only the new mixer parameters on
// the alignment loss, stage 2 opens the transferred projections, stage 3
// switches to end-to-end logit distillation. Gradients never reach frozen
// teacher-owned modules.
inline DistillResult distill(const ToyModel& teacher, ToyModel& student,
                             const std::vector<SynthSample>& dataset, const DistillSpec& spec) {
    spec.budget.validate();
    if (dataset.empty()) throw std::invalid_argument("distill: empty dataset");
    if (spec.density_cache && !(spec.condition == Condition::C4))
        throw std::invalid_argument("distill: density cache supplied for a condition that does not use it");
    if (!student.is_hybrid()) throw std::invalid_argument("distill: student is not hybridized");

    const int T = teacher.cfg.seq_len();
    const long batch_tokens = static_cast<long>(spec.optim.batch_size) * T;

    // Budget accounting: floor each stage boundary to whole batches.
    long stage_steps[3];
    const bool skip_align = spec.condition == Condition::C1;
    {
        const double f1 = skip_align ? 0.0 : spec.budget.fractions[0];
        const double f2 = skip_align ? 0.0 : spec.budget.fractions[1];
        stage_steps[0] = static_cast<long>(f1 * spec.budget.total_tokens / batch_tokens);
        stage_steps[1] = static_cast<long>(f2 * spec.budget.total_tokens / batch_tokens);
        stage_steps[2] = spec.budget.total_tokens / batch_tokens - stage_steps[0] - stage_steps[1];
    }
    const long total_steps = stage_steps[0] + stage_steps[1] + stage_steps[2];

    ToyModel grads = make_grads_like(student);
    auto refs = param_refs(student, &grads);
    std::vector<char> mask_stage1(refs.size(), 0), mask_stage23(refs.size(), 0);
    for (size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].group == ParamGroup::MixerAux) mask_stage1[i] = mask_stage23[i] = 1;
        if (refs[i].group == ParamGroup::MixerCore) mask_stage23[i] = 1;
    }
    AdamW opt(spec.optim, refs);

    detail::WeightSource weights{spec, teacher, {}};

    Rng order_rng(spec.run_seed * 6364136223846793005ULL + 1442695040888963407ULL);
    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = dataset.size();

    DistillResult result;
    result.total_steps = total_steps;
    long tokens = 0;
    std::vector<const SynthSample*> batch(spec.optim.batch_size);
    for (long step = 0; step < total_steps; ++step) {
        const int stage = step < stage_steps[0] ? 1 : (step < stage_steps[0] + stage_steps[1] ? 2 : 3);
        const std::vector<char>& mask = stage == 1 ? mask_stage1 : mask_stage23;
        zero_grads(grads);
        for (int b = 0; b < spec.optim.batch_size; ++b) {
            if (cursor >= dataset.size()) {
                for (size_t i = dataset.size(); i-- > 1;)
                    std::swap(order[i], order[order_rng.uniform_int(0, static_cast<int>(i))]);
                cursor = 0;
            }
            batch[b] = &dataset[order[cursor++]];
        }
        const double loss = batch_loss(teacher, student, batch, spec, stage, &grads, weights);
        opt.step(refs, mask, lr_at(spec.optim, step, total_steps));
        tokens += batch_tokens;
        result.stage_tokens[stage - 1] += batch_tokens;
        result.log.push_back({step, stage, tokens, loss});
    }
    return result;
}

}  // namespace heed
