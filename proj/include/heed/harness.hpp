#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "heed/cache.hpp"
#include "heed/diagnostics.hpp"
#include "heed/fisher.hpp"
#include "heed/report.hpp"
#include "heed/synth.hpp"
#include "heed/train.hpp"

namespace heed {

#ifndef HEED_COMMIT
#define HEED_COMMIT "unknown"
#endif

// ---------------------------------------------------------------------------
// Experiment configuration (documented JSON file; see README)
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    ToyConfig toy;  // seed field is overwritten per run seed
    SynthParams synth;
    int train_samples = 2048;
    int eval_samples = 512;
    int diag_samples = 48;
    int diag_mask_samples = 16;  // samples carrying per-position masking importance
    StageBudget budget;
    OptimConfig optim;
    TeacherConfig teacher;
    double tau = 0.5;
    double beta = 2.0;
    bool use_cache = true;  // C4 consumes a quantized density cache
    std::vector<double> control_k = {0.0, 10.0, 25.0, 50.0};
    double control_boost = 5.0;
    std::vector<uint64_t> mask_seeds = {11, 12, 13};
    int bootstrap_resamples = 1000;
    double bootstrap_alpha = 0.05;
    std::vector<Condition> conditions = {Condition::C1, Condition::C2, Condition::C3, Condition::C4,
                                         Condition::C5};
    std::vector<uint64_t> seeds = {0, 1, 2};
    std::string out_dir = "out";

    void validate() const {
        toy.validate();
        budget.validate();
        if (train_samples < 1 || eval_samples < 1 || diag_samples < 2)
            throw std::invalid_argument("config: sample counts too small");
        if (diag_mask_samples > diag_samples)
            throw std::invalid_argument("config: diag_mask_samples exceeds diag_samples");
        if (!(tau > 0.0) || !(beta > 0.0)) throw std::invalid_argument("config: tau and beta must be > 0");
        if (seeds.empty()) throw std::invalid_argument("config: need at least one seed");
        for (double k : control_k)
            if (k < 0.0 || k > 100.0) throw std::invalid_argument("config: control k outside [0,100]");
        if (mask_seeds.empty()) throw std::invalid_argument("config: need at least one mask seed");
        if (bootstrap_resamples < 100) throw std::invalid_argument("config: bootstrap_resamples < 100");
        if (!(bootstrap_alpha > 0.0 && bootstrap_alpha < 1.0))
            throw std::invalid_argument("config: bootstrap_alpha outside (0,1)");
    }
};

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["toy"] = {{"n_layers", c.toy.n_layers},   {"d_model", c.toy.d_model},
                {"n_heads", c.toy.n_heads},     {"vocab", c.toy.vocab},
                {"grid_h", c.toy.grid_h},       {"grid_w", c.toy.grid_w},
                {"text_len", c.toy.text_len},   {"mixer_ratio", c.toy.mixer_ratio},
                {"feature_dim", c.toy.feature_dim}};
    j["data"] = {{"train_samples", c.train_samples},
                 {"eval_samples", c.eval_samples},
                 {"diag_samples", c.diag_samples},
                 {"diag_mask_samples", c.diag_mask_samples},
                 {"glyph_count", c.synth.glyph_count},
                 {"background_noise", c.synth.background_noise},
                 {"glyph_noise", c.synth.glyph_noise},
                 {"dense_fraction", c.synth.dense_fraction}};
    j["budget"] = {{"total_tokens", c.budget.total_tokens},
                   {"fractions", {c.budget.fractions[0], c.budget.fractions[1], c.budget.fractions[2]}}};
    j["optim"] = {{"peak_lr", c.optim.peak_lr},       {"final_lr_frac", c.optim.final_lr_frac},
                  {"warmup_frac", c.optim.warmup_frac}, {"weight_decay", c.optim.weight_decay},
                  {"beta1", c.optim.beta1},           {"beta2", c.optim.beta2},
                  {"eps", c.optim.eps},               {"grad_clip", c.optim.grad_clip},
                  {"batch_size", c.optim.batch_size}};
    j["teacher"] = {{"max_steps", c.teacher.max_steps},
                    {"eval_every", c.teacher.eval_every},
                    {"competence_threshold", c.teacher.competence_threshold},
                    {"peak_lr", c.teacher.optim.peak_lr},
                    {"warmup_frac", c.teacher.optim.warmup_frac},
                    {"batch_size", c.teacher.optim.batch_size}};
    j["density"] = {{"tau", c.tau}, {"beta", c.beta}, {"use_cache", c.use_cache}};
    j["control"] = {{"k_percents", c.control_k}, {"boost", c.control_boost}, {"mask_seeds", c.mask_seeds}};
    j["bootstrap"] = {{"resamples", c.bootstrap_resamples}, {"alpha", c.bootstrap_alpha}};
    json conds = json::array();
    for (auto cond : c.conditions) conds.push_back(condition_name(cond));
    j["conditions"] = conds;
    j["seeds"] = c.seeds;
    j["out_dir"] = c.out_dir;
    return j;
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    auto get = [](const json& obj, const char* key, auto def) {
        using T = decltype(def);
        return obj.contains(key) ? obj.at(key).get<T>() : def;
    };
    if (j.contains("toy")) {
        const auto& t = j.at("toy");
        c.toy.n_layers = get(t, "n_layers", c.toy.n_layers);
        c.toy.d_model = get(t, "d_model", c.toy.d_model);
        c.toy.n_heads = get(t, "n_heads", c.toy.n_heads);
        c.toy.vocab = get(t, "vocab", c.toy.vocab);
        c.toy.grid_h = get(t, "grid_h", c.toy.grid_h);
        c.toy.grid_w = get(t, "grid_w", c.toy.grid_w);
        c.toy.text_len = get(t, "text_len", c.toy.text_len);
        c.toy.mixer_ratio = get(t, "mixer_ratio", c.toy.mixer_ratio);
        c.toy.feature_dim = get(t, "feature_dim", c.toy.feature_dim);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        c.train_samples = get(d, "train_samples", c.train_samples);
        c.eval_samples = get(d, "eval_samples", c.eval_samples);
        c.diag_samples = get(d, "diag_samples", c.diag_samples);
        c.diag_mask_samples = get(d, "diag_mask_samples", c.diag_mask_samples);
        c.synth.glyph_count = get(d, "glyph_count", c.synth.glyph_count);
        c.synth.background_noise = get(d, "background_noise", c.synth.background_noise);
        c.synth.glyph_noise = get(d, "glyph_noise", c.synth.glyph_noise);
        c.synth.dense_fraction = get(d, "dense_fraction", c.synth.dense_fraction);
    }
    if (j.contains("budget")) {
        const auto& b = j.at("budget");
        c.budget.total_tokens = get(b, "total_tokens", c.budget.total_tokens);
        if (b.contains("fractions")) {
            const auto f = b.at("fractions").get<std::vector<double>>();
            if (f.size() != 3) throw std::invalid_argument("config: budget.fractions must have 3 entries");
            for (int i = 0; i < 3; ++i) c.budget.fractions[i] = f[i];
        }
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        c.optim.peak_lr = get(o, "peak_lr", c.optim.peak_lr);
        c.optim.final_lr_frac = get(o, "final_lr_frac", c.optim.final_lr_frac);
        c.optim.warmup_frac = get(o, "warmup_frac", c.optim.warmup_frac);
        c.optim.weight_decay = get(o, "weight_decay", c.optim.weight_decay);
        c.optim.beta1 = get(o, "beta1", c.optim.beta1);
        c.optim.beta2 = get(o, "beta2", c.optim.beta2);
        c.optim.eps = get(o, "eps", c.optim.eps);
        c.optim.grad_clip = get(o, "grad_clip", c.optim.grad_clip);
        c.optim.batch_size = get(o, "batch_size", c.optim.batch_size);
    }
    if (j.contains("teacher")) {
        const auto& t = j.at("teacher");
        c.teacher.max_steps = get(t, "max_steps", c.teacher.max_steps);
        c.teacher.eval_every = get(t, "eval_every", c.teacher.eval_every);
        c.teacher.competence_threshold = get(t, "competence_threshold", c.teacher.competence_threshold);
        c.teacher.optim.peak_lr = get(t, "peak_lr", c.teacher.optim.peak_lr);
        c.teacher.optim.warmup_frac = get(t, "warmup_frac", c.teacher.optim.warmup_frac);
        c.teacher.optim.batch_size = get(t, "batch_size", c.teacher.optim.batch_size);
    }
    if (j.contains("density")) {
        const auto& d = j.at("density");
        c.tau = get(d, "tau", c.tau);
        c.beta = get(d, "beta", c.beta);
        c.use_cache = get(d, "use_cache", c.use_cache);
    }
    if (j.contains("control")) {
        const auto& k = j.at("control");
        c.control_k = get(k, "k_percents", c.control_k);
        c.control_boost = get(k, "boost", c.control_boost);
        c.mask_seeds = get(k, "mask_seeds", c.mask_seeds);
    }
    if (j.contains("bootstrap")) {
        const auto& b = j.at("bootstrap");
        c.bootstrap_resamples = get(b, "resamples", c.bootstrap_resamples);
        c.bootstrap_alpha = get(b, "alpha", c.bootstrap_alpha);
    }
    if (j.contains("conditions")) {
        c.conditions.clear();
        for (const auto& s : j.at("conditions")) c.conditions.push_back(parse_condition(s.get<std::string>()));
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Per-seed world: datasets and a trained teacher
// ---------------------------------------------------------------------------

struct SeedWorld {
    ToyConfig cfg;
    std::vector<SynthSample> train, eval, diag;
    ToyModel teacher;
    double teacher_dense_acc = 0.0, teacher_smooth_acc = 0.0;
};

inline SeedWorld make_seed_world(const ExperimentConfig& config, uint64_t seed) {
    SeedWorld w;
    w.cfg = config.toy;
    w.cfg.seed = seed;
    w.train = synth_dataset(w.cfg, config.synth, config.train_samples, seed * 1000 + 1);
    w.eval = synth_dataset(w.cfg, config.synth, config.eval_samples, seed * 1000 + 2);
    w.diag = synth_dataset(w.cfg, config.synth, config.diag_samples, seed * 1000 + 3);
    w.teacher = build_teacher(w.cfg, w.train, w.eval, config.teacher);
    const auto ev = evaluate(w.teacher, w.eval);
    w.teacher_dense_acc = ev.dense_acc;
    w.teacher_smooth_acc = ev.smooth_acc;
    return w;
}

// Quantized density cache for a dataset, passed through the binary codec so
// the consuming run reads exactly what a cache file would contain.
inline DensityCacheMap build_density_cache(const std::vector<SynthSample>& samples) {
    std::vector<CacheEntry> entries;
    entries.reserve(samples.size());
    for (const auto& s : samples) {
        const auto map = normalize_density(patch_density(s.grid));
        CacheEntry e;
        e.sample_id = s.image_id;
        e.codes.reserve(map.rho_tilde.size());
        for (double rt : map.rho_tilde) e.codes.push_back(quantize4(rt));
        entries.push_back(std::move(e));
    }
    return decode_cache_map(encode_cache(entries));
}

// ---------------------------------------------------------------------------
// Diagnostics block of a run report
// ---------------------------------------------------------------------------

// Per-position drift averaged over alignment layers, pooled over images;
// deciles are taken over visual tokens ranked by density.
inline json diagnostics_json(const ExperimentConfig& config, const SeedWorld& world,
                             const ToyModel& student, uint64_t seed) {
    const ToyConfig& cfg = world.cfg;
    const int nv = cfg.visual_len();
    const int T = cfg.seq_len();
    const auto align = cfg.alignment_layers();
    const int L = static_cast<int>(align.size());

    DiagnosticOptions dopt;
    dopt.tau = config.tau;
    dopt.beta = config.beta;

    // Records for the regression (one per image/layer/position).
    std::vector<TokenRecord> records;
    // Per-image grouped rows for bootstrap and spearman statistics.
    struct ImageTokens {
        std::vector<TokenRecord> rows;          // all (layer, position) rows
        std::vector<double> vis_density;        // raw density per visual position
        std::vector<double> vis_drift;          // layer-mean drift per visual position
        std::vector<double> vis_grad;           // layer-summed |g|^2 per visual position
        std::vector<std::vector<double>> s_by_layer;  // per layer, per position sensitivity
        std::vector<std::optional<double>> mask_imp;  // per visual position
    };
    std::vector<ImageTokens> images;

    int with_mask = 0;
    for (const auto& s : world.diag) {
        DiagnosticOptions per = dopt;
        per.with_mask_importance = with_mask < config.diag_mask_samples && s.dense;
        with_mask += per.with_mask_importance;
        auto recs = collect_token_records(world.teacher, student, {s}, per);

        ImageTokens img;
        img.rows = recs;
        const auto raw = patch_density(s.grid);
        img.vis_density = raw.rho;
        img.vis_drift.assign(nv, 0.0);
        for (const auto& r : recs)
            if (r.position < nv) img.vis_drift[r.position] += r.drift / L;
        const auto field = position_sensitivity(world.teacher, s);
        img.vis_grad.assign(nv, 0.0);
        for (int p = 0; p < nv; ++p)
            for (int l = 0; l < L; ++l) img.vis_grad[p] += field.g_norms_sq(l, p);
        img.s_by_layer.assign(L, std::vector<double>(T));
        for (int l = 0; l < L; ++l)
            for (int p = 0; p < T; ++p) img.s_by_layer[l][p] = field.s(l, p);
        img.mask_imp.assign(nv, std::nullopt);
        for (const auto& r : recs)
            if (r.position < nv && r.mask_importance) img.mask_imp[r.position] = r.mask_importance;
        images.push_back(std::move(img));
        records.insert(records.end(), recs.begin(), recs.end());
    }

    json out;

    // Drift deciles over visual tokens (pooled over images).
    {
        std::vector<double> density, drift;
        for (const auto& img : images) {
            // per-image normalized density ranks the tokens; raw rho is fine
            for (int p = 0; p < nv; ++p) {
                density.push_back(img.vis_density[p]);
                drift.push_back(img.vis_drift[p]);
            }
        }
        const auto dec = decile_summary(density, drift);
        out["drift_deciles"]["means"] = dec.means;
        out["drift_deciles"]["ratio"] = dec.ratio_infinite ? -1.0 : dec.top_bottom_ratio;
        // bootstrap CI over images for the top/bottom ratio
        std::function<double(const std::vector<const ImageTokens*>&)> ratio_stat =
            [&](const std::vector<const ImageTokens*>& imgs) {
                std::vector<double> d, v;
                for (const auto* img : imgs)
                    for (int p = 0; p < nv; ++p) {
                        d.push_back(img->vis_density[p]);
                        v.push_back(img->vis_drift[p]);
                    }
                const auto s = decile_summary(d, v);
                return s.ratio_infinite ? 0.0 : s.top_bottom_ratio;
            };
        const auto ci = bootstrap_ci<ImageTokens>(images, ratio_stat, config.bootstrap_resamples,
                                                  config.bootstrap_alpha, seed * 7 + 1);
        out["drift_deciles"]["ratio_ci"] = {ci.first, ci.second};
    }

    // Masking-importance deciles (subset of images that carry it).
    {
        std::vector<double> density, imp;
        for (const auto& img : images)
            for (int p = 0; p < nv; ++p)
                if (img.mask_imp[p]) {
                    density.push_back(img.vis_density[p]);
                    imp.push_back(*img.mask_imp[p]);
                }
        if (density.size() >= 10) {
            const auto dec = decile_summary(density, imp);
            out["mask_deciles"]["means"] = dec.means;
            out["mask_deciles"]["ratio"] = dec.ratio_infinite ? -1.0 : dec.top_bottom_ratio;
        }
    }

    // Token-level regression: drift on density, token type, layer depth and
    // teacher attention, at (image, layer, position) granularity.
    {
        const int n = static_cast<int>(records.size());
        Mat X(n, 4);
        std::vector<double> y(n);
        for (int i = 0; i < n; ++i) {
            X(i, 0) = records[i].density;
            X(i, 1) = records[i].token_type;
            X(i, 2) = records[i].layer_depth;
            X(i, 3) = records[i].teacher_attention;
            y[i] = records[i].drift;
        }
        const auto rep = semi_partial_r2(X, y, {"density", "token_type", "layer_depth", "teacher_attention"});
        out["regression"]["joint_r2"] = rep.joint_r2;
        out["regression"]["n_records"] = n;
        out["regression"]["semi_partial"] = {{"density", rep.semi_partial_r2[0]},
                                             {"token_type", rep.semi_partial_r2[1]},
                                             {"layer_depth", rep.semi_partial_r2[2]},
                                             {"teacher_attention", rep.semi_partial_r2[3]}};
        std::function<double(const std::vector<const ImageTokens*>&)> density_stat =
            [](const std::vector<const ImageTokens*>& imgs) {
                int n2 = 0;
                for (const auto* img : imgs) n2 += static_cast<int>(img->rows.size());
                Mat Xr(n2, 4);
                std::vector<double> yr(n2);
                int i = 0;
                for (const auto* img : imgs)
                    for (const auto& r : img->rows) {
                        Xr(i, 0) = r.density;
                        Xr(i, 1) = r.token_type;
                        Xr(i, 2) = r.layer_depth;
                        Xr(i, 3) = r.teacher_attention;
                        yr[i++] = r.drift;
                    }
                return semi_partial_r2(Xr, yr).semi_partial_r2[0];
            };
        const auto ci = bootstrap_ci<ImageTokens>(images, density_stat, config.bootstrap_resamples,
                                                  config.bootstrap_alpha, seed * 7 + 2);
        out["regression"]["density_ci"] = {ci.first, ci.second};
    }

    // Density-vs-gradient-sensitivity rank agreement (per image, visual
    // positions), plus the cross-layer sharing statistic.
    {
        std::vector<std::vector<double>> xs, ys;
        for (const auto& img : images) {
            xs.push_back(img.vis_density);
            ys.push_back(img.vis_grad);
        }
        const auto sp = mean_per_group_spearman(xs, ys);
        out["spearman"]["density_vs_grad"] = sp.mean;
        out["spearman"]["density_vs_grad_top25"] = sp.top_quartile_mean;
        out["spearman"]["defined"] = sp.defined;
        out["spearman"]["undefined"] = sp.undefined;

        double cross = 0.0;
        int cross_n = 0;
        for (const auto& img : images) {
            for (size_t a = 0; a < img.s_by_layer.size(); ++a)
                for (size_t b = a + 1; b < img.s_by_layer.size(); ++b)
                    if (auto r = spearman(img.s_by_layer[a], img.s_by_layer[b])) {
                        cross += *r;
                        ++cross_n;
                    }
        }
        out["spearman"]["cross_layer"] = cross_n ? cross / cross_n : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

inline json run_condition(const ExperimentConfig& config, const SeedWorld& world, Condition condition,
                          uint64_t seed, ToyModel* student_out = nullptr) {
    ToyModel student = hybridize(world.teacher, world.cfg);

    DistillSpec spec;
    spec.condition = condition;
    spec.budget = config.budget;
    spec.optim = config.optim;
    spec.tau = config.tau;
    spec.beta = config.beta;
    spec.run_seed = seed;
    DensityCacheMap cache;
    if (condition == Condition::C4 && config.use_cache) {
        cache = build_density_cache(world.train);
        spec.density_cache = &cache;
    }
    const auto result = distill(world.teacher, student, world.train, spec);

    const auto ev = evaluate(student, world.eval);
    json report;
    report["schema_version"] = kReportSchemaVersion;
    report["kind"] = "run";
    report["config_hash"] = config_hash_hex(to_json(config));
    report["condition"] = condition_name(condition);
    report["seed"] = seed;
    report["metrics"] = {{"dense_acc", ev.dense_acc},
                         {"smooth_acc", ev.smooth_acc},
                         {"teacher_dense_acc", world.teacher_dense_acc},
                         {"teacher_smooth_acc", world.teacher_smooth_acc}};
    json log = json::array();
    for (const auto& entry : result.log)
        log.push_back({entry.step, entry.stage, entry.tokens, entry.loss});
    report["training"] = {{"total_steps", result.total_steps},
                          {"stage_tokens", {result.stage_tokens[0], result.stage_tokens[1],
                                            result.stage_tokens[2]}},
                          {"final_loss", result.log.empty() ? 0.0 : result.log.back().loss},
                          {"loss_log", log}};
    report["diagnostics"] = diagnostics_json(config, world, student, seed);
    report["run_meta"] = {{"config", to_json(config)}, {"commit", std::string(HEED_COMMIT)}};
    validate_report(report);
    if (student_out) *student_out = std::move(student);
    return report;
}

// Full ladder: one report per (condition, seed) plus an aggregate. Reports
// and checkpoints land in config.out_dir.
inline json run_experiment(const ExperimentConfig& config) {
    config.validate();
    if (config.conditions.empty()) throw std::invalid_argument("run_experiment: nothing to run");
    namespace fs = std::filesystem;
    fs::create_directories(config.out_dir);

    std::vector<json> reports;
    for (uint64_t seed : config.seeds) {
        SeedWorld world = make_seed_world(config, seed);
        const std::string seed_tag = "seed" + std::to_string(seed);
        save_checkpoint(world.teacher, config.out_dir + "/teacher_" + seed_tag + ".ckpt",
                        json({{"kind", "teacher"}, {"seed", seed}, {"config", to_json(config)}}).dump());
        for (Condition cond : config.conditions) {
            ToyModel student;
            json report = run_condition(config, world, cond, seed, &student);
            const std::string base =
                config.out_dir + "/" + condition_name(cond) + "_" + seed_tag;
            save_checkpoint(student, base + ".ckpt",
                            json({{"kind", "student"},
                                  {"condition", condition_name(cond)},
                                  {"seed", seed},
                                  {"config", to_json(config)}})
                                .dump());
            write_json_file(report, base + ".json");
            reports.push_back(std::move(report));
        }
    }

    json aggregate;
    if (reports.size() >= 2) {
        std::string table;
        aggregate = compare_conditions(reports, &table);
        validate_report(aggregate);
        write_json_file(aggregate, config.out_dir + "/aggregate.json");
        std::ofstream(config.out_dir + "/aggregate.txt") << table;
    } else {
        aggregate = reports.empty() ? json::object() : reports.front();
    }
    return aggregate;
}

// Random-vs-density upweighting control: for each k, one density-targeted arm
// and one random arm per mask seed (k = 0 runs once; the arms coincide).
inline json run_control(const ExperimentConfig& config) {
    config.validate();
    namespace fs = std::filesystem;
    fs::create_directories(config.out_dir);
    const uint64_t seed = config.seeds.front();
    SeedWorld world = make_seed_world(config, seed);

    auto run_arm = [&](double k, MaskMode mode, uint64_t mask_seed) {
        ToyModel student = hybridize(world.teacher, world.cfg);
        DistillSpec spec;
        spec.condition = Condition::C3;
        spec.budget = config.budget;
        spec.optim = config.optim;
        spec.run_seed = seed;
        spec.control = ControlMask{k, config.control_boost, mode, mask_seed};
        distill(world.teacher, student, world.train, spec);
        return evaluate(student, world.eval).dense_acc;
    };

    json curve = json::array();
    double baseline = 0.0;
    for (double k : config.control_k) {
        json point;
        point["k_percent"] = k;
        if (k == 0.0) {
            const double acc = run_arm(k, MaskMode::Density, 0);
            baseline = acc;
            point["density_acc"] = acc;
            point["random_accs"] = {acc};
            point["random_mean"] = acc;
            point["random_std"] = 0.0;
        } else {
            point["density_acc"] = run_arm(k, MaskMode::Density, 0);
            std::vector<double> rand_accs;
            for (uint64_t ms : config.mask_seeds) rand_accs.push_back(run_arm(k, MaskMode::Random, ms));
            double mean = 0.0;
            for (double a : rand_accs) mean += a;
            mean /= rand_accs.size();
            double var = 0.0;
            for (double a : rand_accs) var += (a - mean) * (a - mean);
            var = rand_accs.size() > 1 ? var / (rand_accs.size() - 1) : 0.0;
            point["random_accs"] = rand_accs;
            point["random_mean"] = mean;
            point["random_std"] = std::sqrt(var);
        }
        curve.push_back(point);
    }

    json report;
    report["schema_version"] = kReportSchemaVersion;
    report["kind"] = "control";
    report["config_hash"] = config_hash_hex(to_json(config));
    report["baseline"] = baseline;
    report["curve"] = curve;
    validate_report(report);
    write_json_file(report, config.out_dir + "/control.json");
    return report;
}

}  // namespace heed
