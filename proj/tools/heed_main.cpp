// Command-line front end for the distillation laboratory: runs the condition
// ladder, the diagnostic protocol, the upweighting control, and the density
// cache codec. Errors are reported as JSON on stderr with a nonzero exit.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "heed/cache.hpp"
#include "heed/diagnostics.hpp"
#include "heed/harness.hpp"
#include "heed/report.hpp"

namespace fs = std::filesystem;
using heed::json;

namespace {

int fail(const std::string& kind, const std::string& message) {
    json err;
    err["error"] = {{"kind", kind}, {"message", message}};
    std::cerr << err.dump() << std::endl;
    return 1;
}

heed::ExperimentConfig load_config(const std::string& path) {
    return heed::config_from_json(heed::load_json_file(path));
}

int cmd_train(const std::string& config_path, const std::string& condition, long seed,
              const std::string& out_dir) {
    heed::ExperimentConfig config = load_config(config_path);
    config.out_dir = out_dir;
    fs::create_directories(out_dir);
    const auto cond = heed::parse_condition(condition);

    heed::SeedWorld world = heed::make_seed_world(config, static_cast<uint64_t>(seed));
    const std::string seed_tag = "seed" + std::to_string(seed);
    heed::save_checkpoint(world.teacher, out_dir + "/teacher_" + seed_tag + ".ckpt",
                          json({{"kind", "teacher"}, {"seed", seed}, {"config", to_json(config)}}).dump());

    heed::ToyModel student;
    json report = heed::run_condition(config, world, cond, static_cast<uint64_t>(seed), &student);
    const std::string base = out_dir + "/" + condition + "_" + seed_tag;
    heed::save_checkpoint(student, base + ".ckpt",
                          json({{"kind", "student"},
                                {"condition", condition},
                                {"seed", seed},
                                {"config", to_json(config)}})
                              .dump());
    heed::write_json_file(report, base + ".json");
    std::cout << report["metrics"].dump() << std::endl;
    return 0;
}

int cmd_diagnose(const std::string& student_path, const std::string& teacher_path,
                 const std::string& out_dir) {
    std::string student_meta, teacher_meta;
    heed::ToyModel student = heed::load_checkpoint(student_path, &student_meta);
    heed::ToyModel teacher = heed::load_checkpoint(teacher_path, &teacher_meta);
    if (teacher.is_hybrid()) return fail("bad_checkpoint", "teacher checkpoint contains mixer blocks");
    const json meta = json::parse(student_meta);
    if (!meta.contains("config")) return fail("bad_checkpoint", "student checkpoint carries no config echo");
    heed::ExperimentConfig config = heed::config_from_json(meta["config"]);
    const auto seed = student.cfg.seed;
    if (teacher.cfg.seed != seed) return fail("bad_checkpoint", "teacher/student seeds differ");

    fs::create_directories(out_dir);
    heed::SeedWorld world;
    world.cfg = student.cfg;
    world.diag = heed::synth_dataset(world.cfg, config.synth, config.diag_samples, seed * 1000 + 3);
    world.teacher = std::move(teacher);

    json report;
    report["schema_version"] = heed::kReportSchemaVersion;
    report["kind"] = "diagnose";
    report["config_hash"] = heed::config_hash_hex(to_json(config));
    report["seed"] = seed;
    report["diagnostics"] = heed::diagnostics_json(config, world, student, seed);

    heed::DiagnosticOptions dopt;
    dopt.tau = config.tau;
    dopt.beta = config.beta;
    const auto records = heed::collect_token_records(world.teacher, student, world.diag, dopt);
    const std::string table_path = out_dir + "/token_table.tsv";
    std::ofstream table(table_path);
    heed::write_token_table(records, table);
    report["token_table"] = table_path;

    heed::validate_report(report);
    heed::write_json_file(report, out_dir + "/diagnose.json");
    std::cout << report["diagnostics"]["drift_deciles"].dump() << std::endl;
    return 0;
}

int cmd_cache_encode(const std::string& in_path, const std::string& out_path) {
    const json in = heed::load_json_file(in_path);
    if (!in.contains("samples")) return fail("bad_input", "expected top-level 'samples' array");
    std::vector<heed::CacheEntry> entries;
    for (const auto& s : in["samples"]) {
        heed::CacheEntry e;
        e.sample_id = s.at("id").get<uint64_t>();
        for (const auto& v : s.at("rho_tilde")) e.codes.push_back(heed::quantize4(v.get<double>()));
        entries.push_back(std::move(e));
    }
    const auto bytes = heed::encode_cache(entries);
    std::ofstream out(out_path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) return fail("io", "cannot write " + out_path);
    std::cout << json({{"samples", entries.size()}, {"bytes", bytes.size()}}).dump() << std::endl;
    return 0;
}

int cmd_cache_inspect(const std::string& in_path, const std::string& out_path) {
    std::ifstream f(in_path, std::ios::binary);
    if (!f) return fail("io", "cannot open " + in_path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto entries = heed::decode_cache(bytes);
    json out;
    out["version"] = heed::cachefmt::kVersion;
    out["n_samples"] = entries.size();
    out["total_bytes"] = bytes.size();
    json samples = json::array();
    for (const auto& e : entries) {
        const auto rho = heed::entry_rho(e);
        double mn = 1.0, mx = 0.0, mean = 0.0;
        for (double r : rho) {
            mn = std::min(mn, r);
            mx = std::max(mx, r);
            mean += r;
        }
        if (!rho.empty()) mean /= static_cast<double>(rho.size());
        samples.push_back({{"id", e.sample_id},
                           {"n_positions", e.n_positions()},
                           {"rho_min", rho.empty() ? 0.0 : mn},
                           {"rho_max", rho.empty() ? 0.0 : mx},
                           {"rho_mean", mean}});
    }
    out["samples"] = samples;
    if (!out_path.empty()) heed::write_json_file(out, out_path);
    std::cout << out.dump(2) << std::endl;
    return 0;
}

int cmd_control(const std::string& config_path, const std::string& out_dir) {
    heed::ExperimentConfig config = load_config(config_path);
    config.out_dir = out_dir;
    const json report = heed::run_control(config);
    std::cout << report["curve"].dump() << std::endl;
    return 0;
}

int cmd_compare(const std::vector<std::string>& report_paths, const std::string& out_path) {
    std::vector<json> reports;
    for (const auto& p : report_paths) reports.push_back(heed::load_json_file(p));
    std::string table;
    const json aggregate = heed::compare_conditions(reports, &table);
    heed::validate_report(aggregate);
    if (!out_path.empty()) heed::write_json_file(aggregate, out_path);
    std::cout << table << aggregate["deltas"].dump(2) << std::endl;
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_dir) {
    heed::ExperimentConfig config = load_config(config_path);
    if (!out_dir.empty()) config.out_dir = out_dir;
    const json aggregate = heed::run_experiment(config);
    std::cout << (aggregate.contains("deltas") ? aggregate["deltas"].dump(2) : aggregate.dump(2))
              << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"density-weighted residual-alignment distillation laboratory"};
    app.require_subcommand(1);

    std::string config_path, condition = "C4", out = "out";
    long seed = 0;
    auto* train = app.add_subcommand("train", "distill one condition for one seed");
    train->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    train->add_option("--condition", condition);
    train->add_option("--seed", seed);
    train->add_option("--out", out);

    std::string ckpt_path, teacher_path, diag_out = "out";
    auto* diagnose = app.add_subcommand("diagnose", "drift/importance diagnostics for a checkpoint pair");
    diagnose->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
    diagnose->add_option("--teacher", teacher_path)->required()->check(CLI::ExistingFile);
    diagnose->add_option("--out", diag_out);

    std::string control_config, control_out = "out";
    auto* control = app.add_subcommand("control", "density-vs-random upweighting control curve");
    control->add_option("--config", control_config)->required()->check(CLI::ExistingFile);
    control->add_option("--out", control_out);

    auto* cache = app.add_subcommand("cache", "density cache codec");
    cache->require_subcommand(1);
    std::string cache_in, cache_out;
    auto* encode = cache->add_subcommand("encode", "pack rho_tilde scalars into a cache file");
    encode->add_option("--in", cache_in)->required()->check(CLI::ExistingFile);
    encode->add_option("--out", cache_out)->required();
    std::string inspect_in, inspect_out;
    auto* inspect = cache->add_subcommand("inspect", "summarize a cache file");
    inspect->add_option("--in", inspect_in)->required()->check(CLI::ExistingFile);
    inspect->add_option("--out", inspect_out);

    std::vector<std::string> report_paths;
    std::string compare_out;
    auto* compare = app.add_subcommand("compare", "aggregate run reports into paired deltas");
    compare->add_option("reports", report_paths)->required()->check(CLI::ExistingFile);
    compare->add_option("--out", compare_out);

    std::string run_config, run_out;
    auto* run = app.add_subcommand("run", "full ladder: every (condition, seed) plus aggregate");
    run->add_option("--config", run_config)->required()->check(CLI::ExistingFile);
    run->add_option("--out", run_out);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, condition, seed, out);
        if (diagnose->parsed()) return cmd_diagnose(ckpt_path, teacher_path, diag_out);
        if (control->parsed()) return cmd_control(control_config, control_out);
        if (cache->parsed()) {
            if (encode->parsed()) return cmd_cache_encode(cache_in, cache_out);
            if (inspect->parsed()) return cmd_cache_inspect(inspect_in, inspect_out);
        }
        if (compare->parsed()) return cmd_compare(report_paths, compare_out);
        if (run->parsed()) return cmd_run(run_config, run_out);
    } catch (const heed::CodecError& e) {
        return fail("codec", e.what());
    } catch (const std::invalid_argument& e) {
        return fail("invalid_argument", e.what());
    } catch (const std::exception& e) {
        return fail("runtime", e.what());
    }
    return fail("usage", "no subcommand executed");
}
