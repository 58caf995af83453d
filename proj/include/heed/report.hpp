#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "heed/mat.hpp"
#include "heed/stats.hpp"

namespace heed {

using json = nlohmann::json;

constexpr int kReportSchemaVersion = 1;

// Versioned schema for every report the harness emits. The same text ships
// in-repo at schema/report.schema.json; a test keeps the two in sync. The
// validator below interprets the subset of JSON-Schema used here: type,
// properties, required, items, enum, and $ref into "definitions".
inline const char* report_schema_text() {
    return R"SCHEMA({
  "schema_version": 1,
  "definitions": {
    "diagnostics": {
      "type": "object",
      "required": ["drift_deciles", "regression", "spearman"],
      "properties": {
        "drift_deciles": {
          "type": "object",
          "required": ["means", "ratio"],
          "properties": {
            "means": {"type": "array", "items": {"type": "number"}},
            "ratio": {"type": "number"},
            "ratio_ci": {"type": "array", "items": {"type": "number"}}
          }
        },
        "mask_deciles": {
          "type": "object",
          "required": ["means", "ratio"],
          "properties": {
            "means": {"type": "array", "items": {"type": "number"}},
            "ratio": {"type": "number"}
          }
        },
        "regression": {
          "type": "object",
          "required": ["joint_r2", "semi_partial", "n_records"],
          "properties": {
            "joint_r2": {"type": "number"},
            "n_records": {"type": "integer"},
            "semi_partial": {
              "type": "object",
              "required": ["density", "token_type", "layer_depth", "teacher_attention"],
              "properties": {
                "density": {"type": "number"},
                "token_type": {"type": "number"},
                "layer_depth": {"type": "number"},
                "teacher_attention": {"type": "number"}
              }
            },
            "density_ci": {"type": "array", "items": {"type": "number"}}
          }
        },
        "spearman": {
          "type": "object",
          "required": ["density_vs_grad", "density_vs_grad_top25", "cross_layer"],
          "properties": {
            "density_vs_grad": {"type": "number"},
            "density_vs_grad_top25": {"type": "number"},
            "cross_layer": {"type": "number"},
            "defined": {"type": "integer"},
            "undefined": {"type": "integer"}
          }
        }
      }
    }
  },
  "run": {
    "type": "object",
    "required": ["schema_version", "kind", "config_hash", "condition", "seed", "metrics", "training",
                 "diagnostics", "run_meta"],
    "properties": {
      "schema_version": {"type": "integer"},
      "kind": {"enum": ["run"]},
      "config_hash": {"type": "string"},
      "condition": {"enum": ["C1", "C2", "C3", "C4", "C5"]},
      "seed": {"type": "integer"},
      "metrics": {
        "type": "object",
        "required": ["dense_acc", "smooth_acc", "teacher_dense_acc", "teacher_smooth_acc"],
        "properties": {
          "dense_acc": {"type": "number"},
          "smooth_acc": {"type": "number"},
          "teacher_dense_acc": {"type": "number"},
          "teacher_smooth_acc": {"type": "number"}
        }
      },
      "training": {
        "type": "object",
        "required": ["total_steps", "stage_tokens", "final_loss", "loss_log"],
        "properties": {
          "total_steps": {"type": "integer"},
          "stage_tokens": {"type": "array", "items": {"type": "integer"}},
          "final_loss": {"type": "number"},
          "loss_log": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
        }
      },
      "diagnostics": {"$ref": "diagnostics"},
      "run_meta": {
        "type": "object",
        "required": ["config", "commit"],
        "properties": {"commit": {"type": "string"}, "config": {"type": "object"}}
      }
    }
  },
  "diagnose": {
    "type": "object",
    "required": ["schema_version", "kind", "config_hash", "seed", "diagnostics"],
    "properties": {
      "schema_version": {"type": "integer"},
      "kind": {"enum": ["diagnose"]},
      "config_hash": {"type": "string"},
      "seed": {"type": "integer"},
      "diagnostics": {"$ref": "diagnostics"},
      "token_table": {"type": "string"}
    }
  },
  "aggregate": {
    "type": "object",
    "required": ["schema_version", "kind", "config_hash", "cells", "deltas", "missing"],
    "properties": {
      "schema_version": {"type": "integer"},
      "kind": {"enum": ["aggregate"]},
      "config_hash": {"type": "string"},
      "cells": {"type": "object"},
      "deltas": {"type": "object"},
      "missing": {"type": "array", "items": {"type": "string"}}
    }
  },
  "control": {
    "type": "object",
    "required": ["schema_version", "kind", "config_hash", "baseline", "curve"],
    "properties": {
      "schema_version": {"type": "integer"},
      "kind": {"enum": ["control"]},
      "config_hash": {"type": "string"},
      "baseline": {"type": "number"},
      "curve": {
        "type": "array",
        "items": {
          "type": "object",
          "required": ["k_percent", "density_acc", "random_accs", "random_mean", "random_std"],
          "properties": {
            "k_percent": {"type": "number"},
            "density_acc": {"type": "number"},
            "random_accs": {"type": "array", "items": {"type": "number"}},
            "random_mean": {"type": "number"},
            "random_std": {"type": "number"}
          }
        }
      }
    }
  }
})SCHEMA";
}

// Validates `doc` against the subset schema `sch` (with $ref resolved from
// root["definitions"]). Throws with a JSON-pointer style path on the first
// violation.
inline void schema_validate(const json& doc, const json& sch, const json& root,
                            const std::string& path = "$") {
    if (sch.contains("$ref")) {
        const std::string name = sch["$ref"].get<std::string>();
        if (!root.contains("definitions") || !root["definitions"].contains(name))
            throw std::runtime_error("schema: unresolved $ref '" + name + "'");
        schema_validate(doc, root["definitions"][name], root, path);
        return;
    }
    if (sch.contains("enum")) {
        for (const auto& v : sch["enum"])
            if (doc == v) return;
        throw std::runtime_error("schema: " + path + " not in enum");
    }
    const std::string type = sch.value("type", "");
    if (type == "object") {
        if (!doc.is_object()) throw std::runtime_error("schema: " + path + " expected object");
        if (sch.contains("required"))
            for (const auto& key : sch["required"])
                if (!doc.contains(key.get<std::string>()))
                    throw std::runtime_error("schema: " + path + " missing required key '" +
                                             key.get<std::string>() + "'");
        if (sch.contains("properties"))
            for (auto it = sch["properties"].begin(); it != sch["properties"].end(); ++it)
                if (doc.contains(it.key()))
                    schema_validate(doc[it.key()], it.value(), root, path + "." + it.key());
    } else if (type == "array") {
        if (!doc.is_array()) throw std::runtime_error("schema: " + path + " expected array");
        if (sch.contains("items")) {
            int i = 0;
            for (const auto& el : doc)
                schema_validate(el, sch["items"], root, path + "[" + std::to_string(i++) + "]");
        }
    } else if (type == "number") {
        if (!doc.is_number()) throw std::runtime_error("schema: " + path + " expected number");
    } else if (type == "integer") {
        if (!doc.is_number_integer()) throw std::runtime_error("schema: " + path + " expected integer");
    } else if (type == "string") {
        if (!doc.is_string()) throw std::runtime_error("schema: " + path + " expected string");
    } else if (type == "boolean") {
        if (!doc.is_boolean()) throw std::runtime_error("schema: " + path + " expected boolean");
    } else if (!type.empty()) {
        throw std::runtime_error("schema: " + path + " unknown type '" + type + "'");
    }
}

inline void validate_report(const json& doc) {
    const json schema = json::parse(report_schema_text());
    const std::string kind = doc.value("kind", "");
    if (!schema.contains(kind)) throw std::runtime_error("validate_report: unknown report kind '" + kind + "'");
    schema_validate(doc, schema[kind], schema);
}

inline std::string config_hash_hex(const json& config) {
    const std::string canon = config.dump();
    return hex64(fnv1a(canon.data(), canon.size()));
}

inline json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    json j;
    f >> j;
    return j;
}

inline void write_json_file(const json& j, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << j.dump(2) << '\n';
    if (!f) throw std::runtime_error("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Cross-condition aggregation over per-run reports.
// ---------------------------------------------------------------------------

// Paired per-metric deltas of every condition against the C3 and C1 anchors,
// computed over the seeds both conditions share. Reports must come from the
// same experiment config. Missing cells are listed, never imputed.
inline json compare_conditions(const std::vector<json>& reports, std::string* text_table = nullptr) {
    if (reports.size() < 2) throw std::invalid_argument("compare_conditions: need at least 2 reports");
    const std::string hash = reports.front().value("config_hash", "");
    std::map<std::string, std::map<int64_t, json>> cells;  // condition -> seed -> metrics
    std::set<int64_t> seeds;
    for (const auto& r : reports) {
        if (r.value("config_hash", "") != hash)
            throw std::runtime_error("compare_conditions: config hash mismatch");
        if (r.value("kind", "") != "run")
            throw std::runtime_error("compare_conditions: expected run reports");
        cells[r["condition"].get<std::string>()][r["seed"].get<int64_t>()] = r["metrics"];
        seeds.insert(r["seed"].get<int64_t>());
    }

    json out;
    out["schema_version"] = kReportSchemaVersion;
    out["kind"] = "aggregate";
    out["config_hash"] = hash;
    json jcells = json::object();
    json missing = json::array();
    for (const auto& [cond, per_seed] : cells) {
        json row = json::object();
        for (int64_t seed : seeds) {
            if (auto it = per_seed.find(seed); it != per_seed.end())
                row[std::to_string(seed)] = it->second;
            else
                missing.push_back(cond + "/seed" + std::to_string(seed));
        }
        jcells[cond] = row;
    }
    out["cells"] = jcells;

    const std::vector<std::string> metrics = {"dense_acc", "smooth_acc"};
    json deltas = json::object();
    for (const std::string base : {"C3", "C1"}) {
        if (!cells.count(base)) continue;
        for (const auto& [cond, per_seed] : cells) {
            if (cond == base) continue;
            // paired over seeds present in both
            std::vector<int64_t> shared;
            for (const auto& [seed, _] : per_seed)
                if (cells[base].count(seed)) shared.push_back(seed);
            if (shared.empty()) continue;
            json entry = json::object();
            for (const auto& metric : metrics) {
                std::vector<double> a, b;
                for (int64_t seed : shared) {
                    a.push_back(per_seed.at(seed)[metric].get<double>());
                    b.push_back(cells[base].at(seed)[metric].get<double>());
                }
                const auto stat = paired_diff_stat(a, b);
                entry[metric] = {{"mean", stat.mean}, {"se", stat.se}, {"n", stat.n}};
            }
            deltas[cond + "-" + base] = entry;
        }
    }
    out["deltas"] = deltas;
    out["missing"] = missing;

    if (text_table) {
        std::ostringstream os;
        os << "condition";
        for (int64_t s : seeds) os << "\tdense@" << s << "\tsmooth@" << s;
        os << '\n';
        for (const auto& [cond, per_seed] : cells) {
            os << cond;
            for (int64_t s : seeds) {
                if (auto it = per_seed.find(s); it != per_seed.end())
                    os << '\t' << it->second["dense_acc"].get<double>() << '\t'
                       << it->second["smooth_acc"].get<double>();
                else
                    os << "\t-\t-";
            }
            os << '\n';
        }
        for (auto it = deltas.begin(); it != deltas.end(); ++it) {
            os << it.key() << ": ";
            for (const auto& metric : metrics) {
                const auto& d = it.value()[metric];
                os << metric << " " << d["mean"].get<double>() << " +- " << d["se"].get<double>() << "  ";
            }
            os << '\n';
        }
        *text_table = os.str();
    }
    return out;
}

}  // namespace heed
