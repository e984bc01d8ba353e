#pragma once

// Run configuration with built-in defaults, JSON loading and the run
// manifest written next to every command's outputs.

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "metaper/error.hpp"
#include "metaper/io.hpp"
#include "metaper/mining.hpp"
#include "metaper/personalization.hpp"

namespace metaper {

inline constexpr std::string_view kVersion = "0.1.0";

struct RunConfig {
  TrainingConfig training{};
  MiningConfig mining{};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t recall_k = 5;
  unsigned threads = 1;

  json to_json() const {
    json j = training;
    j["theta_vis"] = mining.theta_vis;
    j["theta_exp"] = mining.theta_exp;
    j["seeds"] = seeds;
    j["recall_k"] = recall_k;
    j["threads"] = threads;
    return j;
  }

  /// Overlays the keys present in j; unknown keys are schema errors.
  void merge(const json& j) {
    if (!j.is_object()) throw Error(ErrorCode::kSchema, "config must be a JSON object");
    const json known = to_json();
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw Error(ErrorCode::kSchema, "unknown config key '" + key + "'");
    }
    try {
      from_json(j, training);
      if (j.contains("theta_vis")) mining.theta_vis = j.at("theta_vis").get<double>();
      if (j.contains("theta_exp")) mining.theta_exp = j.at("theta_exp").get<double>();
      if (j.contains("seeds")) seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      if (j.contains("recall_k")) recall_k = j.at("recall_k").get<std::size_t>();
      if (j.contains("threads")) threads = j.at("threads").get<unsigned>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kSchema, std::string("config: ") + e.what());
    }
    validate();
  }

  void validate() const {
    if (training.n_w == 0 || training.q == 0) throw Error(ErrorCode::kInvalidArgument, "q and n_w must be >= 1");
    if (!(training.lambda > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambda must be > 0");
    if (seeds.empty()) throw Error(ErrorCode::kInvalidArgument, "at least one seed is required");
    if (recall_k == 0) throw Error(ErrorCode::kInvalidArgument, "recall_k must be >= 1");
    if (training.templates.empty()) throw Error(ErrorCode::kInvalidTemplate, "no templates configured");
    if (training.categories.empty()) throw Error(ErrorCode::kEmptyCategoryList, "no categories configured");
  }

  /// Hash of the effective configuration, excluding the thread count, which
  /// does not affect outputs.
  std::string hash() const {
    json j = to_json();
    j.erase("threads");
    return hex64(fnv1a64(j.dump()));
  }
};

inline RunConfig load_config(const std::filesystem::path& path) {
  RunConfig cfg;
  try {
    cfg.merge(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kSchema, path.string() + ": " + e.what());
  }
  return cfg;
}

/// One-line descriptions of every configuration key, used by --help.
inline std::vector<std::pair<std::string, std::string>> config_key_help() {
  return {
      {"lambda", "similarity temperature"},
      {"lambda_c", "weight of the category anchoring loss"},
      {"q", "number of category features per category"},
      {"n_w", "instance tokens per instance"},
      {"init_std", "std of the N(0, s^2) initialization of z and C"},
      {"theta_vis", "visual relevance threshold for mining (strict >)"},
      {"theta_exp", "shot expansion threshold for mining (strict >)"},
      {"rounds", "meta-personalization rounds"},
      {"instances_per_category", "instances sampled per category per round"},
      {"meta_epochs", "epochs per meta-personalization round"},
      {"meta_batch", "meta-personalization batch size"},
      {"test_epochs", "test-time personalization epochs"},
      {"test_batch", "test-time personalization batch size"},
      {"distractors", "distractor shots per test-time iteration"},
      {"extra_per_category", "meta instances per category mixed into test-time training"},
      {"k_shots", "training shots sampled per personal instance (0 = all)"},
      {"lr_max", "peak learning rate of the cosine schedule"},
      {"weight_decay", "decoupled weight decay"},
      {"adam_beta1", "Adam beta1"},
      {"adam_beta2", "Adam beta2"},
      {"adam_epsilon", "Adam epsilon"},
      {"ablation", "none | a (no meta) | b (shared C) | c (no L_l) | d (no L_c) | e (no distractors) | f (random C)"},
      {"vl_exclude_self", "drop the i=j pairs from the vision-language loss"},
      {"templates", "prompt templates, each with one '*'"},
      {"categories", "category list for zero-shot assignment"},
      {"seeds", "seed list for training and evaluation"},
      {"recall_k", "K of recall@K"},
      {"threads", "worker threads for mining and scoring"},
  };
}

struct RunManifest {
  std::string command;
  json config = json::object();
  std::string config_hash;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  double wall_time_s = 0.0;

  void add_input(const std::filesystem::path& p) { inputs[p.string()] = file_hash(p); }
  void add_output(const std::filesystem::path& p) { outputs[p.string()] = file_hash(p); }

  json to_json() const {
    return json{{"command", command},
                {"config", config},
                {"config_hash", config_hash},
                {"inputs", inputs},
                {"outputs", outputs},
                {"wall_time_s", wall_time_s},
                {"versions",
                 {{"metaper", kVersion},
                  {"token_table_format", kTokenTableVersion},
                  {"store_format", kStoreVersion},
                  {"model_format", kModelVersion}}}};
  }
};

}  // namespace metaper
