// Command-line front end. Everything below talks to the library exclusively
// through the C API in convrec.h.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "convrec.h"

namespace {

namespace fs = std::filesystem;

struct ConfigError {
  std::string message;
};

using KeyValues = std::map<std::string, std::string>;

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

KeyValues parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError{"cannot open config file: " + path};
  KeyValues kv;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError{path + ":" + std::to_string(line_no) + ": expected key=value"};
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void apply_overrides(KeyValues& kv, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError{"--set expects key=value, got '" + s + "'"};
    kv[trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
  }
}

void reject_unknown_keys(const KeyValues& kv, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : kv) {
    if (!allowed.count(key)) throw ConfigError{"unknown config key '" + key + "'"};
  }
}

std::string get_or(const KeyValues& kv, const std::string& key, const std::string& fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

double get_double(const KeyValues& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError{"config key '" + key + "': not a number"};
  }
}

std::int64_t get_int(const KeyValues& kv, const std::string& key, std::int64_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stoll(it->second);
  } catch (const std::exception&) {
    throw ConfigError{"config key '" + key + "': not an integer"};
  }
}

std::vector<double> parse_scale(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!trim(item).empty()) values.push_back(std::stod(trim(item)));
  }
  return values;
}

// Resolved-config echo: every run writes the exact keys it executed with.
void write_config_echo(const fs::path& path, const std::string& command, const KeyValues& kv) {
  std::ofstream out(path, std::ios::binary);
  out << "command=" << command << "\n";
  for (const auto& [key, value] : kv) out << key << "=" << value << "\n";
}

int fail(cvr_status status, const std::string& context) {
  std::fprintf(stderr, "error: %s: %s\n", context.c_str(), cvr_last_error());
  return static_cast<int>(status);
}

struct DatasetGuard {
  cvr_dataset* ptr = nullptr;
  ~DatasetGuard() { cvr_dataset_free(ptr); }
};

struct ModelGuard {
  cvr_model* ptr = nullptr;
  ~ModelGuard() { cvr_model_free(ptr); }
};

// Keys forwarded verbatim to the training engine.
const std::set<std::string> kEngineKeys = {
    "learning_rate", "batch_size", "epoch_block", "max_blocks", "stop_metric",
    "seed",          "depth",      "bottleneck",  "conv_width", "encoder_conv_width",
    "weight_decay",  "with_bias"};

std::string engine_config_text(const KeyValues& kv) {
  std::string text;
  for (const auto& [key, value] : kv) {
    if (kEngineKeys.count(key)) text += key + "=" + value + "\n";
  }
  return text;
}

int load_parts(const KeyValues& kv, DatasetGuard& train, DatasetGuard& validation,
               DatasetGuard& test, fs::path* manifest_written, const fs::path& out_dir) {
  if (kv.count("split_manifest")) {
    const std::string manifest = kv.at("split_manifest");
    if (cvr_status s = cvr_split_load(manifest.c_str(), &train.ptr, &validation.ptr, &test.ptr);
        s != CVR_OK) {
      return fail(s, "loading split manifest " + manifest);
    }
    return 0;
  }
  if (!kv.count("data")) throw ConfigError{"config needs either data= or split_manifest="};
  const std::string data_path = kv.at("data");
  DatasetGuard full;
  std::vector<double> scale;
  if (kv.count("scale")) scale = parse_scale(kv.at("scale"));
  if (cvr_status s = cvr_dataset_load(data_path.c_str(), scale.empty() ? nullptr : scale.data(),
                                      static_cast<int32_t>(scale.size()), &full.ptr);
      s != CVR_OK) {
    return fail(s, "loading ratings from " + data_path);
  }
  const double tf = get_double(kv, "train_fraction", 0.9);
  const double vf = get_double(kv, "validation_fraction", 0.05);
  const double sf = get_double(kv, "test_fraction", 0.05);
  const auto split_seed = static_cast<uint64_t>(get_int(kv, "split_seed", 0));
  if (cvr_status s = cvr_dataset_split(full.ptr, tf, vf, sf, split_seed, &train.ptr,
                                       &validation.ptr, &test.ptr);
      s != CVR_OK) {
    return fail(s, "splitting dataset");
  }
  if (manifest_written != nullptr) {
    *manifest_written = out_dir / "split.tsv";
    if (cvr_status s = cvr_split_save(train.ptr, validation.ptr, test.ptr,
                                      manifest_written->string().c_str());
        s != CVR_OK) {
      return fail(s, "saving split manifest");
    }
  }
  return 0;
}

int cmd_train(const KeyValues& kv) {
  static const std::set<std::string> allowed = [] {
    std::set<std::string> keys = kEngineKeys;
    for (const char* k : {"data", "scale", "split_manifest", "train_fraction",
                          "validation_fraction", "test_fraction", "split_seed", "out", "threads"}) {
      keys.insert(k);
    }
    return keys;
  }();
  reject_unknown_keys(kv, allowed);

  const fs::path out_dir(get_or(kv, "out", "run"));
  fs::create_directories(out_dir);
  write_config_echo(out_dir / "config-echo.tsv", "train", kv);

  DatasetGuard train, validation, test;
  fs::path manifest;
  if (int rc = load_parts(kv, train, validation, test, &manifest, out_dir); rc != 0) return rc;

  int64_t users = 0, items = 0, count = 0;
  int32_t ratings = 0;
  cvr_dataset_dims(train.ptr, &users, &items, &count, &ratings);
  std::printf("train: %lld users, %lld items, %lld observations, %d rating levels\n",
              static_cast<long long>(users), static_cast<long long>(items),
              static_cast<long long>(count), ratings);

  ModelGuard model;
  const std::string engine = engine_config_text(kv);
  if (cvr_status s = cvr_train(train.ptr, validation.ptr, engine.c_str(),
                               out_dir.string().c_str(), &model.ptr);
      s != CVR_OK) {
    return fail(s, "training");
  }
  int32_t checkpoints = 0;
  cvr_model_checkpoint_count(model.ptr, &checkpoints);
  std::printf("done: %d checkpoints under %s\n", checkpoints,
              (out_dir / "checkpoints").string().c_str());
  return 0;
}

int cmd_evaluate(const KeyValues& kv) {
  static const std::set<std::string> allowed = {"run",  "split_manifest", "recall_ks",
                                                "lambda_density", "threads", "out"};
  reject_unknown_keys(kv, allowed);
  if (!kv.count("run")) throw ConfigError{"evaluate needs run= (training output directory)"};
  const fs::path run_dir(kv.at("run"));
  const fs::path out_dir(get_or(kv, "out", run_dir.string()));
  fs::create_directories(out_dir / "reports");
  write_config_echo(out_dir / "reports" / "evaluate-config-echo.tsv", "evaluate", kv);

  const std::string manifest = get_or(kv, "split_manifest", (run_dir / "split.tsv").string());
  DatasetGuard train, validation, test;
  if (cvr_status s = cvr_split_load(manifest.c_str(), &train.ptr, &validation.ptr, &test.ptr);
      s != CVR_OK) {
    return fail(s, "loading split manifest " + manifest);
  }

  ModelGuard model;
  if (cvr_status s = cvr_model_load(run_dir.string().c_str(), &model.ptr); s != CVR_OK) {
    return fail(s, "loading checkpoints from " + run_dir.string());
  }

  std::vector<int32_t> ks;
  for (double v : parse_scale(get_or(kv, "recall_ks", "50,100"))) {
    ks.push_back(static_cast<int32_t>(v));
  }
  std::vector<double> recalls(ks.size(), 0.0);
  double rmse_value = 0.0;
  const fs::path report = out_dir / "reports" / "metrics.tsv";
  if (cvr_status s = cvr_evaluate(model.ptr, train.ptr, test.ptr, ks.data(),
                                  static_cast<int32_t>(ks.size()),
                                  static_cast<int32_t>(get_int(kv, "threads", 1)),
                                  report.string().c_str(), &rmse_value, recalls.data());
      s != CVR_OK) {
    return fail(s, "evaluating");
  }
  std::printf("rmse\t%.6f\n", rmse_value);
  for (std::size_t i = 0; i < ks.size(); ++i) {
    std::printf("recall@%d\t%.6f\n", ks[i], recalls[i]);
  }
  if (get_int(kv, "lambda_density", 0) != 0) {
    const fs::path density = out_dir / "reports" / "lambda_density.tsv";
    if (cvr_status s = cvr_lambda_density(model.ptr, train.ptr, validation.ptr,
                                          density.string().c_str());
        s != CVR_OK) {
      return fail(s, "lambda density");
    }
    std::printf("lambda density written to %s\n", density.string().c_str());
  }
  std::printf("report written to %s\n", report.string().c_str());
  return 0;
}

int cmd_predict(const KeyValues& kv) {
  static const std::set<std::string> allowed = {"run", "split_manifest", "user", "item", "out",
                                                "threads"};
  reject_unknown_keys(kv, allowed);
  if (!kv.count("run") || !kv.count("user") || !kv.count("item")) {
    throw ConfigError{"predict needs run=, user= and item="};
  }
  const fs::path run_dir(kv.at("run"));
  const std::string manifest = get_or(kv, "split_manifest", (run_dir / "split.tsv").string());
  DatasetGuard train, validation, test;
  if (cvr_status s = cvr_split_load(manifest.c_str(), &train.ptr, &validation.ptr, &test.ptr);
      s != CVR_OK) {
    return fail(s, "loading split manifest " + manifest);
  }
  ModelGuard model;
  if (cvr_status s = cvr_model_load(run_dir.string().c_str(), &model.ptr); s != CVR_OK) {
    return fail(s, "loading checkpoints from " + run_dir.string());
  }
  int32_t ratings = 0;
  cvr_dataset_dims(train.ptr, nullptr, nullptr, nullptr, &ratings);
  std::vector<double> probabilities(static_cast<std::size_t>(ratings) + 1);
  std::vector<double> conditional(static_cast<std::size_t>(ratings));
  double rating = 0, interaction = 0, quantile = 0;
  int32_t serendipity = 0;
  if (cvr_status s = cvr_predict(model.ptr, train.ptr, kv.at("user").c_str(),
                                 kv.at("item").c_str(), probabilities.data(), conditional.data(),
                                 &rating, &interaction, &quantile, &serendipity);
      s != CVR_OK) {
    return fail(s, "predicting");
  }
  std::printf("user\t%s\nitem\t%s\n", kv.at("user").c_str(), kv.at("item").c_str());
  for (std::size_t c = 0; c < probabilities.size(); ++c) {
    std::printf("probability_channel_%zu\t%.9f\n", c, probabilities[c]);
  }
  for (std::size_t c = 0; c < conditional.size(); ++c) {
    std::printf("conditional_rating_%zu\t%.9f\n", c + 1, conditional[c]);
  }
  std::printf("predicted_rating\t%.9f\n", rating);
  std::printf("interaction_probability\t%.9f\n", interaction);
  std::printf("interaction_quantile\t%.9f\n", quantile);
  std::printf("serendipity_flag\t%d\n", serendipity);
  return 0;
}

int cmd_bounds(const KeyValues& kv) {
  static const std::set<std::string> allowed = {"run", "split_manifest", "delta", "sample_count",
                                                "out", "threads"};
  reject_unknown_keys(kv, allowed);
  if (!kv.count("run")) throw ConfigError{"bounds needs run="};
  const fs::path run_dir(kv.at("run"));
  const fs::path out_dir(get_or(kv, "out", run_dir.string()));
  fs::create_directories(out_dir / "reports");
  const std::string manifest = get_or(kv, "split_manifest", (run_dir / "split.tsv").string());
  DatasetGuard train, validation, test;
  if (cvr_status s = cvr_split_load(manifest.c_str(), &train.ptr, &validation.ptr, &test.ptr);
      s != CVR_OK) {
    return fail(s, "loading split manifest " + manifest);
  }
  ModelGuard model;
  if (cvr_status s = cvr_model_load(run_dir.string().c_str(), &model.ptr); s != CVR_OK) {
    return fail(s, "loading checkpoints from " + run_dir.string());
  }
  const fs::path report = out_dir / "reports" / "bounds.tsv";
  if (cvr_status s = cvr_bounds(model.ptr, train.ptr, get_int(kv, "sample_count", 0),
                                get_double(kv, "delta", 0.05), report.string().c_str());
      s != CVR_OK) {
    return fail(s, "evaluating bounds");
  }
  std::printf("bound report written to %s\n", report.string().c_str());
  return 0;
}

int cmd_synth_tv(const KeyValues& kv) {
  static const std::set<std::string> allowed = {
      "m",         "n",           "rank",        "k",          "noiseless",
      "weight_scale", "sample_counts", "seeds",   "learning_rate", "batch_size",
      "epoch_block",  "max_blocks",    "depth",   "bottleneck",    "conv_width",
      "encoder_conv_width", "with_bias", "weight_decay", "count_weighted", "out", "threads"};
  reject_unknown_keys(kv, allowed);
  const fs::path out_dir(get_or(kv, "out", "run"));
  fs::create_directories(out_dir);
  write_config_echo(out_dir / "synth-tv-config-echo.tsv", "synth-tv", kv);
  std::string engine;
  for (const auto& [key, value] : kv) {
    if (key != "out" && key != "threads") engine += key + "=" + value + "\n";
  }
  const fs::path table = out_dir / "tv_table.tsv";
  if (cvr_status s = cvr_synth_tv(engine.c_str(), table.string().c_str()); s != CVR_OK) {
    return fail(s, "tv recovery experiment");
  }
  std::printf("tv table written to %s\n", table.string().c_str());
  return 0;
}

int cmd_gradcheck(const KeyValues& kv) {
  static const std::set<std::string> allowed = {"users", "items",      "ratings", "bottleneck",
                                                "depth", "conv_width", "seed",    "tolerance",
                                                "out",   "threads"};
  reject_unknown_keys(kv, allowed);
  double max_rel = 0.0;
  if (cvr_status s = cvr_gradcheck(
          get_int(kv, "users", 8), get_int(kv, "items", 12),
          static_cast<int32_t>(get_int(kv, "ratings", 5)),
          static_cast<int32_t>(get_int(kv, "bottleneck", 4)),
          static_cast<int32_t>(get_int(kv, "depth", 3)),
          static_cast<int32_t>(get_int(kv, "conv_width", 6)),
          static_cast<uint64_t>(get_int(kv, "seed", 42)), &max_rel);
      s != CVR_OK) {
    return fail(s, "gradient check");
  }
  const double tolerance = get_double(kv, "tolerance", 1e-4);
  std::printf("gradcheck max relative error\t%.3e\ttolerance\t%.3e\t%s\n", max_rel, tolerance,
              max_rel <= tolerance ? "PASS" : "FAIL");
  return max_rel <= tolerance ? 0 : static_cast<int>(CVR_ERR_NUMERIC);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convrec: convolutional autoencoder recommender"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  std::int64_t threads = -1;
  std::string out;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value config file");
    cmd->add_option("--set", sets, "override a config key (key=value, repeatable)");
    cmd->add_option("--seed", seed, "override the seed key");
    cmd->add_option("--threads", threads, "worker cap for evaluation");
    cmd->add_option("--out", out, "output directory");
  };

  CLI::App* train = app.add_subcommand("train", "fit a model, write checkpoints and history");
  CLI::App* evaluate = app.add_subcommand("evaluate", "explicit and implicit metrics");
  CLI::App* predict = app.add_subcommand("predict", "distributional record for one pair");
  CLI::App* bounds = app.add_subcommand("bounds", "measured generalization-bound report");
  CLI::App* synth_tv = app.add_subcommand("synth-tv", "distribution-recovery experiment");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  for (CLI::App* cmd : {train, evaluate, predict, bounds, synth_tv, gradcheck}) add_common(cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    KeyValues kv;
    if (!config_path.empty()) kv = parse_config_file(config_path);
    apply_overrides(kv, sets);
    if (seed >= 0) kv["seed"] = std::to_string(seed);
    if (threads >= 0) kv["threads"] = std::to_string(threads);
    if (!out.empty()) kv["out"] = out;

    if (train->parsed()) return cmd_train(kv);
    if (evaluate->parsed()) return cmd_evaluate(kv);
    if (predict->parsed()) return cmd_predict(kv);
    if (bounds->parsed()) return cmd_bounds(kv);
    if (synth_tv->parsed()) return cmd_synth_tv(kv);
    if (gradcheck->parsed()) return cmd_gradcheck(kv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.message.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
