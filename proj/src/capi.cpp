#include "convrec.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "convrec/dataset.hpp"
#include "convrec/errors.hpp"
#include "convrec/evaluation.hpp"
#include "convrec/model.hpp"
#include "convrec/theory.hpp"
#include "convrec/training.hpp"

struct cvr_dataset {
  convrec::ObservedDataset data;
};

struct cvr_model {
  convrec::TrainState state;
};

namespace {

thread_local std::string g_last_error;

cvr_status to_status(const std::exception& e) {
  g_last_error = e.what();
  if (dynamic_cast<const convrec::numeric_error*>(&e)) return CVR_ERR_NUMERIC;
  if (dynamic_cast<const convrec::data_error*>(&e)) return CVR_ERR_DATA;
  if (dynamic_cast<const convrec::usage_error*>(&e)) return CVR_ERR_USAGE;
  return CVR_ERR_DATA;
}

template <class Fn>
cvr_status guarded(Fn&& fn) {
  try {
    fn();
    return CVR_OK;
  } catch (const std::exception& e) {
    return to_status(e);
  } catch (...) {
    g_last_error = "unknown error";
    return CVR_ERR_DATA;
  }
}

void require(bool cond, const std::string& message) {
  if (!cond) throw convrec::usage_error(message);
}

std::map<std::string, std::string> parse_config(const char* text,
                                                const std::vector<std::string>& allowed) {
  std::map<std::string, std::string> kv;
  if (text == nullptr) return kv;
  const std::string all(text);
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= all.size()) {
    std::size_t end = all.find('\n', pos);
    if (end == std::string::npos) end = all.size();
    std::string line = all.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t h = line.find('#');
    if (h != std::string::npos) line = line.substr(0, h);
    const std::size_t a = line.find_first_not_of(" \t");
    if (a == std::string::npos) {
      if (pos > all.size()) break;
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw convrec::usage_error("config line " + std::to_string(line_no) +
                                 ": expected key=value");
    }
    auto trim = [](std::string s) {
      const std::size_t b = s.find_first_not_of(" \t");
      if (b == std::string::npos) return std::string();
      const std::size_t e = s.find_last_not_of(" \t");
      return s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw convrec::usage_error("config line " + std::to_string(line_no) + ": empty key");
    }
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw convrec::usage_error("unknown config key '" + key + "'");
    }
    kv[key] = value;
    if (pos > all.size()) break;
  }
  return kv;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw convrec::usage_error("config key '" + key + "': not a number: '" + v + "'");
  }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw convrec::usage_error("config key '" + key + "': not an integer: '" + v + "'");
  }
}

std::vector<std::int64_t> to_int_list(const std::string& key, const std::string& v) {
  std::vector<std::int64_t> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    std::size_t comma = v.find(',', pos);
    if (comma == std::string::npos) comma = v.size();
    const std::string item = v.substr(pos, comma - pos);
    if (!item.empty()) out.push_back(to_int(key, item));
    pos = comma + 1;
    if (comma == v.size()) break;
  }
  if (out.empty()) throw convrec::usage_error("config key '" + key + "': empty list");
  return out;
}

convrec::TrainConfig train_config_from(const std::map<std::string, std::string>& kv) {
  convrec::TrainConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key == "learning_rate") cfg.learning_rate = to_double(key, value);
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(to_int(key, value));
    else if (key == "epoch_block") cfg.epoch_block = static_cast<int>(to_int(key, value));
    else if (key == "max_blocks") cfg.max_blocks = static_cast<int>(to_int(key, value));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_int(key, value));
    else if (key == "depth") cfg.depth = static_cast<int>(to_int(key, value));
    else if (key == "bottleneck") cfg.bottleneck = static_cast<int>(to_int(key, value));
    else if (key == "conv_width") cfg.conv_width = static_cast<int>(to_int(key, value));
    else if (key == "encoder_conv_width") cfg.encoder_conv_width = static_cast<int>(to_int(key, value));
    else if (key == "weight_decay") cfg.weight_decay = to_double(key, value);
    else if (key == "with_bias") cfg.with_bias = to_int(key, value) != 0;
    else if (key == "stop_metric") {
      if (value == "validation_loss") cfg.stop_metric = convrec::StopMetric::validation_loss;
      else if (value == "rmse") cfg.stop_metric = convrec::StopMetric::rmse;
      else if (value == "recall50") cfg.stop_metric = convrec::StopMetric::recall50;
      else throw convrec::usage_error("stop_metric must be validation_loss, rmse or recall50");
    }
  }
  return cfg;
}

const std::vector<std::string> kTrainKeys = {
    "learning_rate", "batch_size", "epoch_block", "max_blocks", "stop_metric",
    "seed",          "depth",      "bottleneck",  "conv_width", "encoder_conv_width",
    "weight_decay",  "with_bias"};

}  // namespace

extern "C" {

const char* cvr_last_error(void) { return g_last_error.c_str(); }

cvr_status cvr_dataset_load(const char* path, const double* scale, int32_t scale_len,
                            cvr_dataset** out) {
  return guarded([&] {
    require(path != nullptr && out != nullptr, "cvr_dataset_load: null argument");
    convrec::RatingScale rs;
    if (scale != nullptr && scale_len > 0) {
      rs.values.assign(scale, scale + scale_len);
    }
    auto handle = std::make_unique<cvr_dataset>();
    handle->data = convrec::load_ratings(path, rs);
    *out = handle.release();
  });
}

cvr_status cvr_dataset_dims(const cvr_dataset* data, int64_t* users, int64_t* items,
                            int64_t* observations, int32_t* ratings) {
  return guarded([&] {
    require(data != nullptr, "cvr_dataset_dims: null dataset");
    if (users) *users = data->data.m;
    if (items) *items = data->data.n;
    if (observations) *observations = data->data.size();
    if (ratings) *ratings = data->data.scale.rating_count();
  });
}

cvr_status cvr_dataset_split(const cvr_dataset* data, double train_fraction,
                             double validation_fraction, double test_fraction, uint64_t seed,
                             cvr_dataset** train, cvr_dataset** validation, cvr_dataset** test) {
  return guarded([&] {
    require(data && train && validation && test, "cvr_dataset_split: null argument");
    convrec::SplitSpec spec{train_fraction, validation_fraction, test_fraction, seed};
    convrec::SplitResult parts = convrec::split(data->data, spec);
    auto t = std::make_unique<cvr_dataset>();
    auto v = std::make_unique<cvr_dataset>();
    auto s = std::make_unique<cvr_dataset>();
    t->data = std::move(parts.train);
    v->data = std::move(parts.validation);
    s->data = std::move(parts.test);
    *train = t.release();
    *validation = v.release();
    *test = s.release();
  });
}

cvr_status cvr_split_save(const cvr_dataset* train, const cvr_dataset* validation,
                          const cvr_dataset* test, const char* path) {
  return guarded([&] {
    require(train && validation && test && path, "cvr_split_save: null argument");
    convrec::SplitResult parts;
    parts.train = train->data;
    parts.validation = validation->data;
    parts.test = test->data;
    convrec::save_split_manifest(path, parts);
  });
}

cvr_status cvr_split_load(const char* path, cvr_dataset** train, cvr_dataset** validation,
                          cvr_dataset** test) {
  return guarded([&] {
    require(path && train && validation && test, "cvr_split_load: null argument");
    convrec::SplitResult parts = convrec::load_split_manifest(path);
    auto t = std::make_unique<cvr_dataset>();
    auto v = std::make_unique<cvr_dataset>();
    auto s = std::make_unique<cvr_dataset>();
    t->data = std::move(parts.train);
    v->data = std::move(parts.validation);
    s->data = std::move(parts.test);
    *train = t.release();
    *validation = v.release();
    *test = s.release();
  });
}

cvr_status cvr_dataset_save(const cvr_dataset* data, const char* path, const char* part_tag) {
  return guarded([&] {
    require(data && path, "cvr_dataset_save: null argument");
    convrec::save_dataset_manifest(path, data->data, part_tag ? part_tag : "train");
  });
}

void cvr_dataset_free(cvr_dataset* data) { delete data; }

cvr_status cvr_train(const cvr_dataset* train, const cvr_dataset* validation, const char* config,
                     const char* out_dir, cvr_model** out) {
  return guarded([&] {
    require(train != nullptr && out != nullptr, "cvr_train: null argument");
    const auto kv = parse_config(config, kTrainKeys);
    const convrec::TrainConfig cfg = train_config_from(kv);

    convrec::ObservedDataset empty_validation;
    if (validation == nullptr) {
      empty_validation.m = train->data.m;
      empty_validation.n = train->data.n;
      empty_validation.scale = train->data.scale;
      empty_validation.user_ids = train->data.user_ids;
      empty_validation.item_ids = train->data.item_ids;
      empty_validation.finalize();
    }

    auto model = std::make_unique<cvr_model>();
    model->state = convrec::train(cfg, train->data,
                                  validation ? validation->data : empty_validation);

    if (out_dir != nullptr) {
      namespace fs = std::filesystem;
      const fs::path root(out_dir);
      fs::create_directories(root / "checkpoints");
      convrec::write_history((root / "history.tsv").string(), model->state);
      char name[32];
      for (std::size_t c = 0; c < model->state.checkpoints.size(); ++c) {
        std::snprintf(name, sizeof(name), "block-%03zu.ckpt", c + 1);
        convrec::save_checkpoint(model->state.checkpoints[c],
                                 (root / "checkpoints" / name).string());
      }
    }
    *out = model.release();
  });
}

cvr_status cvr_model_load(const char* run_dir, cvr_model** out) {
  return guarded([&] {
    require(run_dir != nullptr && out != nullptr, "cvr_model_load: null argument");
    namespace fs = std::filesystem;
    const fs::path ckpt_dir = fs::path(run_dir) / "checkpoints";
    if (!fs::exists(ckpt_dir)) {
      throw convrec::data_error("no checkpoints directory under " + std::string(run_dir));
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(ckpt_dir)) {
      if (entry.path().extension() == ".ckpt") files.push_back(entry.path());
    }
    if (files.empty()) {
      throw convrec::data_error("no .ckpt files under " + ckpt_dir.string());
    }
    std::sort(files.begin(), files.end());
    auto model = std::make_unique<cvr_model>();
    for (const auto& f : files) {
      model->state.checkpoints.push_back(convrec::load_checkpoint(f.string()));
    }
    model->state.params = model->state.checkpoints.back();
    *out = model.release();
  });
}

cvr_status cvr_model_checkpoint_count(const cvr_model* model, int32_t* count) {
  return guarded([&] {
    require(model != nullptr && count != nullptr, "cvr_model_checkpoint_count: null argument");
    *count = static_cast<int32_t>(model->state.checkpoints.size());
  });
}

void cvr_model_free(cvr_model* model) { delete model; }

cvr_status cvr_predict(const cvr_model* model, const cvr_dataset* train, const char* user_id,
                       const char* item_id, double* probabilities, double* conditional,
                       double* predicted_rating, double* interaction_probability,
                       double* interaction_quantile, int32_t* serendipity_flag) {
  return guarded([&] {
    require(model && train && user_id && item_id, "cvr_predict: null argument");
    const convrec::ObservedDataset& ds = train->data;
    const std::int32_t user = ds.user_index_of(user_id);
    if (user == 0) throw convrec::data_error("unknown user id '" + std::string(user_id) + "'");
    const std::int32_t item = ds.item_index_of(item_id);
    if (item == 0) throw convrec::data_error("unknown item id '" + std::string(item_id) + "'");

    const convrec::UserSlice slice = ds.user_slice(user);
    convrec::ForwardOutput out = convrec::averaged_predict(model->state, slice);
    const int k = model->state.checkpoints.front().rating_count();
    const std::size_t j = static_cast<std::size_t>(item - 1);

    if (probabilities) {
      for (int c = 0; c <= k; ++c) probabilities[c] = out.probabilities(j, static_cast<std::size_t>(c));
    }
    if (conditional) {
      for (int c = 0; c < k; ++c) conditional[c] = out.conditional(j, static_cast<std::size_t>(c));
    }
    if (predicted_rating) *predicted_rating = out.predicted_rating[j];
    if (interaction_probability) *interaction_probability = out.interaction_probability[j];

    if (interaction_quantile) {
      std::int64_t not_above = 0;
      for (std::int64_t jj = 0; jj < ds.n; ++jj) {
        if (out.interaction_probability[static_cast<std::size_t>(jj)] <=
            out.interaction_probability[j]) {
          ++not_above;
        }
      }
      *interaction_quantile = static_cast<double>(not_above) / static_cast<double>(ds.n);
    }
    if (serendipity_flag) {
      std::vector<double> probs, ratings;
      for (std::int64_t jj = 0; jj < ds.n; ++jj) {
        if (slice.rating_index_of(static_cast<std::int32_t>(jj + 1)) != 0) continue;
        probs.push_back(out.interaction_probability[static_cast<std::size_t>(jj)]);
        ratings.push_back(out.predicted_rating[static_cast<std::size_t>(jj)]);
      }
      auto median = [](std::vector<double> v) {
        if (v.empty()) return 0.0;
        std::sort(v.begin(), v.end());
        const std::size_t mid = v.size() / 2;
        return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
      };
      const double med_prob = median(probs);
      const double med_rating = median(ratings);
      *serendipity_flag = (out.interaction_probability[j] < med_prob &&
                           out.predicted_rating[j] > med_rating)
                              ? 1
                              : 0;
    }
  });
}

cvr_status cvr_evaluate(const cvr_model* model, const cvr_dataset* train, const cvr_dataset* test,
                        const int32_t* recall_ks, int32_t recall_k_count, int32_t threads,
                        const char* report_path, double* rmse_out, double* recalls_out) {
  return guarded([&] {
    require(model && train && test, "cvr_evaluate: null argument");
    std::vector<int> ks;
    for (int32_t i = 0; i < recall_k_count; ++i) ks.push_back(recall_ks[i]);
    const convrec::MetricReport report =
        convrec::evaluate(model->state, train->data, test->data, ks, threads);
    if (rmse_out) *rmse_out = report.rmse;
    if (recalls_out) {
      for (int32_t i = 0; i < recall_k_count; ++i) {
        recalls_out[i] = report.recall_at.at(recall_ks[i]);
      }
    }
    if (report_path) convrec::write_metric_report(report_path, report);
  });
}

cvr_status cvr_lambda_density(const cvr_model* model, const cvr_dataset* train,
                              const cvr_dataset* validation, const char* out_path) {
  return guarded([&] {
    require(model && train && validation && out_path, "cvr_lambda_density: null argument");
    const auto choices =
        convrec::tune_lambda_per_user(model->state, train->data, validation->data);
    convrec::write_lambda_density(out_path, convrec::lambda_density(choices));
  });
}

cvr_status cvr_bounds(const cvr_model* model, const cvr_dataset* train, int64_t sample_count,
                      double delta, const char* report_path) {
  return guarded([&] {
    require(model && train && report_path, "cvr_bounds: null argument");
    require(delta > 0.0 && delta < 1.0, "cvr_bounds: delta must lie in (0,1)");
    const std::int64_t n = sample_count > 0 ? sample_count : train->data.size();
    const convrec::BoundInputs in =
        convrec::measure_bound_inputs(model->state.params, train->data, n, delta);
    convrec::write_bound_report(report_path, in);
  });
}

cvr_status cvr_gradcheck(int64_t users, int64_t items, int32_t ratings, int32_t bottleneck,
                         int32_t depth, int32_t conv_width, uint64_t seed,
                         double* max_relative_error) {
  return guarded([&] {
    require(max_relative_error != nullptr, "cvr_gradcheck: null output");
    const convrec::GradCheckResult res = convrec::gradcheck_random_model(
        users, items, ratings, bottleneck, depth, conv_width, seed);
    *max_relative_error = res.max_relative_error;
  });
}

cvr_status cvr_synth_tv(const char* config, const char* out_path) {
  return guarded([&] {
    require(out_path != nullptr, "cvr_synth_tv: null output path");
    const std::vector<std::string> keys = {
        "m",     "n",          "rank",       "k",
        "noiseless", "weight_scale", "sample_counts", "seeds",
        "learning_rate", "batch_size", "epoch_block", "max_blocks",
        "depth", "bottleneck", "conv_width", "encoder_conv_width",
        "with_bias", "weight_decay", "count_weighted"};
    const auto kv = parse_config(config, keys);
    convrec::TvExperimentConfig cfg;
    for (const auto& [key, value] : kv) {
      if (key == "m") cfg.m = to_int(key, value);
      else if (key == "n") cfg.n = to_int(key, value);
      else if (key == "rank") cfg.rank = static_cast<int>(to_int(key, value));
      else if (key == "k") cfg.k = static_cast<int>(to_int(key, value));
      else if (key == "noiseless") cfg.noiseless = to_int(key, value) != 0;
      else if (key == "count_weighted") cfg.count_weighted = to_int(key, value) != 0;
      else if (key == "weight_scale") cfg.weight_scale = to_double(key, value);
      else if (key == "sample_counts") cfg.sample_counts = to_int_list(key, value);
      else if (key == "seeds") {
        cfg.seeds.clear();
        for (std::int64_t s : to_int_list(key, value)) {
          cfg.seeds.push_back(static_cast<std::uint64_t>(s));
        }
      } else if (key == "learning_rate") cfg.train.learning_rate = to_double(key, value);
      else if (key == "batch_size") cfg.train.batch_size = static_cast<int>(to_int(key, value));
      else if (key == "epoch_block") cfg.train.epoch_block = static_cast<int>(to_int(key, value));
      else if (key == "max_blocks") cfg.train.max_blocks = static_cast<int>(to_int(key, value));
      else if (key == "depth") cfg.train.depth = static_cast<int>(to_int(key, value));
      else if (key == "bottleneck") cfg.train.bottleneck = static_cast<int>(to_int(key, value));
      else if (key == "conv_width") cfg.train.conv_width = static_cast<int>(to_int(key, value));
      else if (key == "encoder_conv_width") cfg.train.encoder_conv_width = static_cast<int>(to_int(key, value));
      else if (key == "with_bias") cfg.train.with_bias = to_int(key, value) != 0;
      else if (key == "weight_decay") cfg.train.weight_decay = to_double(key, value);
    }
    const auto rows = convrec::tv_recovery_experiment(cfg);
    convrec::write_tv_table(out_path, cfg, rows);
  });
}

}  // extern "C"
