#include "convrec/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "convrec/errors.hpp"

namespace convrec {

Gradients Gradients::like(const ModelParams& p) {
  Gradients g;
  for (const Matrix& w : p.enc_w) g.enc_w.emplace_back(w.rows, w.cols);
  for (const Matrix& w : p.dec_w) g.dec_w.emplace_back(w.rows, w.cols);
  for (const auto& b : p.enc_b) g.enc_b.emplace_back(b.size(), 0.0);
  for (const auto& b : p.dec_b) g.dec_b.emplace_back(b.size(), 0.0);
  return g;
}

void Gradients::zero() {
  for (Matrix& w : enc_w) w.fill(0.0);
  for (Matrix& w : dec_w) w.fill(0.0);
  for (auto& b : enc_b) std::fill(b.begin(), b.end(), 0.0);
  for (auto& b : dec_b) std::fill(b.begin(), b.end(), 0.0);
}

namespace {

constexpr double kLogClamp = 1e-30;

// Fills the k+1 target weights for one cell.
void fill_target(const SoftTargets* targets, std::int32_t user, std::int32_t item, int kappa,
                 std::span<double> out) {
  if (targets != nullptr) {
    if (const std::vector<double>* row = targets->find(user, item)) {
      std::copy(row->begin(), row->end(), out.begin());
      return;
    }
  }
  std::fill(out.begin(), out.end(), 0.0);
  out[static_cast<std::size_t>(kappa)] = 1.0;
}

// Shared per-user pass: forward, per-cell cross entropy, and optionally the
// backward sweep accumulating gradients scaled by `grad_scale`.
double accumulate_user(const ModelParams& params, const UserSlice& slice,
                       const SoftTargets* targets, double grad_scale, Gradients* grads,
                       ForwardTrace& trace) {
  forward_trace(params, slice, trace);

  const std::int64_t n = params.n;
  const int k1 = params.rating_count() + 1;
  const std::vector<double>& scores = trace.dec_act.back();

  // Softmax rows, loss, and the head delta G - T.
  std::vector<double> delta;
  if (grads != nullptr) delta.assign(static_cast<std::size_t>(n) * k1, 0.0);
  std::vector<double> target(static_cast<std::size_t>(k1));
  std::vector<double> probs(static_cast<std::size_t>(k1));
  double loss = 0.0;
  for (std::int64_t j = 0; j < n; ++j) {
    const double* row = scores.data() + static_cast<std::size_t>(j) * k1;
    double mx = row[0];
    for (int c = 1; c < k1; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < k1; ++c) {
      probs[static_cast<std::size_t>(c)] = std::exp(row[c] - mx);
      sum += probs[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < k1; ++c) probs[static_cast<std::size_t>(c)] /= sum;

    const int kappa = slice.rating_index_of(static_cast<std::int32_t>(j + 1));
    fill_target(targets, slice.user, static_cast<std::int32_t>(j + 1), kappa, target);
    for (int c = 0; c < k1; ++c) {
      const double w = target[static_cast<std::size_t>(c)];
      if (w != 0.0) {
        loss -= w * std::log(std::max(probs[static_cast<std::size_t>(c)], kLogClamp));
      }
    }
    if (grads != nullptr) {
      double* d = delta.data() + static_cast<std::size_t>(j) * k1;
      for (int c = 0; c < k1; ++c) {
        d[c] = grad_scale * (probs[static_cast<std::size_t>(c)] - target[static_cast<std::size_t>(c)]);
      }
    }
  }
  if (grads == nullptr) return loss;

  // Decoder sweep. `delta` always holds the gradient w.r.t. the current
  // layer's pre-activation output.
  const auto& dec_layers = params.dec_spec.layers;
  std::vector<double> prev_delta;
  for (int d = static_cast<int>(dec_layers.size()) - 1; d >= 0; --d) {
    const LayerSpec& l = dec_layers[static_cast<std::size_t>(d)];
    const Matrix& w = params.dec_w[static_cast<std::size_t>(d)];
    const std::vector<double>& input =
        d == 0 ? trace.embedding : trace.dec_act[static_cast<std::size_t>(d - 1)];
    Matrix& gw = grads->dec_w[static_cast<std::size_t>(d)];
    std::vector<double>& gb = grads->dec_b[static_cast<std::size_t>(d)];

    prev_delta.assign(input.size(), 0.0);
    if (l.kind == LayerKind::conv1x1) {
      for (std::int64_t j = 0; j < n; ++j) {
        std::span<const double> dj(delta.data() + static_cast<std::size_t>(j) * l.out_width,
                                   static_cast<std::size_t>(l.out_width));
        std::span<const double> inj(input.data() + static_cast<std::size_t>(j) * l.in_width,
                                    static_cast<std::size_t>(l.in_width));
        add_outer(gw, 1.0, dj, inj);
        if (!gb.empty()) {
          for (int o = 0; o < l.out_width; ++o) gb[static_cast<std::size_t>(o)] += dj[static_cast<std::size_t>(o)];
        }
        std::span<double> pj(prev_delta.data() + static_cast<std::size_t>(j) * l.in_width,
                             static_cast<std::size_t>(l.in_width));
        for (std::size_t o = 0; o < dj.size(); ++o) {
          const double dv = dj[o];
          if (dv == 0.0) continue;
          const double* wrow = w.data.data() + o * w.cols;
          for (std::size_t i2 = 0; i2 < pj.size(); ++i2) pj[i2] += dv * wrow[i2];
        }
      }
    } else {
      add_outer(gw, 1.0, delta, input);
      if (!gb.empty()) {
        for (std::size_t o = 0; o < delta.size(); ++o) gb[o] += delta[o];
      }
      gemv_transposed(w, delta, prev_delta);
    }
    // ReLU mask of the layer below (post-activations encode the mask).
    if (d > 0) {
      const std::vector<double>& below = trace.dec_act[static_cast<std::size_t>(d - 1)];
      for (std::size_t i2 = 0; i2 < prev_delta.size(); ++i2) {
        if (below[i2] <= 0.0) prev_delta[i2] = 0.0;
      }
    }
    delta.swap(prev_delta);
  }

  // Encoder sweep; `delta` is the gradient w.r.t. the post-ReLU embedding.
  const auto& enc_layers = params.enc_spec.layers;
  for (int e = static_cast<int>(enc_layers.size()) - 1; e >= 0; --e) {
    const LayerSpec& l = enc_layers[static_cast<std::size_t>(e)];
    const Matrix& w = params.enc_w[static_cast<std::size_t>(e)];
    const std::vector<double>& act = trace.enc_act[static_cast<std::size_t>(e)];
    Matrix& gw = grads->enc_w[static_cast<std::size_t>(e)];
    std::vector<double>& gb = grads->enc_b[static_cast<std::size_t>(e)];

    for (std::size_t i2 = 0; i2 < delta.size(); ++i2) {
      if (act[i2] <= 0.0) delta[i2] = 0.0;
    }

    if (e == 0) {
      // One-hot input: each item row contributes its delta to the column of
      // the filter picked by the observed channel.
      std::vector<double> col0_sum(static_cast<std::size_t>(l.out_width), 0.0);
      for (std::int64_t j = 0; j < n; ++j) {
        const double* dj = delta.data() + static_cast<std::size_t>(j) * l.out_width;
        for (int o = 0; o < l.out_width; ++o) col0_sum[static_cast<std::size_t>(o)] += dj[o];
      }
      // Start from "every row unobserved", then move observed rows to their
      // rating column.
      for (const auto& entry : slice.entries) {
        const double* dj = delta.data() + static_cast<std::size_t>(entry.first - 1) * l.out_width;
        for (int o = 0; o < l.out_width; ++o) {
          col0_sum[static_cast<std::size_t>(o)] -= dj[o];
          gw(static_cast<std::size_t>(o), static_cast<std::size_t>(entry.second)) += dj[o];
        }
      }
      for (int o = 0; o < l.out_width; ++o) gw(static_cast<std::size_t>(o), 0) += col0_sum[static_cast<std::size_t>(o)];
      if (!gb.empty()) {
        std::fill(col0_sum.begin(), col0_sum.end(), 0.0);
        for (std::int64_t j = 0; j < n; ++j) {
          const double* dj = delta.data() + static_cast<std::size_t>(j) * l.out_width;
          for (int o = 0; o < l.out_width; ++o) col0_sum[static_cast<std::size_t>(o)] += dj[o];
        }
        for (int o = 0; o < l.out_width; ++o) gb[static_cast<std::size_t>(o)] += col0_sum[static_cast<std::size_t>(o)];
      }
      break;
    }

    const std::vector<double>& input = trace.enc_act[static_cast<std::size_t>(e - 1)];
    prev_delta.assign(input.size(), 0.0);
    if (l.kind == LayerKind::conv1x1) {
      for (std::int64_t j = 0; j < n; ++j) {
        std::span<const double> dj(delta.data() + static_cast<std::size_t>(j) * l.out_width,
                                   static_cast<std::size_t>(l.out_width));
        std::span<const double> inj(input.data() + static_cast<std::size_t>(j) * l.in_width,
                                    static_cast<std::size_t>(l.in_width));
        add_outer(gw, 1.0, dj, inj);
        if (!gb.empty()) {
          for (int o = 0; o < l.out_width; ++o) gb[static_cast<std::size_t>(o)] += dj[static_cast<std::size_t>(o)];
        }
        std::span<double> pj(prev_delta.data() + static_cast<std::size_t>(j) * l.in_width,
                             static_cast<std::size_t>(l.in_width));
        for (std::size_t o = 0; o < dj.size(); ++o) {
          const double dv = dj[o];
          if (dv == 0.0) continue;
          const double* wrow = w.data.data() + o * w.cols;
          for (std::size_t i2 = 0; i2 < pj.size(); ++i2) pj[i2] += dv * wrow[i2];
        }
      }
    } else {
      add_outer(gw, 1.0, delta, input);
      if (!gb.empty()) {
        for (std::size_t o = 0; o < delta.size(); ++o) gb[o] += delta[o];
      }
      gemv_transposed(w, delta, prev_delta);
    }
    delta.swap(prev_delta);
  }
  return loss;
}

void check_users(const std::vector<std::int32_t>& users, const ObservedDataset& data) {
  for (std::int32_t u : users) {
    if (u < 1 || u > data.m) {
      throw usage_error("user index " + std::to_string(u) + " out of range");
    }
  }
}

}  // namespace

double reconstruction_loss(const ModelParams& params, const std::vector<std::int32_t>& users,
                           const ObservedDataset& train, const SoftTargets* targets) {
  check_users(users, train);
  if (users.empty()) throw usage_error("reconstruction_loss: empty user list");
  ForwardTrace trace;
  double total = 0.0;
  for (std::int32_t u : users) {
    total += accumulate_user(params, train.user_slice(u), targets, 0.0, nullptr, trace);
  }
  return total / (static_cast<double>(users.size()) * static_cast<double>(params.n));
}

void backward(const ModelParams& params, const std::vector<std::int32_t>& users,
              const ObservedDataset& train, Gradients& grads, const SoftTargets* targets) {
  check_users(users, train);
  if (users.empty()) throw usage_error("backward: empty user list");
  const double scale = 1.0 / (static_cast<double>(users.size()) * static_cast<double>(params.n));
  ForwardTrace trace;
  for (std::int32_t u : users) {
    accumulate_user(params, train.user_slice(u), targets, scale, &grads, trace);
  }
}

namespace {

struct ValidationIndex {
  std::vector<std::int32_t> users;                       // users holding validation triples
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> items;  // (item, kappa)
};

ValidationIndex index_validation(const ObservedDataset& validation) {
  ValidationIndex idx;
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> per_user(
      static_cast<std::size_t>(validation.m));
  for (const Triple& t : validation.triples) {
    per_user[static_cast<std::size_t>(t.user - 1)].push_back({t.item, t.rating_index});
  }
  for (std::int64_t u = 0; u < validation.m; ++u) {
    if (!per_user[static_cast<std::size_t>(u)].empty()) {
      idx.users.push_back(static_cast<std::int32_t>(u + 1));
      idx.items.push_back(std::move(per_user[static_cast<std::size_t>(u)]));
    }
  }
  return idx;
}

double validation_metric(const ModelParams& params, const ObservedDataset& train,
                         const ValidationIndex& idx, StopMetric metric) {
  if (idx.users.empty()) return std::nan("");
  double acc = 0.0;
  std::int64_t count = 0;
  double recall_acc = 0.0;
  for (std::size_t ui = 0; ui < idx.users.size(); ++ui) {
    const std::int32_t u = idx.users[ui];
    const UserSlice slice = train.user_slice(u);
    ForwardOutput out = forward(params, slice);
    switch (metric) {
      case StopMetric::validation_loss:
        for (const auto& [item, kappa] : idx.items[ui]) {
          const double p = out.probabilities(static_cast<std::size_t>(item - 1),
                                             static_cast<std::size_t>(kappa));
          acc += -std::log(std::max(p, kLogClamp));
          ++count;
        }
        break;
      case StopMetric::rmse:
        for (const auto& [item, kappa] : idx.items[ui]) {
          const double err = params.scale.value(kappa) -
                             out.predicted_rating[static_cast<std::size_t>(item - 1)];
          acc += err * err;
          ++count;
        }
        break;
      case StopMetric::recall50: {
        std::vector<std::int32_t> order;
        order.reserve(static_cast<std::size_t>(params.n));
        for (std::int32_t j = 1; j <= params.n; ++j) {
          if (slice.rating_index_of(j) == 0) order.push_back(j);
        }
        std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
          const double sa = out.interaction_probability[static_cast<std::size_t>(a - 1)];
          const double sb = out.interaction_probability[static_cast<std::size_t>(b - 1)];
          if (sa != sb) return sa > sb;
          return a < b;
        });
        const std::size_t top = std::min<std::size_t>(50, order.size());
        std::int64_t hits = 0;
        for (std::size_t r2 = 0; r2 < top; ++r2) {
          for (const auto& [item, kappa] : idx.items[ui]) {
            if (item == order[r2]) {
              ++hits;
              break;
            }
          }
        }
        const double denom = static_cast<double>(std::min<std::size_t>(50, idx.items[ui].size()));
        recall_acc += static_cast<double>(hits) / denom;
        ++count;
        break;
      }
    }
  }
  if (metric == StopMetric::recall50) return recall_acc / static_cast<double>(count);
  return acc / static_cast<double>(count);
}

// Early stopping compares "errors": lower is better for every metric once
// recall is negated.
double oriented_error(double metric, StopMetric kind) {
  return kind == StopMetric::recall50 ? -metric : metric;
}

}  // namespace

TrainState train(const TrainConfig& config, const ObservedDataset& train_set,
                 const ObservedDataset& validation, const SoftTargets* targets) {
  if (train_set.m <= 0 || train_set.n <= 0) throw data_error("train: empty dataset");
  if (train_set.size() == 0 && targets == nullptr) throw data_error("train: no observations");
  if (config.epoch_block < 1 || config.max_blocks < 1) {
    throw usage_error("train: epoch_block and max_blocks must be positive");
  }
  if (config.batch_size < 1) throw usage_error("train: batch_size must be positive");

  const int k = train_set.scale.rating_count();
  const EncoderSpec enc =
      default_encoder(train_set.n, k, config.encoder_conv_width, config.bottleneck);
  const DecoderSpec dec =
      default_decoder(train_set.n, k, config.depth, config.bottleneck, config.conv_width);

  TrainState state;
  state.config = config;
  state.params = init_params(enc, dec, train_set.scale, train_set.n, config.seed, config.with_bias);

  NadamConfig ncfg{config.learning_rate, config.beta1, config.beta2, config.eps};
  std::vector<NadamState> opt_enc_w, opt_dec_w, opt_enc_b, opt_dec_b;
  for (const Matrix& w : state.params.enc_w) opt_enc_w.emplace_back(ncfg, w.size());
  for (const Matrix& w : state.params.dec_w) opt_dec_w.emplace_back(ncfg, w.size());
  for (const auto& b : state.params.enc_b) opt_enc_b.emplace_back(ncfg, b.size());
  for (const auto& b : state.params.dec_b) opt_dec_b.emplace_back(ncfg, b.size());

  Gradients grads = Gradients::like(state.params);
  ForwardTrace trace;
  Rng shuffle_rng(config.seed ^ 0x8f1bbcdc00000000ULL);

  std::vector<std::int32_t> order(static_cast<std::size_t>(train_set.m));
  for (std::int64_t u = 0; u < train_set.m; ++u) order[static_cast<std::size_t>(u)] = static_cast<std::int32_t>(u + 1);

  const ValidationIndex val_idx = index_validation(validation);
  const double cells = static_cast<double>(train_set.m) * static_cast<double>(train_set.n);
  double last_finite_loss = std::nan("");
  int epoch = 0;

  for (int block = 1; block <= config.max_blocks; ++block) {
    for (int be = 0; be < config.epoch_block; ++be) {
      ++epoch;
      shuffle_rng.shuffle(order);
      double epoch_loss_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        const double scale = 1.0 / (static_cast<double>(end - start) * static_cast<double>(train_set.n));
        grads.zero();
        for (std::size_t bi = start; bi < end; ++bi) {
          epoch_loss_sum += accumulate_user(state.params, train_set.user_slice(order[bi]),
                                            targets, scale, &grads, trace);
        }
        if (config.weight_decay > 0.0) {
          for (std::size_t t = 0; t < grads.enc_w.size(); ++t) {
            for (std::size_t i2 = 0; i2 < grads.enc_w[t].data.size(); ++i2) {
              grads.enc_w[t].data[i2] += config.weight_decay * state.params.enc_w[t].data[i2];
            }
          }
          for (std::size_t t = 0; t < grads.dec_w.size(); ++t) {
            for (std::size_t i2 = 0; i2 < grads.dec_w[t].data.size(); ++i2) {
              grads.dec_w[t].data[i2] += config.weight_decay * state.params.dec_w[t].data[i2];
            }
          }
        }
        for (std::size_t t = 0; t < opt_enc_w.size(); ++t) {
          nadam_step(opt_enc_w[t], state.params.enc_w[t].data, grads.enc_w[t].data);
        }
        for (std::size_t t = 0; t < opt_dec_w.size(); ++t) {
          nadam_step(opt_dec_w[t], state.params.dec_w[t].data, grads.dec_w[t].data);
        }
        if (state.params.with_bias) {
          for (std::size_t t = 0; t < opt_enc_b.size(); ++t) {
            nadam_step(opt_enc_b[t], state.params.enc_b[t], grads.enc_b[t]);
          }
          for (std::size_t t = 0; t < opt_dec_b.size(); ++t) {
            nadam_step(opt_dec_b[t], state.params.dec_b[t], grads.dec_b[t]);
          }
        }
      }
      const double epoch_loss = epoch_loss_sum / cells;
      if (!std::isfinite(epoch_loss)) {
        throw numeric_error("training diverged at epoch " + std::to_string(epoch) +
                            "; last finite loss " + std::to_string(last_finite_loss));
      }
      last_finite_loss = epoch_loss;
      const double vm = validation_metric(state.params, train_set, val_idx, config.stop_metric);
      state.history.push_back({epoch, epoch_loss, vm});
    }
    state.checkpoints.push_back(state.params);
    state.block_metrics.push_back(state.history.back().validation_metric);
    const std::size_t b = state.block_metrics.size();
    if (!val_idx.users.empty() && b >= 2) {
      const double now = oriented_error(state.block_metrics[b - 1], config.stop_metric);
      const double prev = oriented_error(state.block_metrics[b - 2], config.stop_metric);
      if (now > prev) {
        state.stopped_early = true;
        break;
      }
    }
  }
  return state;
}

ForwardOutput averaged_predict(const std::vector<ModelParams>& checkpoints,
                               const UserSlice& slice) {
  if (checkpoints.empty()) throw usage_error("averaged_predict: no checkpoints");
  ForwardOutput out = forward(checkpoints.front(), slice);
  if (checkpoints.size() > 1) {
    for (std::size_t c = 1; c < checkpoints.size(); ++c) {
      ForwardOutput next = forward(checkpoints[c], slice);
      for (std::size_t i = 0; i < out.probabilities.data.size(); ++i) {
        out.probabilities.data[i] += next.probabilities.data[i];
      }
      if (c + 1 == checkpoints.size()) {
        out.scores = std::move(next.scores);
        out.embedding = std::move(next.embedding);
      }
    }
    const double inv = 1.0 / static_cast<double>(checkpoints.size());
    for (double& v : out.probabilities.data) v *= inv;
    derive_from_probabilities(checkpoints.front().scale, out);
  }
  return out;
}

ForwardOutput averaged_predict(const TrainState& state, const UserSlice& slice) {
  return averaged_predict(state.checkpoints, slice);
}

void write_history(const std::string& path, const TrainState& state) {
  std::unique_ptr<std::FILE, decltype([](std::FILE* f) { if (f) std::fclose(f); })> f(
      std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write history file: " + path);
  const char* metric_name = "validation_loss";
  if (state.config.stop_metric == StopMetric::rmse) metric_name = "rmse";
  if (state.config.stop_metric == StopMetric::recall50) metric_name = "recall@50";
  std::fprintf(f.get(), "#epoch\ttrain_loss\t%s\n", metric_name);
  for (const EpochRecord& r : state.history) {
    std::fprintf(f.get(), "%d\t%.17g\t%.17g\n", r.epoch, r.train_loss, r.validation_metric);
  }
}

namespace {

struct ParamRef {
  double* value;
  std::string name;
};

std::vector<ParamRef> all_parameters(ModelParams& p) {
  std::vector<ParamRef> refs;
  auto add_tensor = [&](Matrix& w, const std::string& base) {
    for (std::size_t i = 0; i < w.rows; ++i)
      for (std::size_t j = 0; j < w.cols; ++j) {
        refs.push_back({&w(i, j), base + "(" + std::to_string(i) + "," + std::to_string(j) + ")"});
      }
  };
  auto add_vec = [&](std::vector<double>& b, const std::string& base) {
    for (std::size_t i = 0; i < b.size(); ++i) {
      refs.push_back({&b[i], base + "[" + std::to_string(i) + "]"});
    }
  };
  for (std::size_t t = 0; t < p.enc_w.size(); ++t) add_tensor(p.enc_w[t], "enc_w" + std::to_string(t));
  for (std::size_t t = 0; t < p.dec_w.size(); ++t) add_tensor(p.dec_w[t], "dec_w" + std::to_string(t));
  for (std::size_t t = 0; t < p.enc_b.size(); ++t) add_vec(p.enc_b[t], "enc_b" + std::to_string(t));
  for (std::size_t t = 0; t < p.dec_b.size(); ++t) add_vec(p.dec_b[t], "dec_b" + std::to_string(t));
  return refs;
}

const double* grad_for(const Gradients& g, const ModelParams& p, std::size_t flat_index) {
  // Parameters enumerate in the same order as all_parameters.
  std::size_t offset = flat_index;
  for (std::size_t t = 0; t < g.enc_w.size(); ++t) {
    if (offset < g.enc_w[t].data.size()) return &g.enc_w[t].data[offset];
    offset -= g.enc_w[t].data.size();
  }
  for (std::size_t t = 0; t < g.dec_w.size(); ++t) {
    if (offset < g.dec_w[t].data.size()) return &g.dec_w[t].data[offset];
    offset -= g.dec_w[t].data.size();
  }
  for (std::size_t t = 0; t < g.enc_b.size(); ++t) {
    if (offset < g.enc_b[t].size()) return &g.enc_b[t][offset];
    offset -= g.enc_b[t].size();
  }
  for (std::size_t t = 0; t < g.dec_b.size(); ++t) {
    if (offset < g.dec_b[t].size()) return &g.dec_b[t][offset];
    offset -= g.dec_b[t].size();
  }
  (void)p;
  return nullptr;
}

}  // namespace

GradCheckResult gradient_check(const ModelParams& params, const ObservedDataset& data,
                               const std::vector<std::int32_t>& users, double step) {
  ModelParams work = params;
  Gradients analytic = Gradients::like(work);
  analytic.zero();
  backward(work, users, data, analytic);

  auto refs = all_parameters(work);
  GradCheckResult result;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const double saved = *refs[i].value;
    *refs[i].value = saved + step;
    const double plus = reconstruction_loss(work, users, data);
    *refs[i].value = saved - step;
    const double minus = reconstruction_loss(work, users, data);
    *refs[i].value = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    const double a = *grad_for(analytic, work, i);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_parameter = refs[i].name;
    }
  }
  return result;
}

ObservedDataset make_random_dataset(std::int64_t m, std::int64_t n, int k, double density,
                                    std::uint64_t seed) {
  ObservedDataset ds;
  ds.m = m;
  ds.n = n;
  ds.scale = RatingScale::integers(k);
  for (std::int64_t u = 0; u < m; ++u) ds.user_ids.push_back("u" + std::to_string(u + 1));
  for (std::int64_t i = 0; i < n; ++i) ds.item_ids.push_back("i" + std::to_string(i + 1));
  Rng rng(seed);
  for (std::int32_t u = 1; u <= m; ++u) {
    for (std::int32_t i = 1; i <= n; ++i) {
      if (rng.uniform() < density) {
        ds.triples.push_back({u, i, static_cast<std::int32_t>(1 + rng.below(static_cast<std::uint64_t>(k)))});
      }
    }
  }
  ds.finalize();
  return ds;
}

GradCheckResult gradcheck_random_model(std::int64_t m, std::int64_t n, int k, int r, int depth,
                                       int conv_width, std::uint64_t seed, bool with_bias,
                                       double step) {
  ObservedDataset data = make_random_dataset(m, n, k, 0.3, seed);
  const EncoderSpec enc = default_encoder(n, k, conv_width, r);
  const DecoderSpec dec = default_decoder(n, k, depth, r, conv_width);
  ModelParams params = init_params(enc, dec, data.scale, n, seed + 1, with_bias);
  std::vector<std::int32_t> users(static_cast<std::size_t>(m));
  for (std::int64_t u = 0; u < m; ++u) users[static_cast<std::size_t>(u)] = static_cast<std::int32_t>(u + 1);
  return gradient_check(params, data, users, step);
}

}  // namespace convrec
