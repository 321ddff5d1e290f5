#include "convrec/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <unordered_map>

#include "convrec/errors.hpp"

namespace convrec {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

double max_row_norm(const Matrix& w) {
  double best = 0.0;
  for (std::size_t i = 0; i < w.rows; ++i) best = std::max(best, norm2(w.row(i)));
  return best;
}

double row_norm_sum(const Matrix& w) {
  double sum = 0.0;
  for (std::size_t i = 0; i < w.rows; ++i) sum += norm2(w.row(i));
  return sum;
}

double frobenius(const Matrix& w) {
  return norm2(w.data);
}

Matrix difference(const Matrix& a, const Matrix& b) {
  Matrix d(a.rows, a.cols);
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = a.data[i] - b.data[i];
  return d;
}

}  // namespace

double layer_norm(const Matrix& w, LayerPosition position, std::int64_t n) {
  switch (position) {
    case LayerPosition::interior_dense:
    case LayerPosition::interior_conv:
      return spectral_norm(w);
    case LayerPosition::boundary: {
      if (n <= 0 || w.rows % static_cast<std::size_t>(n) != 0) {
        throw usage_error("boundary layer norm needs n dividing the row count");
      }
      const std::size_t slice_rows = w.rows / static_cast<std::size_t>(n);
      double best = 0.0;
      Matrix slice(slice_rows, w.cols);
      for (std::int64_t j = 0; j < n; ++j) {
        std::copy(w.data.begin() + static_cast<std::ptrdiff_t>(j * static_cast<std::int64_t>(slice_rows * w.cols)),
                  w.data.begin() + static_cast<std::ptrdiff_t>((j + 1) * static_cast<std::int64_t>(slice_rows * w.cols)),
                  slice.data.begin());
        best = std::max(best, spectral_norm(slice));
      }
      return best;
    }
    case LayerPosition::last:
      return max_row_norm(w);
  }
  throw usage_error("layer_norm: unknown position");
}

LayerPosition decoder_layer_position(const DecoderSpec& spec, int layer_index) {
  const int l0 = spec.fully_connected_count;
  const int depth = spec.depth();
  if (layer_index < 0 || layer_index >= depth) throw usage_error("layer index out of range");
  if (layer_index == depth - 1) return LayerPosition::last;
  if (layer_index == l0 - 1) return LayerPosition::boundary;
  if (layer_index < l0 - 1) return LayerPosition::interior_dense;
  return LayerPosition::interior_conv;
}

DistanceReport distance_to_init(const ModelParams& params) {
  if (params.dec_w_init.size() != params.dec_w.size() || params.dec_w.empty()) {
    throw usage_error("distance_to_init: initialization snapshot missing");
  }
  DistanceReport report;
  const int depth = params.dec_spec.depth();
  for (int l = 0; l < depth; ++l) {
    const LayerPosition pos = decoder_layer_position(params.dec_spec, l);
    const Matrix& w = params.dec_w[static_cast<std::size_t>(l)];
    const Matrix& m0 = params.dec_w_init[static_cast<std::size_t>(l)];
    const Matrix diff = difference(w, m0);
    report.arch_distance.push_back(layer_norm(diff, pos, params.n));
    report.operator_norm.push_back(layer_norm(w, pos, params.n));
    report.init_norm.push_back(layer_norm(m0, pos, params.n));
    report.group_distance.push_back(l == depth - 1 ? frobenius(diff) : row_norm_sum(diff));
  }
  for (double d : report.arch_distance) report.beta_sum += d;
  double max_init = 0.0;
  for (double v : report.init_norm) max_init = std::max(max_init, v);
  report.nu = std::max(0.0, max_init - 1.0);
  return report;
}

double bound_param_count(const BoundInputs& in) {
  const double span2 = in.span * in.span;
  const double n = static_cast<double>(in.sample_count);
  const double mr_d2 =
      static_cast<double>(in.user_count) * static_cast<double>(in.bottleneck) +
      static_cast<double>(in.decoder_params);
  const double t1 = 3.0 * span2 * std::sqrt(std::log(2.0 / in.delta) / (2.0 * n));
  const double t2 = 16.0 * span2 / n;
  const double t3 = span2 * std::sqrt(48.0 * mr_d2 * (in.beta + in.nu * in.depth) / n);
  const double t4 =
      span2 *
      std::sqrt(mr_d2 * std::log(72.0 * n * (in.chi + in.beta) * (in.chi + 1.0) + 1.0) / n);
  return t1 + t2 + t3 + t4;
}

double bound_norm_based(const BoundInputs& in) {
  if (in.group_distance.size() != in.operator_norm.size() || in.operator_norm.empty()) {
    throw usage_error("bound_norm_based: per-layer norms missing");
  }
  const double span2 = in.span * in.span;
  const double n = static_cast<double>(in.sample_count);
  const double t1 = 3.0 * span2 * std::sqrt(std::log(2.0 / in.delta) / (2.0 * n));
  const double t2 = 16.0 * span2 / n;

  double prod_s = 1.0;
  double a_max = 0.0;
  double sum_ratio = 0.0;
  for (std::size_t l = 0; l < in.operator_norm.size(); ++l) {
    const double s = in.operator_norm[l];
    const double a = in.group_distance[l];
    if (s <= 0.0) throw usage_error("bound_norm_based: operator norms must be positive");
    prod_s *= s;
    a_max = std::max(a_max, a);
    sum_ratio += std::pow(a / s, 2.0 / 3.0);
  }
  double tail = 1.0;  // S = max_l prod_{j>=l} s_j
  double best_tail = 0.0;
  for (std::size_t l = in.operator_norm.size(); l-- > 0;) {
    tail *= in.operator_norm[l];
    best_tail = std::max(best_tail, tail);
  }

  const double mr = static_cast<double>(in.user_count) * static_cast<double>(in.bottleneck);
  const double log_inner = std::log(600.0 * n * in.chi * prod_s + 1.0);
  const double t3 = 48.0 * span2 * in.chi * in.chi * std::sqrt(mr / n) * std::sqrt(log_inner);

  const double d2n = static_cast<double>(in.decoder_params) * static_cast<double>(in.item_count);
  const double log_big =
      std::log(d2n * (17.0 * n * a_max * best_tail + 7.0) * (600.0 * n * in.chi * prod_s + 1.0));
  const double t4 = 1584.0 * span2 * in.chi * prod_s * std::pow(sum_ratio, 1.5) *
                    std::sqrt(static_cast<double>(in.bottleneck) / n) * std::sqrt(log_big);
  return t1 + t2 + t3 + t4;
}

double bound_tv_budget(const BoundInputs& in) {
  const double b = in.score_bound;
  const double n = static_cast<double>(in.sample_count);
  const double mr_d2 =
      static_cast<double>(in.user_count) * static_cast<double>(in.bottleneck) +
      static_cast<double>(in.decoder_params);
  const double t1 = 12.0 * b * std::sqrt(std::log(2.0 / in.delta) / (2.0 * n));
  const double t2 = 32.0 * b / n;
  const double t3 =
      (96.0 * b / std::sqrt(n)) *
      std::sqrt(mr_d2 * ((in.beta + in.nu * in.depth) +
                         std::log(6.0 * n * (in.chi + in.beta) * (in.chi + 1.0) * b + 1.0)));
  return t1 + t2 + t3;
}

BoundInputs measure_bound_inputs(const ModelParams& params, const ObservedDataset& train,
                                 std::int64_t sample_count, double delta) {
  BoundInputs in;
  in.span = params.scale.span();
  in.delta = delta;
  in.sample_count = sample_count;
  in.user_count = train.m;
  in.item_count = train.n;
  in.bottleneck = params.dec_spec.bottleneck();
  in.decoder_params = params.decoder_param_count();
  in.depth = params.dec_spec.depth();

  const DistanceReport dist = distance_to_init(params);
  in.beta = dist.beta_sum;
  in.nu = dist.nu;
  in.group_distance = dist.group_distance;
  in.operator_norm = dist.operator_norm;

  in.chi = 0.0;
  in.score_bound = 0.0;
  for (std::int32_t u = 1; u <= train.m; ++u) {
    ForwardOutput out = forward(params, train.user_slice(u));
    in.chi = std::max(in.chi, norm2(out.embedding));
    for (double g : out.scores.data) in.score_bound = std::max(in.score_bound, std::abs(g));
  }
  return in;
}

double lipschitz_probe(const ModelParams& params, int trials, double chi, double beta,
                       std::uint64_t seed) {
  if (trials < 1) throw usage_error("lipschitz_probe: trials must be >= 1");
  const DecoderSpec& spec = params.dec_spec;
  const int depth = spec.depth();
  const std::int64_t n = params.n;
  const std::size_t r = static_cast<std::size_t>(spec.bottleneck());

  double nu = 0.0;
  for (int l = 0; l < depth; ++l) {
    nu = std::max(nu, layer_norm(params.dec_w_init[static_cast<std::size_t>(l)],
                                 decoder_layer_position(spec, l), n));
  }
  nu = std::max(0.0, nu - 1.0);
  const double cap = (chi + 1.0) * std::exp(beta + nu * depth);

  Rng rng(seed);
  auto draw_ball = [&](std::vector<double>& x) {
    x.resize(r);
    for (double& v : x) v = rng.normal();
    const double nv = norm2(x);
    const double radius = chi * std::pow(rng.uniform(), 1.0 / static_cast<double>(r));
    if (nv > 0) {
      for (double& v : x) v *= radius / nv;
    }
  };

  auto draw_weights = [&](std::vector<Matrix>& w) {
    w = params.dec_w_init;
    std::vector<Matrix> perturbation(w.size());
    double total = 0.0;
    for (int l = 0; l < depth; ++l) {
      Matrix p(w[static_cast<std::size_t>(l)].rows, w[static_cast<std::size_t>(l)].cols);
      for (double& v : p.data) v = rng.normal() * 0.05;
      total += layer_norm(p, decoder_layer_position(spec, l), n);
      perturbation[static_cast<std::size_t>(l)] = std::move(p);
    }
    const double budget = beta * rng.uniform();
    const double scale = total > 0 ? budget / total : 0.0;
    for (int l = 0; l < depth; ++l) {
      Matrix& target = w[static_cast<std::size_t>(l)];
      const Matrix& p = perturbation[static_cast<std::size_t>(l)];
      for (std::size_t i = 0; i < target.data.size(); ++i) target.data[i] += scale * p.data[i];
    }
  };

  double worst = 0.0;
  std::vector<double> x, x2;
  std::vector<Matrix> w, w2;
  for (int t = 0; t < trials; ++t) {
    draw_ball(x);
    draw_ball(x2);
    draw_weights(w);
    draw_weights(w2);

    double dist = 0.0;
    {
      std::vector<double> dx(r);
      for (std::size_t i = 0; i < r; ++i) dx[i] = x[i] - x2[i];
      dist += norm2(dx);
    }
    for (int l = 0; l < depth; ++l) {
      dist += layer_norm(difference(w[static_cast<std::size_t>(l)], w2[static_cast<std::size_t>(l)]),
                         decoder_layer_position(spec, l), n);
    }
    if (dist == 0.0) continue;

    const auto y = decoder_forward(spec, n, w, params.dec_b_init, params.with_bias, x);
    const auto y2 = decoder_forward(spec, n, w2, params.dec_b_init, params.with_bias, x2);
    double diff_inf = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) diff_inf = std::max(diff_inf, std::abs(y[i] - y2[i]));
    worst = std::max(worst, diff_inf / (cap * dist));
  }
  return worst;
}

void GroundTruthDistribution::validate() const {
  if (p.size() != static_cast<std::size_t>(m) * static_cast<std::size_t>(n) *
                      static_cast<std::size_t>(k)) {
    throw usage_error("ground truth tensor has the wrong size");
  }
  double total = 0.0;
  for (double v : p) {
    if (v < 0.0) throw usage_error("ground truth probabilities must be nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw usage_error("ground truth probabilities must sum to 1");
  }
}

std::vector<double> bayes_optimal_output(const GroundTruthDistribution& gt,
                                         std::int64_t sample_count) {
  gt.validate();
  const double inv_n = 1.0 / static_cast<double>(sample_count);
  std::vector<double> out(static_cast<std::size_t>(gt.m) * static_cast<std::size_t>(gt.n) *
                          static_cast<std::size_t>(gt.k + 1));
  for (std::int64_t i = 1; i <= gt.m; ++i) {
    for (std::int64_t j = 1; j <= gt.n; ++j) {
      const double mass = gt.cell_mass(i, j);
      if (mass > inv_n + 1e-15) {
        throw data_error("bayes_optimal_output: cell (" + std::to_string(i) + "," +
                         std::to_string(j) + ") violates 1/N >= " + std::to_string(mass));
      }
      double* row = out.data() + (static_cast<std::size_t>(i - 1) * static_cast<std::size_t>(gt.n) +
                                  static_cast<std::size_t>(j - 1)) *
                                     static_cast<std::size_t>(gt.k + 1);
      double tail = 0.0;
      for (int kappa = 1; kappa <= gt.k; ++kappa) {
        row[kappa] = static_cast<double>(sample_count) * gt.at(i, j, kappa);
        tail += row[kappa];
      }
      row[0] = 1.0 - tail;
    }
  }
  return out;
}

double implicit_loss(const std::vector<double>& probabilities, std::int64_t m, std::int64_t n,
                     int k, const ObservedDataset& observed, std::int64_t sample_count) {
  if (probabilities.size() != static_cast<std::size_t>(m) * static_cast<std::size_t>(n) *
                                  static_cast<std::size_t>(k + 1)) {
    throw usage_error("implicit_loss: probability tensor has the wrong size");
  }
  const std::size_t row_len = static_cast<std::size_t>(k + 1);
  auto channel = [&](std::int64_t i, std::int64_t j, int kappa) {
    const double v = probabilities[(static_cast<std::size_t>(i - 1) * static_cast<std::size_t>(n) +
                                    static_cast<std::size_t>(j - 1)) *
                                       row_len +
                                   static_cast<std::size_t>(kappa)];
    if (v <= 0.0) {
      throw data_error("implicit_loss: zero probability at needed channel (" + std::to_string(i) +
                       "," + std::to_string(j) + "," + std::to_string(kappa) + ")");
    }
    return v;
  };
  double observed_term = 0.0;
  for (const Triple& t : observed.triples) {
    observed_term -= std::log(channel(t.user, t.item, t.rating_index)) -
                     std::log(channel(t.user, t.item, 0));
  }
  double all_term = 0.0;
  for (std::int64_t i = 1; i <= m; ++i) {
    for (std::int64_t j = 1; j <= n; ++j) all_term += std::log(channel(i, j, 0));
  }
  const double inv = 1.0 / static_cast<double>(sample_count);
  return observed_term * inv - all_term * inv;
}

double implicit_loss_population(const std::vector<double>& probabilities,
                                const GroundTruthDistribution& gt, std::int64_t sample_count) {
  const std::size_t row_len = static_cast<std::size_t>(gt.k + 1);
  auto channel = [&](std::int64_t i, std::int64_t j, int kappa) {
    const double v =
        probabilities[(static_cast<std::size_t>(i - 1) * static_cast<std::size_t>(gt.n) +
                       static_cast<std::size_t>(j - 1)) *
                          row_len +
                      static_cast<std::size_t>(kappa)];
    if (v <= 0.0) throw data_error("implicit_loss_population: zero probability channel");
    return v;
  };
  double acc = 0.0;
  const double inv = 1.0 / static_cast<double>(sample_count);
  for (std::int64_t i = 1; i <= gt.m; ++i) {
    for (std::int64_t j = 1; j <= gt.n; ++j) {
      const double log0 = std::log(channel(i, j, 0));
      for (int kappa = 1; kappa <= gt.k; ++kappa) {
        const double p = gt.at(i, j, kappa);
        if (p > 0.0) acc -= p * (std::log(channel(i, j, kappa)) - log0);
      }
      acc -= inv * log0;
    }
  }
  return acc;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw usage_error("kl_divergence: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw usage_error("kl_divergence: negative entries");
    if (p[i] > 0.0) {
      if (q[i] <= 0.0) {
        throw data_error("kl_divergence: q vanishes where p > 0 (index " + std::to_string(i) + ")");
      }
      acc += p[i] * std::log(p[i] / q[i]);
    }
  }
  return acc;
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw usage_error("tv_distance: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return acc;
}

bool pinsker_holds(std::span<const double> p, std::span<const double> q, double slack) {
  const double half_l1 = 0.5 * tv_distance(p, q);
  return half_l1 <= std::sqrt(0.5 * kl_divergence(p, q)) + slack;
}

GroundTruthDistribution synth_generate(std::int64_t m, std::int64_t n, int rank, int k,
                                       std::uint64_t seed, bool noiseless, double weight_scale) {
  if (m <= 0 || n <= 0 || rank <= 0 || k < 2) throw usage_error("synth_generate: bad dimensions");
  GroundTruthDistribution gt;
  gt.m = m;
  gt.n = n;
  gt.k = k;
  gt.scale = RatingScale::integers(k);
  gt.noiseless = noiseless;
  gt.p.assign(static_cast<std::size_t>(m) * static_cast<std::size_t>(n) *
                  static_cast<std::size_t>(k),
              0.0);

  // Small two-layer decoder of the model family: dense rank -> n*width, conv
  // width -> k+1, with random user embeddings.
  const int width = 6;
  Rng rng(seed);
  Matrix w1(static_cast<std::size_t>(n) * width, static_cast<std::size_t>(rank));
  for (double& v : w1.data) v = rng.normal() * weight_scale / std::sqrt(static_cast<double>(rank));
  Matrix w2(static_cast<std::size_t>(k + 1), width);
  for (double& v : w2.data) v = rng.normal() * weight_scale / std::sqrt(static_cast<double>(width));
  Matrix embeddings(static_cast<std::size_t>(m), static_cast<std::size_t>(rank));
  for (double& v : embeddings.data) v = rng.normal();

  DecoderSpec spec;
  spec.fully_connected_count = 1;
  spec.layers.push_back({LayerKind::dense, rank, width, n});
  spec.layers.push_back({LayerKind::conv1x1, width, k + 1, 0});
  const std::vector<Matrix> weights = {w1, w2};
  const std::vector<std::vector<double>> biases = {{}, {}};

  double total = 0.0;
  std::vector<double> probs(static_cast<std::size_t>(k + 1));
  for (std::int64_t i = 1; i <= m; ++i) {
    const auto scores = decoder_forward(spec, n, weights, biases, false, embeddings.row(static_cast<std::size_t>(i - 1)));
    for (std::int64_t j = 1; j <= n; ++j) {
      std::span<const double> row(scores.data() + static_cast<std::size_t>(j - 1) * (k + 1),
                                  static_cast<std::size_t>(k + 1));
      auto g = stable_softmax(row);
      for (int kappa = 1; kappa <= k; ++kappa) {
        gt.at(i, j, kappa) = g[static_cast<std::size_t>(kappa)];
        total += g[static_cast<std::size_t>(kappa)];
      }
    }
  }
  for (double& v : gt.p) v /= total;

  if (noiseless) {
    // Concentrate each cell's mass on its most likely rating.
    for (std::int64_t i = 1; i <= m; ++i) {
      for (std::int64_t j = 1; j <= n; ++j) {
        int best = 1;
        double mass = 0.0;
        for (int kappa = 1; kappa <= k; ++kappa) {
          mass += gt.at(i, j, kappa);
          if (gt.at(i, j, kappa) > gt.at(i, j, best)) best = kappa;
        }
        for (int kappa = 1; kappa <= k; ++kappa) gt.at(i, j, kappa) = 0.0;
        gt.at(i, j, best) = mass;
      }
    }
  }
  return gt;
}

namespace {

struct CellSampler {
  std::vector<double> cdf;  // over m*n*k outcomes

  explicit CellSampler(const GroundTruthDistribution& gt) : cdf(gt.p.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < gt.p.size(); ++i) {
      acc += gt.p[i];
      cdf[i] = acc;
    }
    if (!cdf.empty()) cdf.back() = 1.0;
  }

  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform();
    return static_cast<std::size_t>(
        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
  }
};

ObservedDataset make_synthetic_dataset(const GroundTruthDistribution& gt) {
  ObservedDataset ds;
  ds.m = gt.m;
  ds.n = gt.n;
  ds.scale = gt.scale;
  for (std::int64_t u = 0; u < gt.m; ++u) ds.user_ids.push_back("u" + std::to_string(u + 1));
  for (std::int64_t i = 0; i < gt.n; ++i) ds.item_ids.push_back("i" + std::to_string(i + 1));
  return ds;
}

}  // namespace

ObservedDataset sample_duplicate_free(const GroundTruthDistribution& gt, std::int64_t sample_count,
                                      std::uint64_t seed) {
  gt.validate();
  if (sample_count > gt.m * gt.n) {
    throw data_error("duplicate-free sampling needs N <= m*n (" + std::to_string(sample_count) +
                     " > " + std::to_string(gt.m * gt.n) + ")");
  }
  ObservedDataset ds = make_synthetic_dataset(gt);
  CellSampler sampler(gt);
  Rng rng(seed);
  std::unordered_map<std::int64_t, bool> seen;
  while (static_cast<std::int64_t>(ds.triples.size()) < sample_count) {
    const std::size_t flat = sampler.draw(rng);
    const int kappa = static_cast<int>(flat % static_cast<std::size_t>(gt.k)) + 1;
    const std::size_t cell = flat / static_cast<std::size_t>(gt.k);
    const auto j = static_cast<std::int32_t>(cell % static_cast<std::size_t>(gt.n)) + 1;
    const auto i = static_cast<std::int32_t>(cell / static_cast<std::size_t>(gt.n)) + 1;
    const std::int64_t key = (static_cast<std::int64_t>(i) << 32) | j;
    if (seen.emplace(key, true).second) {
      ds.triples.push_back({i, j, kappa});
    }
  }
  ds.finalize();
  return ds;
}

SampledCounts sample_iid_counts(const GroundTruthDistribution& gt, std::int64_t sample_count,
                                std::uint64_t seed) {
  gt.validate();
  SampledCounts out;
  out.sample_count = sample_count;
  out.observed = make_synthetic_dataset(gt);
  out.targets.channels = gt.k + 1;
  out.targets.rows.resize(static_cast<std::size_t>(gt.m));

  CellSampler sampler(gt);
  Rng rng(seed);
  // Slot 0 remembers the first-drawn rating of the cell; slots 1..k count.
  std::unordered_map<std::int64_t, std::vector<std::int32_t>> counts;
  for (std::int64_t s = 0; s < sample_count; ++s) {
    const std::size_t flat = sampler.draw(rng);
    const int kappa = static_cast<int>(flat % static_cast<std::size_t>(gt.k)) + 1;
    const std::size_t cell = flat / static_cast<std::size_t>(gt.k);
    const std::int64_t key = static_cast<std::int64_t>(cell);
    auto [it, inserted] = counts.try_emplace(key);
    if (inserted) {
      it->second.assign(static_cast<std::size_t>(gt.k) + 1, 0);
      it->second[0] = kappa;
    }
    it->second[static_cast<std::size_t>(kappa)]++;
  }

  for (const auto& [cell, per_kappa] : counts) {
    const auto j = static_cast<std::int32_t>(cell % gt.n) + 1;
    const auto i = static_cast<std::int32_t>(cell / gt.n) + 1;
    std::int32_t total = 0;
    for (int kappa = 1; kappa <= gt.k; ++kappa) {
      total += per_kappa[static_cast<std::size_t>(kappa)];
    }
    out.observed.triples.push_back({i, j, per_kappa[0]});
    std::vector<double> target(static_cast<std::size_t>(gt.k) + 1, 0.0);
    target[0] = 1.0 - static_cast<double>(total);
    for (int kappa = 1; kappa <= gt.k; ++kappa) {
      target[static_cast<std::size_t>(kappa)] = per_kappa[static_cast<std::size_t>(kappa)];
    }
    out.targets.rows[static_cast<std::size_t>(i - 1)][j] = std::move(target);
  }
  out.observed.finalize();
  return out;
}

std::vector<TvExperimentRow> tv_recovery_experiment(const TvExperimentConfig& config) {
  std::vector<TvExperimentRow> rows;
  for (std::uint64_t seed : config.seeds) {
    const GroundTruthDistribution gt = synth_generate(config.m, config.n, config.rank, config.k,
                                                      seed, config.noiseless, config.weight_scale);
    std::vector<double> bayes;
    for (std::int64_t count : config.sample_counts) {
      TvExperimentRow row;
      row.sample_count = count;
      row.seed = seed;
      const SampledCounts sampled = sample_iid_counts(gt, count, seed ^ 0x517cc1b727220a95ULL);

      ObservedDataset empty_validation = make_synthetic_dataset(gt);
      empty_validation.finalize();

      TrainConfig tc = config.train;
      tc.seed = seed * 1000003ULL + static_cast<std::uint64_t>(count);
      TrainState state;
      try {
        state = train(tc, sampled.observed, empty_validation,
                      config.count_weighted ? &sampled.targets : nullptr);
      } catch (const numeric_error&) {
        row.diverged = true;
        rows.push_back(row);
        continue;
      }

      // Probability tensor of the trained model over all users.
      const std::size_t row_len = static_cast<std::size_t>(gt.k) + 1;
      std::vector<double> probs(static_cast<std::size_t>(gt.m) * static_cast<std::size_t>(gt.n) *
                                row_len);
      std::vector<double> rating(static_cast<std::size_t>(gt.m) * static_cast<std::size_t>(gt.n));
      for (std::int32_t u = 1; u <= gt.m; ++u) {
        ForwardOutput out = forward(state.params, sampled.observed.user_slice(u));
        std::copy(out.probabilities.data.begin(), out.probabilities.data.end(),
                  probs.begin() + static_cast<std::size_t>(u - 1) * static_cast<std::size_t>(gt.n) *
                                      row_len);
        std::copy(out.predicted_rating.begin(), out.predicted_rating.end(),
                  rating.begin() + static_cast<std::size_t>(u - 1) * static_cast<std::size_t>(gt.n));
      }

      // Normalize the rating channels into a joint distribution.
      double g_total = 0.0;
      for (std::size_t cell = 0; cell < rating.size(); ++cell) {
        for (std::size_t kappa = 1; kappa < row_len; ++kappa) g_total += probs[cell * row_len + kappa];
      }
      std::vector<double> recovered(gt.p.size());
      for (std::size_t cell = 0; cell < rating.size(); ++cell) {
        for (std::size_t kappa = 1; kappa < row_len; ++kappa) {
          recovered[cell * static_cast<std::size_t>(gt.k) + (kappa - 1)] =
              probs[cell * row_len + kappa] / g_total;
        }
      }
      row.tv_joint = tv_distance(recovered, gt.p);

      std::vector<double> marg_p(rating.size(), 0.0), marg_q(rating.size(), 0.0);
      for (std::size_t cell = 0; cell < rating.size(); ++cell) {
        for (int kappa = 0; kappa < gt.k; ++kappa) {
          marg_p[cell] += gt.p[cell * static_cast<std::size_t>(gt.k) + static_cast<std::size_t>(kappa)];
          marg_q[cell] += recovered[cell * static_cast<std::size_t>(gt.k) + static_cast<std::size_t>(kappa)];
        }
      }
      row.tv_marginal = tv_distance(marg_p, marg_q);

      // Population MSE of the hard rating prediction.
      double mse = 0.0;
      for (std::int64_t i = 1; i <= gt.m; ++i) {
        for (std::int64_t j = 1; j <= gt.n; ++j) {
          for (int kappa = 1; kappa <= gt.k; ++kappa) {
            const double p = gt.at(i, j, kappa);
            if (p > 0.0) {
              const double err = gt.scale.value(kappa) -
                                 rating[static_cast<std::size_t>(i - 1) * static_cast<std::size_t>(gt.n) +
                                        static_cast<std::size_t>(j - 1)];
              mse += p * err * err;
            }
          }
        }
      }
      // The cell marginals sum to 1, so this is already the expectation.
      row.mse = mse;

      // Excess population loss relative to the Bayes output when it exists.
      row.excess_loss = std::nan("");
      try {
        if (bayes.empty() || true) bayes = bayes_optimal_output(gt, count);
        const double bayes_loss = implicit_loss_population(bayes, gt, count);
        const double model_loss = implicit_loss_population(probs, gt, count);
        row.excess_loss = model_loss - bayes_loss;
      } catch (const error&) {
        // Bayes output invalid for this N: precondition 1/N >= cell mass fails.
      }

      BoundInputs in = measure_bound_inputs(state.params, sampled.observed, count, 0.05);
      row.tv_budget = bound_tv_budget(in);
      rows.push_back(row);
    }
  }
  return rows;
}

void write_tv_table(const std::string& path, const TvExperimentConfig& config,
                    const std::vector<TvExperimentRow>& rows) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write tv table: " + path);
  std::fprintf(f.get(), "#tv-recovery m=%lld n=%lld rank=%d k=%d noiseless=%d weight_scale=%.17g\n",
               static_cast<long long>(config.m), static_cast<long long>(config.n), config.rank,
               config.k, config.noiseless ? 1 : 0, config.weight_scale);
  std::fprintf(f.get(),
               "#sampling=iid; duplicate draws of a cell keep the first rating (%s objective)\n",
               config.count_weighted ? "count-weighted" : "one-hot");
  std::fprintf(f.get(), "#N\tseed\ttv_joint\ttv_marginal\tmse\texcess_loss\ttv_budget\tdiverged\n");
  for (const TvExperimentRow& r : rows) {
    std::fprintf(f.get(), "%lld\t%llu\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%d\n",
                 static_cast<long long>(r.sample_count),
                 static_cast<unsigned long long>(r.seed), r.tv_joint, r.tv_marginal, r.mse,
                 r.excess_loss, r.tv_budget, r.diverged ? 1 : 0);
  }
}

void write_bound_report(const std::string& path, const BoundInputs& in) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write bound report: " + path);
  std::fprintf(f.get(), "#input\tvalue\n");
  std::fprintf(f.get(), "span\t%.17g\n", in.span);
  std::fprintf(f.get(), "beta\t%.17g\n", in.beta);
  std::fprintf(f.get(), "nu\t%.17g\n", in.nu);
  std::fprintf(f.get(), "chi\t%.17g\n", in.chi);
  std::fprintf(f.get(), "delta\t%.17g\n", in.delta);
  std::fprintf(f.get(), "score_bound\t%.17g\n", in.score_bound);
  std::fprintf(f.get(), "sample_count\t%lld\n", static_cast<long long>(in.sample_count));
  std::fprintf(f.get(), "users\t%lld\n", static_cast<long long>(in.user_count));
  std::fprintf(f.get(), "items\t%lld\n", static_cast<long long>(in.item_count));
  std::fprintf(f.get(), "bottleneck\t%lld\n", static_cast<long long>(in.bottleneck));
  std::fprintf(f.get(), "decoder_params\t%lld\n", static_cast<long long>(in.decoder_params));
  std::fprintf(f.get(), "depth\t%d\n", in.depth);
  for (std::size_t l = 0; l < in.group_distance.size(); ++l) {
    std::fprintf(f.get(), "a_%zu\t%.17g\n", l + 1, in.group_distance[l]);
  }
  for (std::size_t l = 0; l < in.operator_norm.size(); ++l) {
    std::fprintf(f.get(), "s_%zu\t%.17g\n", l + 1, in.operator_norm[l]);
  }
  std::fprintf(f.get(), "#bound\tvalue\n");
  std::fprintf(f.get(), "param_count_bound\t%.17g\n", bound_param_count(in));
  std::fprintf(f.get(), "norm_based_bound\t%.17g\n", bound_norm_based(in));
  std::fprintf(f.get(), "tv_budget_up_to_unstated_constant\t%.17g\n", bound_tv_budget(in));
}

}  // namespace convrec
