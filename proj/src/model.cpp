#include "convrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "convrec/errors.hpp"

namespace convrec {

namespace {

std::int64_t layer_weight_count(const LayerSpec& l) {
  const std::int64_t base = static_cast<std::int64_t>(l.in_width) * l.out_width;
  return l.spatial > 0 ? base * l.spatial : base;
}

std::int64_t layer_bias_count(const LayerSpec& l) {
  // Conv biases are shared across items; the expanding dense layer owns one
  // bias per output unit.
  if (l.spatial > 0 && l.kind == LayerKind::dense) return l.spatial * l.out_width;
  return l.out_width;
}

}  // namespace

std::int64_t EncoderSpec::param_count(bool with_bias) const {
  std::int64_t total = 0;
  for (const LayerSpec& l : layers) {
    total += layer_weight_count(l);
    if (with_bias) total += layer_bias_count(l);
  }
  return total;
}

void EncoderSpec::validate(std::int64_t n, int k) const {
  if (layers.empty()) throw usage_error("encoder spec has no layers");
  if (layers.front().in_width != k + 1) {
    throw usage_error("encoder input width must be k+1");
  }
  bool seen_dense = false;
  for (const LayerSpec& l : layers) {
    if (l.in_width <= 0 || l.out_width <= 0) throw usage_error("layer widths must be positive");
    if (l.kind == LayerKind::conv1x1) {
      if (seen_dense) throw usage_error("encoder conv layers must precede dense layers");
      if (l.spatial != 0) throw usage_error("conv1x1 layers carry no spatial size");
    } else {
      if (!seen_dense && l.spatial != n) {
        throw usage_error("encoder flattening layer must carry spatial size n");
      }
      if (seen_dense && l.spatial != 0) {
        throw usage_error("only the flattening dense layer carries a spatial size");
      }
      seen_dense = true;
    }
  }
  if (!seen_dense) throw usage_error("encoder needs a flattening dense layer");
  for (std::size_t i = 1; i < layers.size(); ++i) {
    if (layers[i].in_width != layers[i - 1].out_width) {
      throw usage_error("encoder layer widths do not chain");
    }
  }
}

std::int64_t DecoderSpec::param_count(bool with_bias) const {
  std::int64_t total = 0;
  for (const LayerSpec& l : layers) {
    total += layer_weight_count(l);
    if (with_bias) total += layer_bias_count(l);
  }
  return total;
}

void DecoderSpec::validate(std::int64_t n, int k) const {
  if (layers.size() < 2) throw usage_error("decoder needs at least 2 layers");
  const int l0 = fully_connected_count;
  if (l0 < 1 || l0 >= depth()) {
    throw usage_error("decoder fully-connected count must be in [1, L-1]");
  }
  if (layers.back().out_width != k + 1) {
    throw usage_error("decoder output width must be k+1");
  }
  for (int i = 0; i < depth(); ++i) {
    const LayerSpec& l = layers[static_cast<std::size_t>(i)];
    if (l.in_width <= 0 || l.out_width <= 0) throw usage_error("layer widths must be positive");
    const bool is_boundary = (i == l0 - 1);
    if (i < l0) {
      if (l.kind != LayerKind::dense) throw usage_error("first L0 decoder layers must be dense");
      if (is_boundary && l.spatial != n) {
        throw usage_error("decoder expanding layer must carry spatial size n");
      }
      if (!is_boundary && l.spatial != 0) {
        throw usage_error("only the expanding dense layer carries a spatial size");
      }
    } else {
      if (l.kind != LayerKind::conv1x1) throw usage_error("decoder layers after L0 must be conv1x1");
      if (l.spatial != 0) throw usage_error("conv1x1 layers carry no spatial size");
    }
    if (i > 0 && l.in_width != layers[static_cast<std::size_t>(i - 1)].out_width) {
      throw usage_error("decoder layer widths do not chain");
    }
  }
}

EncoderSpec default_encoder(std::int64_t n, int k, int conv_width, int r) {
  EncoderSpec spec;
  spec.layers.push_back({LayerKind::conv1x1, k + 1, conv_width, 0});
  spec.layers.push_back({LayerKind::dense, conv_width, r, n});
  return spec;
}

DecoderSpec default_decoder(std::int64_t n, int k, int depth, int r, int conv_width) {
  if (depth < 2) throw usage_error("decoder depth must be at least 2");
  DecoderSpec spec;
  spec.fully_connected_count = 1;
  spec.layers.push_back({LayerKind::dense, r, conv_width, n});
  for (int i = 1; i < depth - 1; ++i) {
    spec.layers.push_back({LayerKind::conv1x1, conv_width, conv_width, 0});
  }
  spec.layers.push_back({LayerKind::conv1x1, conv_width, k + 1, 0});
  return spec;
}

namespace {

Matrix glorot_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix w(rows, cols);
  for (double& v : w.data) v = rng.uniform(-limit, limit);
  return w;
}

}  // namespace

ModelParams init_params(const EncoderSpec& enc, const DecoderSpec& dec, const RatingScale& scale,
                        std::int64_t n, std::uint64_t seed, bool with_bias) {
  scale.validate();
  const int k = scale.rating_count();
  enc.validate(n, k);
  dec.validate(n, k);
  if (enc.bottleneck() != dec.bottleneck()) {
    throw usage_error("encoder bottleneck width must equal decoder input width");
  }

  ModelParams p;
  p.enc_spec = enc;
  p.dec_spec = dec;
  p.scale = scale;
  p.n = n;
  p.with_bias = with_bias;
  p.seed = seed;

  Rng rng(seed);
  for (const LayerSpec& l : enc.layers) {
    if (l.kind == LayerKind::dense && l.spatial > 0) {
      p.enc_w.push_back(glorot_matrix(static_cast<std::size_t>(l.out_width),
                                      static_cast<std::size_t>(l.spatial) *
                                          static_cast<std::size_t>(l.in_width),
                                      rng));
    } else {
      p.enc_w.push_back(glorot_matrix(static_cast<std::size_t>(l.out_width),
                                      static_cast<std::size_t>(l.in_width), rng));
    }
    p.enc_b.emplace_back(with_bias ? static_cast<std::size_t>(layer_bias_count(l)) : 0, 0.0);
  }
  for (const LayerSpec& l : dec.layers) {
    if (l.kind == LayerKind::dense && l.spatial > 0) {
      p.dec_w.push_back(glorot_matrix(static_cast<std::size_t>(l.spatial) *
                                          static_cast<std::size_t>(l.out_width),
                                      static_cast<std::size_t>(l.in_width), rng));
    } else {
      p.dec_w.push_back(glorot_matrix(static_cast<std::size_t>(l.out_width),
                                      static_cast<std::size_t>(l.in_width), rng));
    }
    p.dec_b.emplace_back(with_bias ? static_cast<std::size_t>(layer_bias_count(l)) : 0, 0.0);
  }

  p.enc_w_init = p.enc_w;
  p.dec_w_init = p.dec_w;
  p.enc_b_init = p.enc_b;
  p.dec_b_init = p.dec_b;
  return p;
}

namespace {

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

void apply_relu(std::vector<double>& v) {
  for (double& x : v) x = relu(x);
}

}  // namespace

void forward_trace(const ModelParams& params, const UserSlice& slice, ForwardTrace& trace) {
  const std::int64_t n = params.n;
  const int k1 = params.rating_count() + 1;
  for (const auto& e : slice.entries) {
    if (e.first < 1 || e.first > n) throw usage_error("slice item index out of range");
    if (e.second < 1 || e.second >= k1) throw usage_error("slice rating index out of range");
  }

  const std::size_t enc_count = params.enc_spec.layers.size();
  trace.enc_act.resize(enc_count);

  // First encoder conv consumes one-hot rows: the output row for channel c is
  // just column c of the filter, so precompute one row per channel.
  {
    const LayerSpec& l = params.enc_spec.layers[0];
    if (l.kind != LayerKind::conv1x1 || l.in_width != k1) {
      throw usage_error("first encoder layer must be conv over k+1 channels");
    }
    const Matrix& w = params.enc_w[0];
    const int out = l.out_width;
    std::vector<double> per_channel(static_cast<std::size_t>(k1) * out);
    for (int c = 0; c < k1; ++c) {
      for (int o = 0; o < out; ++o) {
        double v = w(static_cast<std::size_t>(o), static_cast<std::size_t>(c));
        if (params.with_bias) v += params.enc_b[0][static_cast<std::size_t>(o)];
        per_channel[static_cast<std::size_t>(c) * out + o] = relu(v);
      }
    }
    std::vector<double>& act = trace.enc_act[0];
    act.assign(static_cast<std::size_t>(n) * out, 0.0);
    const double* base = per_channel.data();  // channel 0 = unobserved
    for (std::int64_t j = 0; j < n; ++j) {
      std::memcpy(act.data() + static_cast<std::size_t>(j) * out, base,
                  sizeof(double) * static_cast<std::size_t>(out));
    }
    for (const auto& e : slice.entries) {
      std::memcpy(act.data() + static_cast<std::size_t>(e.first - 1) * out,
                  per_channel.data() + static_cast<std::size_t>(e.second) * out,
                  sizeof(double) * static_cast<std::size_t>(out));
    }
  }

  for (std::size_t li = 1; li < enc_count; ++li) {
    const LayerSpec& l = params.enc_spec.layers[li];
    const Matrix& w = params.enc_w[li];
    const std::vector<double>& prev = trace.enc_act[li - 1];
    std::vector<double>& act = trace.enc_act[li];
    if (l.kind == LayerKind::conv1x1) {
      act.assign(static_cast<std::size_t>(n) * l.out_width, 0.0);
      for (std::int64_t j = 0; j < n; ++j) {
        std::span<const double> in(prev.data() + static_cast<std::size_t>(j) * l.in_width,
                                   static_cast<std::size_t>(l.in_width));
        std::span<double> out(act.data() + static_cast<std::size_t>(j) * l.out_width,
                              static_cast<std::size_t>(l.out_width));
        gemv(w, in, out);
        if (params.with_bias) {
          for (int o = 0; o < l.out_width; ++o) out[static_cast<std::size_t>(o)] +=
              params.enc_b[li][static_cast<std::size_t>(o)];
        }
        for (double& x : out) x = relu(x);
      }
    } else {
      act.assign(static_cast<std::size_t>(l.out_width), 0.0);
      gemv(w, prev, act);
      if (params.with_bias) {
        for (std::size_t o = 0; o < act.size(); ++o) act[o] += params.enc_b[li][o];
      }
      apply_relu(act);
    }
  }
  trace.embedding = trace.enc_act.back();

  const std::size_t dec_count = params.dec_spec.layers.size();
  trace.dec_act.resize(dec_count);
  const std::vector<double>* prev = &trace.embedding;
  for (std::size_t li = 0; li < dec_count; ++li) {
    const LayerSpec& l = params.dec_spec.layers[li];
    const Matrix& w = params.dec_w[li];
    std::vector<double>& act = trace.dec_act[li];
    const bool last = (li + 1 == dec_count);
    if (l.kind == LayerKind::dense) {
      act.assign(w.rows, 0.0);
      gemv(w, *prev, act);
      if (params.with_bias) {
        for (std::size_t o = 0; o < act.size(); ++o) act[o] += params.dec_b[li][o];
      }
      if (!last) apply_relu(act);
    } else {
      act.assign(static_cast<std::size_t>(n) * l.out_width, 0.0);
      for (std::int64_t j = 0; j < n; ++j) {
        std::span<const double> in(prev->data() + static_cast<std::size_t>(j) * l.in_width,
                                   static_cast<std::size_t>(l.in_width));
        std::span<double> out(act.data() + static_cast<std::size_t>(j) * l.out_width,
                              static_cast<std::size_t>(l.out_width));
        gemv(w, in, out);
        if (params.with_bias) {
          for (int o = 0; o < l.out_width; ++o) out[static_cast<std::size_t>(o)] +=
              params.dec_b[li][static_cast<std::size_t>(o)];
        }
        if (!last) {
          for (double& x : out) x = relu(x);
        }
      }
    }
    prev = &act;
  }
}

void derive_from_probabilities(const RatingScale& scale, ForwardOutput& out) {
  const int k = scale.rating_count();
  const std::size_t n = out.probabilities.rows;
  out.conditional = Matrix(n, static_cast<std::size_t>(k));
  out.predicted_rating.assign(n, 0.0);
  out.interaction_probability.assign(n, 0.0);
  const double mean_rating = [&] {
    double s = 0;
    for (double v : scale.values) s += v;
    return s / k;
  }();
  for (std::size_t j = 0; j < n; ++j) {
    const double* g = out.probabilities.data.data() + j * static_cast<std::size_t>(k + 1);
    double tail = 0.0;
    for (int c = 1; c <= k; ++c) tail += g[c];
    out.interaction_probability[j] = 1.0 - g[0];
    double* cond = out.conditional.data.data() + j * static_cast<std::size_t>(k);
    if (tail <= 0.0) {
      for (int c = 0; c < k; ++c) cond[c] = 1.0 / k;
      out.predicted_rating[j] = mean_rating;
      continue;
    }
    double f = 0.0;
    for (int c = 1; c <= k; ++c) {
      const double p = g[c] / tail;
      cond[c - 1] = p;
      f += scale.value(c) * p;
    }
    out.predicted_rating[j] = f;
  }
}

ForwardOutput forward(const ModelParams& params, const UserSlice& slice) {
  ForwardTrace trace;
  forward_trace(params, slice, trace);

  const std::int64_t n = params.n;
  const int k1 = params.rating_count() + 1;
  ForwardOutput out;
  out.embedding = trace.embedding;
  out.scores = Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(k1));
  out.scores.data = trace.dec_act.back();
  out.probabilities = out.scores;
  for (std::int64_t j = 0; j < n; ++j) {
    stable_softmax_in_place(out.probabilities.row(static_cast<std::size_t>(j)));
  }
  derive_from_probabilities(params.scale, out);
  return out;
}

std::vector<double> decoder_forward(const DecoderSpec& spec, std::int64_t n,
                                    const std::vector<Matrix>& weights,
                                    const std::vector<std::vector<double>>& biases,
                                    bool with_bias, std::span<const double> bottleneck) {
  if (weights.size() != spec.layers.size()) {
    throw usage_error("decoder_forward: weight count does not match spec");
  }
  std::vector<double> cur(bottleneck.begin(), bottleneck.end());
  std::vector<double> next;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    const Matrix& w = weights[li];
    const bool last = (li + 1 == spec.layers.size());
    if (l.kind == LayerKind::dense) {
      next.assign(w.rows, 0.0);
      gemv(w, cur, next);
      if (with_bias) {
        for (std::size_t o = 0; o < next.size(); ++o) next[o] += biases[li][o];
      }
    } else {
      next.assign(static_cast<std::size_t>(n) * l.out_width, 0.0);
      for (std::int64_t j = 0; j < n; ++j) {
        std::span<const double> in(cur.data() + static_cast<std::size_t>(j) * l.in_width,
                                   static_cast<std::size_t>(l.in_width));
        std::span<double> out(next.data() + static_cast<std::size_t>(j) * l.out_width,
                              static_cast<std::size_t>(l.out_width));
        gemv(w, in, out);
        if (with_bias) {
          for (int o = 0; o < l.out_width; ++o) out[static_cast<std::size_t>(o)] +=
              biases[li][static_cast<std::size_t>(o)];
        }
      }
    }
    if (!last) apply_relu(next);
    cur.swap(next);
  }
  return cur;
}

std::vector<double> encoder_forward(const ModelParams& params, const UserSlice& slice) {
  // Shares the full trace path; model sizes keep the extra decoder work cheap.
  ForwardTrace trace;
  forward_trace(params, slice, trace);
  return trace.embedding;
}

bool conditional_identity_check(std::span<const double> score_row) {
  if (score_row.size() < 2) throw usage_error("score row needs at least 2 channels");
  const std::size_t k = score_row.size() - 1;
  auto full = stable_softmax(score_row);
  auto tail_only = stable_softmax(score_row.subspan(1));
  double tail_sum = 0.0;
  for (std::size_t c = 1; c <= k; ++c) tail_sum += full[c];
  if (tail_sum <= 0.0) return false;
  for (std::size_t c = 1; c <= k; ++c) {
    if (std::abs(full[c] / tail_sum - tail_only[c - 1]) > 1e-12) return false;
  }
  return true;
}

double embedding_norm_max(const ModelParams& params, const ObservedDataset& train) {
  double best = 0.0;
  for (std::int32_t u = 1; u <= train.m; ++u) {
    const auto emb = encoder_forward(params, train.user_slice(u));
    best = std::max(best, norm2(emb));
  }
  return best;
}

namespace {

constexpr char kMagic[9] = "CVRMDL01";

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void write_bytes(std::FILE* f, const void* p, std::size_t bytes) {
  if (std::fwrite(p, 1, bytes, f) != bytes) throw data_error("checkpoint write failed");
}

void read_bytes(std::FILE* f, void* p, std::size_t bytes) {
  if (std::fread(p, 1, bytes, f) != bytes) throw data_error("checkpoint truncated");
}

void write_u64(std::FILE* f, std::uint64_t v) { write_bytes(f, &v, 8); }
void write_i64(std::FILE* f, std::int64_t v) { write_bytes(f, &v, 8); }
void write_i32(std::FILE* f, std::int32_t v) { write_bytes(f, &v, 4); }
void write_f64(std::FILE* f, double v) { write_bytes(f, &v, 8); }

std::uint64_t read_u64(std::FILE* f) {
  std::uint64_t v;
  read_bytes(f, &v, 8);
  return v;
}
std::int64_t read_i64(std::FILE* f) {
  std::int64_t v;
  read_bytes(f, &v, 8);
  return v;
}
std::int32_t read_i32(std::FILE* f) {
  std::int32_t v;
  read_bytes(f, &v, 4);
  return v;
}
double read_f64(std::FILE* f) {
  double v;
  read_bytes(f, &v, 8);
  return v;
}

void write_layers(std::FILE* f, const std::vector<LayerSpec>& layers) {
  write_i32(f, static_cast<std::int32_t>(layers.size()));
  for (const LayerSpec& l : layers) {
    write_i32(f, l.kind == LayerKind::dense ? 1 : 0);
    write_i32(f, l.in_width);
    write_i32(f, l.out_width);
    write_i64(f, l.spatial);
  }
}

std::vector<LayerSpec> read_layers(std::FILE* f) {
  const std::int32_t count = read_i32(f);
  if (count < 0 || count > 1024) throw data_error("checkpoint layer count out of range");
  std::vector<LayerSpec> layers(static_cast<std::size_t>(count));
  for (LayerSpec& l : layers) {
    l.kind = read_i32(f) == 1 ? LayerKind::dense : LayerKind::conv1x1;
    l.in_width = read_i32(f);
    l.out_width = read_i32(f);
    l.spatial = read_i64(f);
  }
  return layers;
}

void write_matrices(std::FILE* f, const std::vector<Matrix>& ws) {
  write_i32(f, static_cast<std::int32_t>(ws.size()));
  for (const Matrix& w : ws) {
    write_i64(f, static_cast<std::int64_t>(w.rows));
    write_i64(f, static_cast<std::int64_t>(w.cols));
    write_bytes(f, w.data.data(), w.data.size() * sizeof(double));
  }
}

std::vector<Matrix> read_matrices(std::FILE* f) {
  const std::int32_t count = read_i32(f);
  if (count < 0 || count > 1024) throw data_error("checkpoint tensor count out of range");
  std::vector<Matrix> ws(static_cast<std::size_t>(count));
  for (Matrix& w : ws) {
    const std::int64_t r = read_i64(f);
    const std::int64_t c = read_i64(f);
    if (r < 0 || c < 0 || r * c > (1LL << 32)) throw data_error("checkpoint tensor too large");
    w = Matrix(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    read_bytes(f, w.data.data(), w.data.size() * sizeof(double));
  }
  return ws;
}

void write_vectors(std::FILE* f, const std::vector<std::vector<double>>& vs) {
  write_i32(f, static_cast<std::int32_t>(vs.size()));
  for (const auto& v : vs) {
    write_i64(f, static_cast<std::int64_t>(v.size()));
    write_bytes(f, v.data(), v.size() * sizeof(double));
  }
}

std::vector<std::vector<double>> read_vectors(std::FILE* f) {
  const std::int32_t count = read_i32(f);
  if (count < 0 || count > 1024) throw data_error("checkpoint vector count out of range");
  std::vector<std::vector<double>> vs(static_cast<std::size_t>(count));
  for (auto& v : vs) {
    const std::int64_t len = read_i64(f);
    if (len < 0 || len > (1LL << 32)) throw data_error("checkpoint vector too large");
    v.assign(static_cast<std::size_t>(len), 0.0);
    read_bytes(f, v.data(), v.size() * sizeof(double));
  }
  return vs;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write checkpoint: " + path);
  write_bytes(f.get(), kMagic, 8);
  write_i32(f.get(), params.with_bias ? 1 : 0);
  write_u64(f.get(), params.seed);
  write_i64(f.get(), params.n);
  write_i32(f.get(), params.scale.rating_count());
  for (double v : params.scale.values) write_f64(f.get(), v);
  write_layers(f.get(), params.enc_spec.layers);
  write_layers(f.get(), params.dec_spec.layers);
  write_i32(f.get(), params.dec_spec.fully_connected_count);
  write_matrices(f.get(), params.enc_w);
  write_matrices(f.get(), params.dec_w);
  write_matrices(f.get(), params.enc_w_init);
  write_matrices(f.get(), params.dec_w_init);
  write_vectors(f.get(), params.enc_b);
  write_vectors(f.get(), params.dec_b);
  write_vectors(f.get(), params.enc_b_init);
  write_vectors(f.get(), params.dec_b_init);
}

ModelParams load_checkpoint(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw data_error("cannot open checkpoint: " + path);
  char magic[8];
  read_bytes(f.get(), magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw data_error("not a convrec checkpoint: " + path);

  ModelParams p;
  p.with_bias = read_i32(f.get()) == 1;
  p.seed = read_u64(f.get());
  p.n = read_i64(f.get());
  const std::int32_t k = read_i32(f.get());
  if (k < 0 || k > 100000) throw data_error("checkpoint rating count out of range");
  p.scale.values.resize(static_cast<std::size_t>(k));
  for (double& v : p.scale.values) v = read_f64(f.get());
  p.enc_spec.layers = read_layers(f.get());
  p.dec_spec.layers = read_layers(f.get());
  p.dec_spec.fully_connected_count = read_i32(f.get());
  p.enc_w = read_matrices(f.get());
  p.dec_w = read_matrices(f.get());
  p.enc_w_init = read_matrices(f.get());
  p.dec_w_init = read_matrices(f.get());
  p.enc_b = read_vectors(f.get());
  p.dec_b = read_vectors(f.get());
  p.enc_b_init = read_vectors(f.get());
  p.dec_b_init = read_vectors(f.get());

  p.scale.validate();
  p.enc_spec.validate(p.n, k);
  p.dec_spec.validate(p.n, k);
  return p;
}

}  // namespace convrec
