#include "convrec/model.hpp"

#include <cmath>

#include "convrec/errors.hpp"
#include "convrec/training.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace convrec;

namespace {

ModelParams small_model(std::int64_t n = 4, int k = 5, int r = 3, int depth = 3, int width = 6,
                        std::uint64_t seed = 17, bool with_bias = false) {
  return init_params(default_encoder(n, k, width, r), default_decoder(n, k, depth, r, width),
                     RatingScale::integers(k), n, seed, with_bias);
}

UserSlice slice_of(std::initializer_list<std::pair<std::int32_t, std::int32_t>> entries) {
  UserSlice s;
  s.user = 1;
  s.entries.assign(entries.begin(), entries.end());
  return s;
}

}  // namespace

TEST_CASE("init is deterministic and snapshots the weights") {
  ModelParams a = small_model();
  ModelParams b = small_model();
  REQUIRE(a.enc_w.size() == b.enc_w.size());
  for (std::size_t t = 0; t < a.enc_w.size(); ++t) CHECK(a.enc_w[t].data == b.enc_w[t].data);
  for (std::size_t t = 0; t < a.dec_w.size(); ++t) CHECK(a.dec_w[t].data == b.dec_w[t].data);

  for (std::size_t t = 0; t < a.enc_w.size(); ++t) CHECK(a.enc_w[t].data == a.enc_w_init[t].data);
  for (std::size_t t = 0; t < a.dec_w.size(); ++t) CHECK(a.dec_w[t].data == a.dec_w_init[t].data);

  ModelParams c = small_model(4, 5, 3, 3, 6, 18);
  CHECK(a.dec_w[0].data != c.dec_w[0].data);
}

TEST_CASE("init weight entries are centered") {
  ModelParams p = small_model(200, 5, 64, 3, 16, 5);
  double sum = 0.0;
  std::int64_t count = 0;
  for (const Matrix& w : p.dec_w) {
    for (double v : w.data) {
      sum += v;
      ++count;
    }
  }
  for (const Matrix& w : p.enc_w) {
    for (double v : w.data) {
      sum += v;
      ++count;
    }
  }
  REQUIRE(count > 100000);
  CHECK(std::abs(sum / static_cast<double>(count)) < 0.01);
}

TEST_CASE("zero decoder weights give uniform probabilities and mid-scale ratings") {
  ModelParams p = small_model();
  for (Matrix& w : p.dec_w) w.fill(0.0);
  ForwardOutput out = forward(p, slice_of({{1, 3}}));
  for (double v : out.probabilities.data) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-13));
  for (double f : out.predicted_rating) CHECK(f == doctest::Approx(3.0).epsilon(1e-13));
  for (double ip : out.interaction_probability) CHECK(ip == doctest::Approx(5.0 / 6.0).epsilon(1e-13));
}

TEST_CASE("conditional distribution and rating match a long-double oracle") {
  // Craft a model whose score row is [0,1,0,0,0,2] on every item: zero all
  // but the final conv layer, then bias the final layer. Bias mode keeps the
  // construction inside the model family.
  ModelParams p = small_model(3, 5, 2, 2, 4, 7, true);
  for (Matrix& w : p.enc_w) w.fill(0.0);
  for (auto& b : p.enc_b) std::fill(b.begin(), b.end(), 0.0);
  for (Matrix& w : p.dec_w) w.fill(0.0);
  for (auto& b : p.dec_b) std::fill(b.begin(), b.end(), 0.0);
  p.dec_b.back() = {0, 1, 0, 0, 0, 2};

  ForwardOutput out = forward(p, slice_of({}));
  const std::vector<double> row = {0, 1, 0, 0, 0, 2};
  const auto full = oracles::softmax_long_double(row);
  const auto tail = oracles::softmax_long_double({1, 0, 0, 0, 2});
  for (int j = 0; j < 3; ++j) {
    for (int c = 0; c <= 5; ++c) {
      CHECK(std::abs(out.probabilities(j, c) - full[static_cast<std::size_t>(c)]) <= 1e-14);
    }
    long double f = 0.0L;
    for (int c = 1; c <= 5; ++c) {
      CHECK(std::abs(out.conditional(j, c - 1) - tail[static_cast<std::size_t>(c - 1)]) <= 1e-13);
      f += static_cast<long double>(c) * tail[static_cast<std::size_t>(c - 1)];
    }
    CHECK(std::abs(out.predicted_rating[static_cast<std::size_t>(j)] - static_cast<double>(f)) <= 1e-13);
  }
}

TEST_CASE("conv layers share weights across items") {
  // The first encoder conv output row j must not change when another item's
  // channel changes.
  ModelParams p = small_model(5, 5, 3, 3, 6, 23);
  ForwardTrace t1, t2;
  forward_trace(p, slice_of({{2, 4}}), t1);
  forward_trace(p, slice_of({{2, 4}, {5, 1}}), t2);
  const int width = p.enc_spec.layers[0].out_width;
  for (int j = 0; j < 4; ++j) {  // rows other than item 5
    for (int c = 0; c < width; ++c) {
      CHECK(t1.enc_act[0][static_cast<std::size_t>(j * width + c)] ==
            t2.enc_act[0][static_cast<std::size_t>(j * width + c)]);
    }
  }
}

TEST_CASE("item permutation equivariance with replicated expansion rows") {
  // Replicate the expanding dense layer's per-item block so the decoder
  // treats items symmetrically; conv layers then act per item and permuting
  // the input must permute the score rows identically.
  const std::int64_t n = 4;
  ModelParams p = small_model(n, 5, 3, 3, 6, 29);
  Matrix& w0 = p.dec_w[0];
  const std::size_t block = w0.rows / static_cast<std::size_t>(n);
  for (std::size_t j = 1; j < static_cast<std::size_t>(n); ++j) {
    for (std::size_t rrow = 0; rrow < block; ++rrow) {
      for (std::size_t c = 0; c < w0.cols; ++c) {
        w0(j * block + rrow, c) = w0(rrow, c);
      }
    }
  }
  // Same must hold for the encoder flatten layer so the embedding ignores
  // item order.
  Matrix& e1 = p.enc_w[1];
  const std::size_t eblock = e1.cols / static_cast<std::size_t>(n);
  for (std::size_t j = 1; j < static_cast<std::size_t>(n); ++j) {
    for (std::size_t rrow = 0; rrow < e1.rows; ++rrow) {
      for (std::size_t c = 0; c < eblock; ++c) {
        e1(rrow, j * eblock + c) = e1(rrow, c);
      }
    }
  }

  ForwardOutput a = forward(p, slice_of({{1, 2}, {3, 5}}));
  // Swap items 1 and 3.
  ForwardOutput b = forward(p, slice_of({{3, 2}, {1, 5}}));
  for (int c = 0; c <= 5; ++c) {
    CHECK(a.scores(0, c) == doctest::Approx(b.scores(2, c)).epsilon(1e-12));
    CHECK(a.scores(2, c) == doctest::Approx(b.scores(0, c)).epsilon(1e-12));
    CHECK(a.scores(1, c) == doctest::Approx(b.scores(1, c)).epsilon(1e-12));
  }
}

TEST_CASE("probability rows are stochastic and ratings stay on the scale") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams p = small_model(6, 5, 4, 3, 6, 1000 + static_cast<std::uint64_t>(trial));
    for (Matrix& w : p.dec_w) {
      for (double& v : w.data) v *= rng.uniform(0.0, 4.0);
    }
    UserSlice s = slice_of({{1, 1}, {4, 5}});
    ForwardOutput out = forward(p, s);
    for (std::size_t j = 0; j < out.probabilities.rows; ++j) {
      double sum = 0;
      for (int c = 0; c <= 5; ++c) sum += out.probabilities(j, c);
      CHECK(std::abs(sum - 1.0) <= 1e-12);
      CHECK(out.predicted_rating[j] >= 1.0);
      CHECK(out.predicted_rating[j] <= 5.0);
    }
  }
}

TEST_CASE("conditional identity holds for symmetric, dominant and random rows") {
  CHECK(conditional_identity_check(std::vector<double>{0, 0, 0, 0, 0, 0}));
  CHECK(conditional_identity_check(std::vector<double>{10, 1, 2, 3, 4, 5}));
  Rng rng(314);
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> row(6);
    for (double& v : row) v = rng.normal() * 3.0;
    CHECK(conditional_identity_check(row));
  }
}

TEST_CASE("prediction-map derivative has L1 norm at most the scale span") {
  // d/dg of sum_k u_k softmax(g)_k, checked by central differences on the
  // rating channels only.
  const RatingScale scale = RatingScale::integers(5);
  const double span = scale.span();
  Rng rng(5150);
  const double h = 1e-6;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> g(5);
    for (double& v : g) v = rng.normal() * 4.0;
    auto value = [&](const std::vector<double>& x) {
      auto p = stable_softmax(x);
      double f = 0;
      for (int c = 0; c < 5; ++c) f += scale.value(c + 1) * p[static_cast<std::size_t>(c)];
      return f;
    };
    double l1 = 0.0;
    for (int c = 0; c < 5; ++c) {
      std::vector<double> hi = g, lo = g;
      hi[static_cast<std::size_t>(c)] += h;
      lo[static_cast<std::size_t>(c)] -= h;
      l1 += std::abs(value(hi) - value(lo)) / (2 * h);
    }
    CHECK(l1 <= span + 1e-9);
  }
}

TEST_CASE("embedding norm max") {
  ObservedDataset data = make_random_dataset(6, 5, 5, 0.4, 2);
  ModelParams p = small_model(5, 5, 3, 3, 6, 77);

  ModelParams zeroed = p;
  for (Matrix& w : zeroed.enc_w) w.fill(0.0);
  CHECK(embedding_norm_max(zeroed, data) == 0.0);

  const double chi = embedding_norm_max(p, data);
  for (std::int32_t u = 1; u <= data.m; ++u) {
    CHECK(chi >= norm2(encoder_forward(p, data.user_slice(u))) - 1e-12);
  }

  // Hand-computable two-item toy: one conv channel copying the observed
  // channel, flatten weights summing everything into a single bottleneck
  // coordinate.
  ModelParams tiny = init_params(default_encoder(2, 2, 1, 1), default_decoder(2, 2, 2, 1, 2),
                                 RatingScale::integers(2), 2, 3, false);
  tiny.enc_w[0].fill(0.0);
  tiny.enc_w[0](0, 1) = 2.0;  // channel "rating 1" -> 2.0
  tiny.enc_w[1].fill(1.0);    // embedding = sum of conv outputs
  ObservedDataset toy;
  toy.m = 1;
  toy.n = 2;
  toy.scale = RatingScale::integers(2);
  toy.user_ids = {"u"};
  toy.item_ids = {"a", "b"};
  toy.triples = {{1, 1, 1}};
  toy.finalize();
  // conv rows: item1 (rating 1) -> 2.0, item2 (unobserved) -> 0; embedding = 2.
  CHECK(embedding_norm_max(tiny, toy) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ModelParams p = small_model(7, 5, 4, 4, 6, 12345, true);
  // Move weights away from init so the snapshot differs.
  for (Matrix& w : p.dec_w) {
    for (double& v : w.data) v += 0.125;
  }
  const std::string path = "/tmp/convrec_test_ckpt.bin";
  save_checkpoint(p, path);
  ModelParams q = load_checkpoint(path);
  CHECK(q.n == p.n);
  CHECK(q.seed == p.seed);
  CHECK(q.with_bias == p.with_bias);
  CHECK(q.scale.values == p.scale.values);
  REQUIRE(q.dec_w.size() == p.dec_w.size());
  for (std::size_t t = 0; t < p.dec_w.size(); ++t) {
    CHECK(q.dec_w[t].data == p.dec_w[t].data);
    CHECK(q.dec_w_init[t].data == p.dec_w_init[t].data);
  }
  for (std::size_t t = 0; t < p.enc_w.size(); ++t) {
    CHECK(q.enc_w[t].data == p.enc_w[t].data);
  }
  for (std::size_t t = 0; t < p.dec_b.size(); ++t) {
    CHECK(q.dec_b[t] == p.dec_b[t]);
  }
  CHECK_THROWS_AS(load_checkpoint("/tmp/definitely_missing_ckpt.bin"), data_error);
}

TEST_CASE("spec validation rejects inconsistent architectures") {
  CHECK_THROWS_AS(init_params(default_encoder(4, 5, 6, 3), default_decoder(4, 5, 3, 2, 6),
                              RatingScale::integers(5), 4, 1, false),
                  usage_error);  // bottleneck mismatch
  DecoderSpec bad = default_decoder(4, 5, 3, 3, 6);
  bad.layers.back().out_width = 4;  // not k+1
  CHECK_THROWS_AS(bad.validate(4, 5), usage_error);
}
