#include "convrec/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "convrec/errors.hpp"

namespace convrec {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw usage_error("matmul: shape mismatch " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double* orow = out.data.data() + i * b.cols;
    for (std::size_t l = 0; l < a.cols; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b.data.data() + l * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += av * brow[j];
      }
    }
  }
  return out;
}

void gemv(const Matrix& w, std::span<const double> x, std::span<double> y) {
  if (x.size() != w.cols || y.size() != w.rows) {
    throw usage_error("gemv: shape mismatch " + shape_str(w) + " with x[" +
                      std::to_string(x.size()) + "], y[" + std::to_string(y.size()) + "]");
  }
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* row = w.data.data() + i * w.cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

void gemv_transposed(const Matrix& w, std::span<const double> x, std::span<double> y) {
  if (x.size() != w.rows || y.size() != w.cols) {
    throw usage_error("gemv_transposed: shape mismatch " + shape_str(w) + " with x[" +
                      std::to_string(x.size()) + "], y[" + std::to_string(y.size()) + "]");
  }
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* row = w.data.data() + i * w.cols;
    for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * row[j];
  }
}

void add_outer(Matrix& w, double alpha, std::span<const double> x, std::span<const double> y) {
  if (x.size() != w.rows || y.size() != w.cols) {
    throw usage_error("add_outer: shape mismatch");
  }
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double ax = alpha * x[i];
    if (ax == 0.0) continue;
    double* row = w.data.data() + i * w.cols;
    for (std::size_t j = 0; j < w.cols; ++j) row[j] += ax * y[j];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(std::span<const double> v) {
  return std::sqrt(dot(v, v));
}

void stable_softmax_in_place(std::span<double> scores) {
  if (scores.empty()) throw usage_error("softmax: empty score vector");
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double sum = 0.0;
  for (double& s : scores) {
    s = std::exp(s - mx);
    sum += s;
  }
  for (double& s : scores) s /= sum;
}

std::vector<double> stable_softmax(std::span<const double> scores) {
  std::vector<double> out(scores.begin(), scores.end());
  stable_softmax_in_place(out);
  return out;
}

double spectral_norm(const Matrix& w, double tol) {
  if (w.rows == 0 || w.cols == 0) throw usage_error("spectral_norm: empty matrix");
  bool all_zero = true;
  for (double v : w.data) {
    if (v != 0.0) {
      all_zero = false;
      break;
    }
  }
  if (all_zero) return 0.0;

  constexpr int kMaxIters = 10000;
  constexpr int kMaxRestarts = 8;
  Rng rng(0x9d2c5680u ^ (static_cast<std::uint64_t>(w.rows) << 32) ^ w.cols);
  std::vector<double> v(w.cols), u(w.rows), z(w.cols);

  double sigma = 0.0;
  for (int restart = 0; restart < kMaxRestarts; ++restart) {
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    double nv = norm2(v);
    if (nv == 0.0) continue;
    for (double& x : v) x /= nv;

    double prev = -1.0;
    bool dead = false;
    for (int it = 0; it < kMaxIters; ++it) {
      gemv(w, v, u);
      sigma = norm2(u);
      if (sigma == 0.0) {
        dead = true;  // start vector fell in the null space
        break;
      }
      gemv_transposed(w, u, z);
      double nz = norm2(z);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = z[i] / nz;
      if (prev >= 0.0 && std::abs(sigma - prev) <= tol * std::max(sigma, 1e-300)) {
        return sigma;
      }
      prev = sigma;
    }
    if (!dead) return sigma;
  }
  return sigma;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : state_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = radius * std::sin(theta);
  has_spare_ = true;
  return radius * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw usage_error("Rng::below: n must be positive");
  return next_u64() % n;
}

void nadam_step(NadamState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw usage_error("nadam_step: shape mismatch between params, grads and state");
  }
  const double b1 = state.cfg.beta1;
  const double b2 = state.cfg.beta2;
  const double lr = state.cfg.learning_rate;
  const double eps = state.cfg.eps;
  const std::int64_t t = ++state.step;

  const double bc1_t = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc1_t1 = 1.0 - std::pow(b1, static_cast<double>(t + 1));
  const double bc2_t = 1.0 - std::pow(b2, static_cast<double>(t));

  double* m = state.first_moment.data();
  double* v = state.second_moment.data();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double m_hat = m[i] / bc1_t1;
    const double g_hat = g / bc1_t;
    const double v_hat = v[i] / bc2_t;
    params[i] -= lr * (b1 * m_hat + (1.0 - b1) * g_hat) / (std::sqrt(v_hat) + eps);
  }
}

}  // namespace convrec
