#ifndef CONVREC_NUMERICS_HPP_
#define CONVREC_NUMERICS_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace convrec {

// Dense row-major matrix of doubles. All exported operations keep entries finite.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  std::size_t size() const { return data.size(); }
  void fill(double v) { data.assign(rows * cols, v); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

Matrix matmul(const Matrix& a, const Matrix& b);

// y = W x and y = W^T x for row-major W.
void gemv(const Matrix& w, std::span<const double> x, std::span<double> y);
void gemv_transposed(const Matrix& w, std::span<const double> x, std::span<double> y);

// W += alpha * (x outer y), with x matching rows and y matching cols.
void add_outer(Matrix& w, double alpha, std::span<const double> x, std::span<const double> y);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

// Max-subtraction softmax; rejects empty input. Output sums to 1 within 1e-12.
std::vector<double> stable_softmax(std::span<const double> scores);
void stable_softmax_in_place(std::span<double> scores);

// Largest singular value via power iteration on W^T W with a deterministic
// seeded start; relative tolerance `tol`, capped at 10^4 iterations with
// deterministic restarts. All-zero input returns 0.
double spectral_norm(const Matrix& w, double tol = 1e-10);

// xoshiro256++ seeded through splitmix64. Identical seeds replay bit-exactly
// on every platform, which std::<random> distributions do not guarantee.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);
  // Box-Muller; caches the spare draw.
  double normal();
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Nesterov-accelerated Adam on a flat parameter vector.
struct NadamConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct NadamState {
  NadamConfig cfg;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step = 0;

  NadamState() = default;
  NadamState(NadamConfig c, std::size_t n)
      : cfg(c), first_moment(n, 0.0), second_moment(n, 0.0) {}
};

// One update; params and grads must match the state's length.
void nadam_step(NadamState& state, std::span<double> params, std::span<const double> grads);

}  // namespace convrec

#endif  // CONVREC_NUMERICS_HPP_
