#pragma once

// Dense linear algebra, the temperature similarity kernel, Adam with a
// cosine-annealed learning rate and a central-difference gradient checker.
// All training math runs in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metaper/error.hpp"

namespace metaper {

using Vector = std::vector<double>;

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kShapeMismatch, "dot: sizes " + std::to_string(a.size()) +
                                               " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline constexpr double kZeroNormThreshold = 1e-12;

inline Vector l2_normalize(std::span<const double> v) {
  const double n = norm(v);
  if (!(n >= kZeroNormThreshold)) {
    throw Error(ErrorCode::kZeroVector, "cannot normalize a vector of norm " + std::to_string(n));
  }
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na >= kZeroNormThreshold) || !(nb >= kZeroNormThreshold)) {
    throw Error(ErrorCode::kZeroVector, "cosine of a zero vector");
  }
  return dot(a, b) / (na * nb);
}

/// Gradient of cos(a, b) with respect to a.
inline Vector cosine_grad(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na >= kZeroNormThreshold) || !(nb >= kZeroNormThreshold)) {
    throw Error(ErrorCode::kZeroVector, "cosine gradient of a zero vector");
  }
  const double c = dot(a, b) / (na * nb);
  Vector g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = (b[i] / nb - c * a[i] / na) / na;
  return g;
}

/// d(a, b) = exp(cos(a, b) / temperature).
inline double temp_similarity(std::span<const double> a, std::span<const double> b,
                              double temperature) {
  if (!(temperature > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "temperature must be positive");
  }
  return std::exp(cosine(a, b) / temperature);
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector matvec(const Matrix& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw Error(ErrorCode::kShapeMismatch, "matvec: " + std::to_string(m.rows()) + "x" +
                                               std::to_string(m.cols()) + " times " +
                                               std::to_string(x.size()));
  }
  Vector y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

/// Computes mᵀ·x.
inline Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
  if (m.rows() != x.size()) {
    throw Error(ErrorCode::kShapeMismatch, "matvec_transposed: shape mismatch");
  }
  Vector y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(x[r], m.row(r), y);
  return y;
}

/// m += alpha · u vᵀ
inline void add_outer(Matrix& m, double alpha, std::span<const double> u,
                      std::span<const double> v) {
  if (m.rows() != u.size() || m.cols() != v.size()) {
    throw Error(ErrorCode::kShapeMismatch, "add_outer: shape mismatch");
  }
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(alpha * u[r], v, m.row(r));
}

/// Rounds every entry to the nearest binary32 value.
inline void round_to_f32(std::span<double> v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

/// Solves A x = b by Gaussian elimination with partial pivoting.
/// Throws ShapeMismatch on bad shapes and InvalidArgument when A is singular.
inline Vector solve_linear(Matrix a, Vector b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw Error(ErrorCode::kShapeMismatch, "solve_linear");
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (std::abs(a(pivot, col)) < 1e-13) {
      throw Error(ErrorCode::kInvalidArgument, "solve_linear: singular matrix");
    }
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a(pivot, c), a(col, c));
      std::swap(b[pivot], b[col]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
      b[r] -= f * b[col];
    }
  }
  Vector x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a(i, c) * x[c];
    x[i] = s / a(i, i);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Random streams

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seeded stream of draws. Identical seed and draw sequence give identical
/// outputs on one platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  /// Independent child stream keyed by a tag, unaffected by draw order.
  static RngStream derive(std::uint64_t seed, std::string_view tag) {
    return RngStream(splitmix64(seed ^ fnv1a64(tag)));
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return engine_();
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller on the raw engine keeps the sequence library-independent.
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  /// Uniform in [0, 1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw Error(ErrorCode::kInvalidArgument, "uniform_index(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = 0;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

  /// k distinct indices from [0, n), in draw order. k is clamped to n.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(n - i)]);
    idx.resize(k);
    return idx;
  }

  Vector normal_vector(std::size_t n, double stddev) {
    Vector v(n);
    for (double& x : v) x = normal(0.0, stddev);
    return v;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-5;
};

struct OptimizerState {
  Vector first_moment;
  Vector second_moment;
  std::uint64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(std::size_t n) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

/// One Adam update with decoupled weight decay: θ ← θ − lr·wd·θ, then the
/// bias-corrected Adam step using the gradient evaluated at the original θ.
inline void adam_step(std::span<double> params, std::span<const double> grads,
                      OptimizerState& state, double learning_rate, const AdamConfig& cfg) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw Error(ErrorCode::kShapeMismatch, "adam_step: parameter, gradient and moment sizes differ");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.first_moment[i] = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
    state.second_moment[i] = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.first_moment[i] / bias1;
    const double v_hat = state.second_moment[i] / bias2;
    params[i] -= learning_rate * cfg.weight_decay * params[i];
    params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

/// Cosine annealing from lr_max at step 0 down to 0 at total_steps.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max) {
  if (total_steps <= 0) return lr_max;
  const double s = std::clamp<double>(static_cast<double>(step), 0.0,
                                      static_cast<double>(total_steps));
  return lr_max * 0.5 *
         (1.0 + std::cos(std::numbers::pi * s / static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------
// Gradient checking

using LossFunction = std::function<double(std::span<const double>)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Number of coordinates to probe; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Max over probed coordinates of |g_fd − g_an| / max(1e-8, |g_fd| + |g_an|)
/// with central differences.
inline double finite_diff_check(const LossFunction& loss, std::span<const double> params,
                                std::span<const double> analytic,
                                const GradCheckOptions& opts = {}) {
  if (params.size() != analytic.size()) {
    throw Error(ErrorCode::kShapeMismatch, "finite_diff_check: gradient size differs");
  }
  std::vector<std::size_t> coords;
  if (opts.max_coords == 0 || opts.max_coords >= params.size()) {
    coords.resize(params.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  } else {
    RngStream rng(opts.seed);
    coords = rng.sample_without_replacement(params.size(), opts.max_coords);
  }
  Vector probe(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + opts.epsilon;
    const double up = loss(probe);
    probe[i] = orig - opts.epsilon;
    const double down = loss(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error(ErrorCode::kNonFiniteLoss, "loss is not finite at coordinate " + std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * opts.epsilon);
    const double an = analytic[i];
    const double rel = std::abs(fd - an) / std::max(1e-8, std::abs(fd) + std::abs(an));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace metaper
