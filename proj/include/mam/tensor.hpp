#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mam {

using Shape = std::vector<int>;

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline long long numel_of(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major array of reals. Values are plain data; all ops that
// consume a Tensor leave it untouched.
template <class T>
struct TensorT {
  Shape shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), T(0)) {}
  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    check(static_cast<long long>(data.size()) == numel_of(shape),
          "tensor: data size does not match shape " + shape_str(shape));
  }

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static TensorT ones(Shape s) { return full(std::move(s), T(1)); }
  static TensorT scalar(T v) { return TensorT({1}, {v}); }
  static TensorT from(Shape s, std::initializer_list<T> vals) {
    return TensorT(std::move(s), std::vector<T>(vals));
  }

  long long numel() const { return static_cast<long long>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    if (shape.size() < 2) return 1;
    int c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
  }

  T& operator[](long long i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](long long i) const { return data[static_cast<size_t>(i)]; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  T& at3(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  const T& at3(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out(shape);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<double>;

// ---------------------------------------------------------------------------
// Deterministic RNG: splitmix64 core, explicit distributions. No dependence on
// libstdc++ distribution internals so seeded runs reproduce bit-exactly.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1) with 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller, cosine branch only; u clamped away from 0
    double u = uniform();
    double v = uniform();
    if (u < 1e-300) u = 1e-300;
    return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586 * v);
  }

  int randint(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  // Independent stream derived from this seed; does not disturb this state.
  Rng fork(uint64_t stream) const { return Rng(state_ ^ (0xa0761d6478bd642full * (stream + 1))); }

 private:
  uint64_t state_;
};

template <class T>
TensorT<T> rand_uniform(Rng& rng, Shape s, double lo, double hi) {
  TensorT<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
TensorT<T> rand_normal(Rng& rng, Shape s, double stddev = 1.0) {
  TensorT<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

// ---------------------------------------------------------------------------
// Plain dense kernels shared by the inference path and the autodiff tape.
// ---------------------------------------------------------------------------

// (m,k) x (k,n) -> (m,n)
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2-D");
  check(a.shape[1] == b.shape[0], "matmul: inner dims " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0] ? b.shape[1] : 0;
  TensorT<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data.data() + static_cast<size_t>(i) * k;
    T* orow = out.data.data() + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b.data.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// (m,k) x (n,k)^T -> (m,n)
template <class T>
TensorT<T> matmul_bt(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul_bt: operands must be 2-D");
  check(a.shape[1] == b.shape[1], "matmul_bt: inner dims " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  TensorT<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data.data() + static_cast<size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b.data.data() + static_cast<size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

// y = x W + b applied row-wise; b may be empty to skip the bias
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  TensorT<T> y = matmul(x, w);
  if (b.numel() > 0) {
    check(b.numel() == y.shape[1], "linear: bias length vs output dim");
    for (int i = 0; i < y.shape[0]; ++i)
      for (int j = 0; j < y.shape[1]; ++j) y.at(i, j) += b[j];
  }
  return y;
}

// ---------------------------------------------------------------------------
// Scalar activations. Stable forms; the softplus branch point follows the
// convention used throughout: x > 20 switches to x + log1p(exp(-x)).
// ---------------------------------------------------------------------------
inline double sigmoid_s(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double softplus_s(double x) {
  if (x > 20.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}
inline double silu_s(double x) { return x * sigmoid_s(x); }
inline double gelu_s(double x) {
  // tanh approximation
  const double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

enum class Act : uint8_t { Silu, Softplus, Exp, Tanh };

inline double apply_act(Act a, double x) {
  switch (a) {
    case Act::Silu: return silu_s(x);
    case Act::Softplus: return softplus_s(x);
    case Act::Exp: return std::exp(x);
    case Act::Tanh: return std::tanh(x);
  }
  return 0;
}

inline double act_grad(Act a, double x, double y) {
  switch (a) {
    case Act::Silu: {
      const double s = sigmoid_s(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Act::Softplus: return sigmoid_s(x);
    case Act::Exp: return y;  // y = exp(x)
    case Act::Tanh: return 1.0 - y * y;
  }
  return 0;
}

inline Act act_from_name(const std::string& name) {
  if (name == "silu") return Act::Silu;
  if (name == "softplus") return Act::Softplus;
  if (name == "exp") return Act::Exp;
  if (name == "tanh") return Act::Tanh;
  throw std::invalid_argument("pointwise: unknown activation '" + name + "'");
}

template <class T>
TensorT<T> pointwise(Act a, const TensorT<T>& x) {
  TensorT<T> y(x.shape);
  for (long long i = 0; i < x.numel(); ++i)
    y[i] = static_cast<T>(apply_act(a, static_cast<double>(x[i])));
  return y;
}

template <class T>
TensorT<T> pointwise(const std::string& name, const TensorT<T>& x) {
  return pointwise(act_from_name(name), x);
}

constexpr double kLayerNormEps = 1e-5;

// Normalizes over the last axis, then applies the affine scale/offset.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& offset) {
  check(x.ndim() >= 1, "layer_norm: rank");
  const int d = x.shape.back();
  check(scale.numel() == d && offset.numel() == d, "layer_norm: scale/offset length vs feature dim");
  const long long n_tok = x.numel() / d;
  TensorT<T> y(x.shape);
  for (long long t = 0; t < n_tok; ++t) {
    const T* row = x.data.data() + t * d;
    T* out = y.data.data() + t * d;
    double mu = 0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < d; ++j)
      out[j] = static_cast<T>((row[j] - mu) * rstd * static_cast<double>(scale[j]) +
                              static_cast<double>(offset[j]));
  }
  return y;
}

template <class T>
TensorT<T> flip_rows(const TensorT<T>& x) {
  TensorT<T> y(x.shape);
  const int r = x.rows(), c = x.cols();
  for (int i = 0; i < r; ++i)
    std::copy(x.data.begin() + static_cast<size_t>(i) * c,
              x.data.begin() + static_cast<size_t>(i + 1) * c,
              y.data.begin() + static_cast<size_t>(r - 1 - i) * c);
  return y;
}

template <class T>
int argmax_row(const TensorT<T>& x, int row) {
  const int c = x.shape[1];
  int best = 0;
  for (int j = 1; j < c; ++j)
    if (x.at(row, j) > x.at(row, best)) best = j;
  return best;
}

}  // namespace mam
