#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace cmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

template <class S>
using VecT = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Forward-mode derivative scalar with a fixed-capacity tangent. A value with
// `n == 0` is a constant; mixed operations treat missing tangent entries as 0.
inline constexpr int kMaxDerivativeDirections = 32;

struct Dual {
  double v = 0.0;
  int n = 0;
  std::array<double, kMaxDerivativeDirections> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)

  double value() const { return v; }

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < o.n; ++i) d[i] += o.d[i];
    if (o.n > n) n = o.n;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < o.n; ++i) d[i] -= o.d[i];
    if (o.n > n) n = o.n;
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    const int nn = n > o.n ? n : o.n;
    for (int i = 0; i < nn; ++i) d[i] = d[i] * o.v + v * o.d[i];
    n = nn;
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const double inv = 1.0 / o.v;
    const double q = v * inv;
    const int nn = n > o.n ? n : o.n;
    for (int i = 0; i < nn; ++i) d[i] = (d[i] - q * o.d[i]) * inv;
    n = nn;
    v = q;
    return *this;
  }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(Dual a, const Dual& b) { return a /= b; }
inline Dual operator+(Dual a, double b) { a.v += b; return a; }
inline Dual operator+(double a, Dual b) { b.v += a; return b; }
inline Dual operator-(Dual a, double b) { a.v -= b; return a; }
inline Dual operator-(double a, const Dual& b) { Dual r = -1.0 * b; r.v += a; return r; }
inline Dual operator*(Dual a, double b) {
  a.v *= b;
  for (int i = 0; i < a.n; ++i) a.d[i] *= b;
  return a;
}
inline Dual operator*(double a, Dual b) { return b * a; }
inline Dual operator/(Dual a, double b) { return a * (1.0 / b); }
inline Dual operator/(double a, const Dual& b) { return Dual(a) / b; }
inline Dual operator-(const Dual& a) { return a * -1.0; }
inline Dual operator+(const Dual& a) { return a; }

inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
inline bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
inline bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
inline bool operator==(const Dual& a, const Dual& b) { return a.v == b.v; }
inline bool operator!=(const Dual& a, const Dual& b) { return a.v != b.v; }

namespace detail {
inline Dual chain(const Dual& a, double value, double slope) {
  Dual r(value);
  r.n = a.n;
  for (int i = 0; i < a.n; ++i) r.d[i] = slope * a.d[i];
  return r;
}
}  // namespace detail

inline Dual sin(const Dual& a) { return detail::chain(a, std::sin(a.v), std::cos(a.v)); }
inline Dual cos(const Dual& a) { return detail::chain(a, std::cos(a.v), -std::sin(a.v)); }
inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.v);
  return detail::chain(a, s, s > 0.0 ? 0.5 / s : 0.0);
}
inline Dual abs(const Dual& a) { return a.v < 0.0 ? -a : a; }
inline Dual exp(const Dual& a) {
  const double e = std::exp(a.v);
  return detail::chain(a, e, e);
}
inline Dual log(const Dual& a) { return detail::chain(a, std::log(a.v), 1.0 / a.v); }
inline bool isfinite(const Dual& a) { return std::isfinite(a.v); }

}  // namespace cmpc

namespace Eigen {
template <>
struct NumTraits<cmpc::Dual> : NumTraits<double> {
  using Real = cmpc::Dual;
  using NonInteger = cmpc::Dual;
  using Nested = cmpc::Dual;
  using Literal = double;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 8,
    MulCost = 16
  };
};
template <typename BinaryOp>
struct ScalarBinaryOpTraits<cmpc::Dual, double, BinaryOp> {
  using ReturnType = cmpc::Dual;
};
template <typename BinaryOp>
struct ScalarBinaryOpTraits<double, cmpc::Dual, BinaryOp> {
  using ReturnType = cmpc::Dual;
};
}  // namespace Eigen

namespace cmpc {

using AD = Dual;

inline double value_of(double v) { return v; }
inline double value_of(const Dual& v) { return v.v; }

template <class S>
Vec values_of(const VecT<S>& v) {
  Vec out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = value_of(v[i]);
  return out;
}

// Seeds `v` as independent variables `offset .. offset+v.size()` out of `total`.
inline VecT<AD> seed(const Vec& v, int offset, int total) {
  if (total > kMaxDerivativeDirections) {
    throw std::invalid_argument("too many derivative directions: " + std::to_string(total));
  }
  VecT<AD> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out[i] = AD(v[i]);
    out[i].n = total;
    out[i].d[offset + i] = 1.0;
  }
  return out;
}

// Rows of d(out)/d(inputs) for an AD vector.
inline Mat jacobian_of(const VecT<AD>& out, int total) {
  Mat J(out.size(), total);
  J.setZero();
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    for (int k = 0; k < out[i].n && k < total; ++k) J(i, k) = out[i].d[k];
  }
  return J;
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace cmpc
