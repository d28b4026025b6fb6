// Deterministic RNG streams and the variate transforms the samplers use.
// Every draw is a fixed function of (seed, stream, call sequence), so chains
// are bitwise reproducible across runs and machines with IEEE doubles.
#pragma once

#include "swolca/core.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace swolca {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// collapse (seed, stream) into one well-scrambled 64-bit engine seed
inline std::uint64_t mix_seed_stream(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s);
  s ^= 0xD1B54A32D192ED03ULL + stream * 0x9E3779B97F4A7C15ULL;
  h ^= splitmix64(s);
  std::uint64_t t = h;
  return splitmix64(t);
}

}  // namespace detail

// standard normal cdf
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x * 0.7071067811865475244);
}

// log Phi(x) with an asymptotic lower-tail branch to avoid underflow
inline double log_normal_cdf(double x) {
  if (x > -30.0) {
    return std::log(0.5 * std::erfc(-x * 0.7071067811865475244));
  }
  // Mills-ratio expansion: Phi(x) ~ phi(x)/|x| (1 - 1/x^2 + 3/x^4 - 15/x^6)
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
  return -0.5 * x2 - 0.91893853320467274178 - std::log(-x) + std::log(series);
}

inline double log_normal_pdf(double z) {
  return -0.5 * z * z - 0.91893853320467274178;
}

// standard normal quantile, Wichura's rational approximation (double precision)
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw ValidationError("normal_quantile: p must be in (0, 1)");
  const double q = p - 0.5;
  double r, x;
  if (std::fabs(q) <= 0.425) {
    r = 0.180625 - q * q;
    x = q *
        (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
              6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
            1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
          1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
        (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
              3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
            5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
          4.2313330701600911252e1) * r + 1.0);
    return x;
  }
  r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  if (r <= 5.0) {
    r -= 1.6;
    x = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
            3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
          4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
            6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
          2.05319162663775882187e0) * r + 1.0);
  } else {
    r -= 5.0;
    x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
            2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
          5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
              1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
            1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
          5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0.0 ? -x : x;
}

// one reproducible stream of randomness; forks derive independent substreams
class RngState {
 public:
  explicit RngState(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream),
        engine_(detail::mix_seed_stream(seed, stream)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // substream with the same seed but an unrelated engine state; the mixing is
  // injective enough that (stream, substream) collisions are not a concern
  RngState fork(std::uint64_t substream) const {
    return RngState(seed_, detail::mix_seed_stream(stream_ + 1, substream));
  }

  std::uint64_t next_u64() { return engine_(); }

  // uniform on the open interval (0, 1): 53-bit mantissa, offset by half an ulp
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 1.1102230246251565e-16;
  }

  // inverse-cdf draw so the normal stream is an exact function of the uniforms
  double normal() { return normal_quantile(uniform()); }

 private:
  std::uint64_t seed_, stream_;
  std::mt19937_64 engine_;
};

// Marsaglia-Tsang squeeze; shape < 1 is boosted through gamma(shape + 1)
inline double draw_gamma(double shape, RngState& rng) {
  if (!(shape > 0.0)) throw ValidationError("draw_gamma: shape must be > 0");
  if (shape < 1.0) {
    const double g = draw_gamma(shape + 1.0, rng);
    return g * std::pow(rng.uniform(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = rng.normal();
    double t = 1.0 + c * x;
    if (t <= 0.0) continue;
    const double v = t * t * t;
    const double u = rng.uniform();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

// gamma draws normalized to the simplex, floored to keep components positive
// even when tiny concentrations underflow
inline Vector draw_dirichlet(const Vector& alpha, RngState& rng) {
  const int K = static_cast<int>(alpha.size());
  if (K < 1) throw ValidationError("draw_dirichlet: empty concentration");
  Vector g(K);
  for (int k = 0; k < K; ++k) {
    if (!(alpha[k] > 0.0))
      throw ValidationError("draw_dirichlet: concentrations must be > 0");
    g[k] = std::max(draw_gamma(alpha[k], rng), 1e-300);
  }
  return g / g.sum();
}

// returns a 1-based index; p must be nonnegative with a positive sum, it is
// normalized internally
inline int draw_categorical(const Vector& p, RngState& rng) {
  const int d = static_cast<int>(p.size());
  if (d < 1) throw ValidationError("draw_categorical: empty probability vector");
  double total = 0.0;
  for (int i = 0; i < d; ++i) {
    if (!(p[i] >= 0.0) || !std::isfinite(p[i]))
      throw ValidationError("draw_categorical: probabilities must be >= 0");
    total += p[i];
  }
  if (!(total > 0.0))
    throw ValidationError("draw_categorical: probabilities sum to zero");
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (int i = 0; i < d; ++i) {
    acc += p[i];
    if (u <= acc) return i + 1;
  }
  return d;  // guard against accumulated round-off
}

namespace detail {

// Robert's translated-exponential rejection for the upper tail [a, b)
inline double truncnormal_tail(double a, double b, RngState& rng) {
  const double rate = 0.5 * (a + std::sqrt(a * a + 4.0));
  for (;;) {
    const double z = a - std::log(rng.uniform()) / rate;
    if (z >= b) continue;
    const double diff = z - rate;
    if (rng.uniform() <= std::exp(-0.5 * diff * diff)) return z;
  }
}

}  // namespace detail

// unit-variance normal truncated to (lower, upper); bounds may be +-inf
inline double draw_truncnormal(double mean, double lower, double upper,
                               RngState& rng) {
  if (!(lower < upper))
    throw ValidationError("draw_truncnormal: need lower < upper");
  const double a = lower - mean;
  const double b = upper - mean;
  if (a > 5.0) return mean + detail::truncnormal_tail(a, b, rng);
  if (b < -5.0) return mean - detail::truncnormal_tail(-b, -a, rng);
  const double pa = std::isinf(a) ? 0.0 : normal_cdf(a);
  const double pb = std::isinf(b) ? 1.0 : normal_cdf(b);
  const double u = pa + rng.uniform() * (pb - pa);
  // clamp away from {0,1} so the quantile stays finite under round-off
  const double eps = 1e-16;
  return mean + normal_quantile(std::min(std::max(u, eps), 1.0 - eps));
}

inline Vector draw_mvnormal(const Vector& mean, const Matrix& cov,
                            RngState& rng) {
  const int d = static_cast<int>(mean.size());
  if (cov.rows() != d || cov.cols() != d)
    throw ValidationError("draw_mvnormal: dimension mismatch");
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success)
    throw NumericalError("draw_mvnormal: covariance is not positive definite");
  Vector z(d);
  for (int i = 0; i < d; ++i) z[i] = rng.normal();
  return mean + llt.matrixL() * z;
}

// Fisher-Yates shuffle of 1..K
inline std::vector<int> draw_permutation(int K, RngState& rng) {
  if (K < 1) throw ValidationError("draw_permutation: K must be >= 1");
  std::vector<int> perm(K);
  for (int i = 0; i < K; ++i) perm[i] = i + 1;
  for (int i = K - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform() * (i + 1));
    std::swap(perm[i], perm[std::min(j, i)]);
  }
  return perm;
}

}  // namespace swolca
