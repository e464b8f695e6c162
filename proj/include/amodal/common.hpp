#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

namespace amodal {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Arr = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Matf = Mat<float>;
using Matd = Mat<double>;
using Vecf = Vec<float>;
using Vecd = Vec<double>;

// Error categories map to CLI exit codes (see tools/).
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};
struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG wrapper. Substreams are derived from (seed, stream id) so
// parallel generation of sample k is reproducible regardless of worker layout.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  static Rng substream(std::uint64_t seed, std::uint64_t stream_id) {
    // splitmix64 mix of the pair
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  // uniform integer in [0, n)
  std::int64_t uniform_int(std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(gen_);
  }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

inline bool all_finite(const Matf& m) { return m.allFinite(); }
inline bool all_finite(const Matd& m) { return m.allFinite(); }

// Named loss terms. `total` is always the plain sum of `terms`; any weighting
// (commitment beta, adaptive adversarial lambda) is folded into the stored term.
struct LossBreakdown {
  std::map<std::string, double> terms;
  double total = 0.0;

  void set(const std::string& name, double value) {
    terms[name] = value;
    total = 0.0;
    for (const auto& [k, v] : terms) total += v;
  }
  double term(const std::string& name) const {
    auto it = terms.find(name);
    return it == terms.end() ? 0.0 : it->second;
  }
  bool finite() const {
    if (!std::isfinite(total)) return false;
    for (const auto& [k, v] : terms)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

}  // namespace amodal
