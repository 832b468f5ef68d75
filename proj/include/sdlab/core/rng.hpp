#pragma once

#include <sdlab/core/types.hpp>

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace sdlab {

/// Deterministic random stream. Every stochastic component owns its own
/// stream so consumption in one place never perturbs draws elsewhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed), seed_mix_(seed ^ 0x6a09e667f3bcc908ULL) {}

  /// Independent child stream; stable for a given (parent seed, tag) pair.
  Rng fork(std::uint64_t tag) const {
    std::uint64_t s = seed_mix_;
    s ^= tag + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
    return Rng(s);
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal() { return normal_(gen_); }
  /// Uniform integer in [0, n).
  int uniform_int(int n) { return std::uniform_int_distribution<int>(0, n - 1)(gen_); }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  bool bernoulli(double p) { return uniform() < p; }

  template <class S>
  VecX<S> normal_vec(Index n) {
    VecX<S> v(n);
    for (Index i = 0; i < n; ++i) v[i] = S(normal_(gen_));
    return v;
  }

  template <class S>
  void fill_normal(Eigen::Ref<VecX<S>> v, double stddev = 1.0) {
    for (Index i = 0; i < v.size(); ++i) v[i] = S(normal_(gen_) * stddev);
  }

  std::string save_state() const {
    std::ostringstream os;
    os << gen_ << '|' << normal_ << '|' << seed_mix_;
    return os.str();
  }

  void restore_state(const std::string& state) {
    std::istringstream is(state);
    char sep1 = 0, sep2 = 0;
    is >> gen_ >> sep1 >> normal_ >> sep2 >> seed_mix_;
    if (is.fail() || sep1 != '|' || sep2 != '|')
      throw std::runtime_error("Rng::restore_state: malformed state string");
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::uint64_t seed_mix_ = 0;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// FNV-1a over a byte string; used to derive stable per-item seeds.
inline std::uint64_t stable_hash64(const std::string& s, std::uint64_t seed = 0) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace sdlab
