#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

namespace snmm {

// Deterministic, platform-independent random streams. Standard-library
// distributions are implementation defined, so all sampling here is done
// with explicit arithmetic on raw 64-bit words: identical seeds produce
// identical draws on any conforming compiler.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256++ with splitmix-expanded seeding.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}

  // Stream (seed, index): independent substreams for parallel work units.
  RngStream(std::uint64_t seed, std::uint64_t stream_index) {
    std::uint64_t sm = seed ^ (0x6a09e667f3bcc909ULL + stream_index * 0x3c6ef372fe94f82bULL);
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform on (0,1); never returns 0 or 1.
  double uniform() {
    const std::uint64_t bits = next_u64() >> 11;  // 53 bits
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  // Box-Muller without caching: a fixed two-uniform cost per draw keeps the
  // consumption pattern independent of call interleaving.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z(i) = normal();
    return z;
  }

  // Draw from N(mean, L L^T) given the lower Cholesky factor L.
  Eigen::VectorXd mvn(const Eigen::VectorXd& mean, const Eigen::MatrixXd& chol_lower) {
    return mean + chol_lower * normal_vector(mean.size());
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

}  // namespace snmm
