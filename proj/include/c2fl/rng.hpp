#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace c2fl {

/// splitmix64 finalizer. Used to expand one master seed into independent
/// streams: derive_seed(master, {tag, round, client}) etc.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

/// 64-bit FNV-1a; stable string hash for keying seeds by class name.
std::uint64_t fnv1a(std::string_view text);

/// Seeded generator with portable derived distributions.
///
/// The raw engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The standard's distribution classes are not (their algorithms
/// are implementation-defined), so uniform/normal/gamma/shuffle are
/// implemented here to keep partitions reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();

  /// Unbiased integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal (Box-Muller, second variate cached).
  double normal();

  /// Gamma(shape, 1) by Marsaglia-Tsang; shape < 1 uses the U^(1/a) boost.
  double gamma(double shape);

  /// Symmetric Dirichlet(alpha * 1_k).
  std::vector<double> dirichlet(double alpha, std::size_t k);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// k distinct indices from [0, n), in draw order. k is clamped to n.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace c2fl
