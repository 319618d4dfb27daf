#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "ddae/tensor.hpp"

namespace ddae {

// Seeded generator with a portable normal sampler (Box-Muller on top of
// mt19937_64), so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent substream of `master` keyed by name ("init", "noising", ...).
  static Rng substream(std::uint64_t master, std::string_view name);
  static std::uint64_t derive_seed(std::uint64_t master, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  void fill_normal(Tensor& t);
  Tensor normal_like(const Shape& shape);

  // Text snapshot of the full generator state, including the cached normal.
  std::string serialize() const;
  void deserialize(const std::string& state);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ddae
