#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddae/autograd.hpp"
#include "ddae/tensor.hpp"

namespace ddae {

struct DDAEConfig {
  int base_channels = 32;
  std::vector<int> channel_multipliers{1, 2, 2};
  int blocks_per_resolution = 1;
  std::vector<int> attention_resolutions{8};
  int image_size = 32;
  int in_channels = 3;
  int time_embed_dim = 128;
  int norm_groups = 32;  // clamped to gcd(norm_groups, channels) per layer

  // Throws ParameterError naming the offending field.
  void validate() const;
  int stages() const { return static_cast<int>(channel_multipliers.size()); }

  // Small desk-scale network: 32 base channels, multipliers 1-2-2,
  // one block per resolution, attention at 8x8, 32x32 input.
  static DDAEConfig desk_default();
  // DDPM CIFAR-10 UNet: 128 channels, 1-2-2-2, two blocks, attention at 16x16.
  static DDAEConfig ddpm_cifar10();
  // DDPM++ as trained by EDM on CIFAR-10: 128 channels, 2-2-2, four blocks.
  static DDAEConfig edm_cifar10();
};

enum class TapPath { down, mid, up };

// One residual-block output (after its attention layer, when present).
struct TapId {
  TapPath path = TapPath::up;
  int stage = 0;       // resolution-stage index, 0 = full resolution
  int block = 0;       // block index within the stage
  int resolution = 0;  // spatial size of the activation

  auto operator<=>(const TapId&) const = default;
  // Stable machine form, e.g. "up.1.0@16".
  std::string key() const;
  static TapId parse(const std::string& key);
};

std::string to_string(TapPath p);

// Network-owned parameter tensor with a stable dotted name.
struct NamedParam {
  std::string name;
  ag::Var var;
};

// DDPM-style UNet epsilon predictor with activation taps after every
// residual block. Forward passes only read weights and may run
// concurrently; training mutates weights and needs exclusive access.
class DDAENetwork {
 public:
  DDAENetwork(DDAEConfig config, std::uint64_t seed);
  DDAENetwork(DDAENetwork&&) noexcept;
  DDAENetwork& operator=(DDAENetwork&&) noexcept;
  ~DDAENetwork();

  DDAENetwork clone() const;

  const DDAEConfig& config() const noexcept { return config_; }
  // Taps in forward order: down blocks, mid blocks, up blocks.
  const std::vector<TapId>& taps() const noexcept { return taps_; }
  int tap_position(const TapId& tap) const;  // throws ContractError if unknown
  int tap_channels(const TapId& tap) const;
  // "k/K (ordinal block@resolution)" with k counted within the tap's path;
  // down and mid taps are prefixed with the path name.
  std::string describe_tap(const TapId& tap) const;

  std::vector<NamedParam>& params() noexcept { return params_; }
  const std::vector<NamedParam>& params() const noexcept { return params_; }
  std::vector<ag::Var> param_vars() const;
  std::size_t parameter_count() const;
  std::uint64_t weight_hash() const;
  void set_requires_grad(bool on);
  ag::Var param(const std::string& name) const;

  struct Output {
    ag::Var eps;                     // null when the pass stopped at a tap
    std::map<int, ag::Var> taps;     // tap position -> activation
  };

  // Differentiable pass. Captures activations at `capture` (tap positions).
  // With `stop_after` the pass ends once that tap is produced.
  Output run(const ag::Var& x, std::span<const int> t, std::span<const int> capture = {},
             std::optional<int> stop_after = std::nullopt) const;

  long forward_calls() const noexcept { return forward_calls_.load(); }

 private:
  struct Impl;
  DDAENetwork() = default;

  DDAEConfig config_;
  std::vector<TapId> taps_;
  std::vector<int> tap_channels_;
  std::vector<NamedParam> params_;
  std::unique_ptr<Impl> impl_;
  mutable std::atomic<long> forward_calls_{0};
};

DDAENetwork build_ddae(const DDAEConfig& config, std::uint64_t seed);

// Inference-only helpers (no tape recorded).
Tensor forward_eps(const DDAENetwork& net, const Tensor& x_t, std::span<const int> t);
struct TapForward {
  Tensor eps;
  Tensor activation;
};
TapForward forward_with_tap(const DDAENetwork& net, const Tensor& x_t, std::span<const int> t, const TapId& tap);

// Global-average-pooled tap activations [N, C] at per-item levels, evaluated
// in chunks of `chunk` images without recording a tape.
Tensor pooled_tap_features(const DDAENetwork& net, const TapId& tap, const Tensor& x, std::span<const int> t,
                           int chunk = 64);

// Sinusoidal timestep features [N, dim].
Tensor timestep_embedding(std::span<const int> t, int dim);

// A network truncated at a tap with its level input fixed. Encoding is the
// global-average-pooled tap activation of the same computation the full
// network performs.
class Encoder {
 public:
  Encoder(DDAENetwork net, TapId tap, int t_fixed);

  const TapId& tap() const noexcept { return tap_; }
  int t_fixed() const noexcept { return t_fixed_; }
  int feature_dim() const;
  DDAENetwork& network() noexcept { return net_; }
  const DDAENetwork& network() const noexcept { return net_; }

  // Differentiable pooled features [N, C] at an explicit level per item.
  ag::Var features(const ag::Var& x, std::span<const int> t) const;
  // Pooled features at the fixed level, no tape.
  Tensor encode(const Tensor& x) const;
  // Pooled features at per-item levels, no tape.
  Tensor encode_at(const Tensor& x, std::span<const int> t) const;

 private:
  DDAENetwork net_;
  TapId tap_;
  int tap_pos_;
  int t_fixed_;
};

Encoder truncate(const DDAENetwork& net, const TapId& tap, int t_fixed);

}  // namespace ddae
