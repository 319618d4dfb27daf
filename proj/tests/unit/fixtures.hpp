#pragma once

#include <string>

#include "ddae/backbone.hpp"
#include "ddae/rng.hpp"

namespace ddae::testing {

inline DDAEConfig tiny() {
  DDAEConfig c;
  c.base_channels = 8;
  c.channel_multipliers = {1, 2};
  c.blocks_per_resolution = 1;
  c.attention_resolutions = {4};
  c.image_size = 8;
  c.time_embed_dim = 16;
  c.norm_groups = 4;
  return c;
}

// Zero-initialised output layers would hide most gradients.
inline void randomize_output_layers(DDAENetwork& net, Rng& rng, float scale = 0.2f) {
  for (auto& p : net.params()) {
    const auto& n = p.name;
    if (n.find("conv2") != std::string::npos || n.find("proj_out") != std::string::npos || n.rfind("conv_out", 0) == 0)
      for (auto& v : p.var->value.values()) v = scale * static_cast<float>(rng.normal());
  }
}

}  // namespace ddae::testing
