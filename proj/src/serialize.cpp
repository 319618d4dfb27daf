#include "ddae/serialize.hpp"

#include "ddae/error.hpp"

namespace ddae {

void to_json(nlohmann::json& j, const DDAEConfig& c) {
  j = {{"base_channels", c.base_channels},
       {"channel_multipliers", c.channel_multipliers},
       {"blocks_per_resolution", c.blocks_per_resolution},
       {"attention_resolutions", c.attention_resolutions},
       {"image_size", c.image_size},
       {"in_channels", c.in_channels},
       {"time_embed_dim", c.time_embed_dim},
       {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, DDAEConfig& c) {
  DDAEConfig d;
  c.base_channels = j.value("base_channels", d.base_channels);
  c.channel_multipliers = j.value("channel_multipliers", d.channel_multipliers);
  c.blocks_per_resolution = j.value("blocks_per_resolution", d.blocks_per_resolution);
  c.attention_resolutions = j.value("attention_resolutions", d.attention_resolutions);
  c.image_size = j.value("image_size", d.image_size);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.time_embed_dim = j.value("time_embed_dim", d.time_embed_dim);
  c.norm_groups = j.value("norm_groups", d.norm_groups);
}

void to_json(nlohmann::json& j, const TapId& t) { j = t.key(); }

void from_json(const nlohmann::json& j, TapId& t) { t = TapId::parse(j.get<std::string>()); }

std::string to_string(ScheduleKind k) { return k == ScheduleKind::vp ? "vp" : "ve"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "vp" || s == "VP") return ScheduleKind::vp;
  if (s == "ve" || s == "VE") return ScheduleKind::ve;
  throw ParameterError("unknown schedule kind '" + s + "' (expected vp or ve)");
}

}  // namespace ddae
