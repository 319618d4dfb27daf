#pragma once

#include "json.hpp"

#include "ddae/backbone.hpp"
#include "ddae/corruption.hpp"

// JSON conversions for core value types (found by ADL).
namespace ddae {

void to_json(nlohmann::json& j, const DDAEConfig& c);
void from_json(const nlohmann::json& j, DDAEConfig& c);

void to_json(nlohmann::json& j, const TapId& t);
void from_json(const nlohmann::json& j, TapId& t);

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

}  // namespace ddae
