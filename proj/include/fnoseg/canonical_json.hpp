#pragma once

#include <string>

#include "json.hpp"

namespace fnoseg {

using Json = nlohmann::json;

/// Sorted keys, two-space indent, shortest round-trip float formatting.
inline std::string canonical_dump(const Json& j) { return j.dump(2) + "\n"; }

}  // namespace fnoseg
