#pragma once

#include <algorithm>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace dudotrans {

/// Throws std::invalid_argument naming the first key of object `j` that is not
/// in `allowed`, or if `j` is not an object.
inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    const bool known =
        std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; });
    if (!known) throw std::invalid_argument(where + ": unknown key \"" + item.key() + "\"");
  }
}

}  // namespace dudotrans
