#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace pefnet {

/// Flat `key = value` text with `#` comments. Later keys override earlier ones.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& kv);

std::vector<int> parse_int_list(std::string_view text);
std::string format_int_list(const std::vector<int>& values);

}  // namespace pefnet
