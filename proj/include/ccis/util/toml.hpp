#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>

namespace ccis {

// Minimal TOML subset: [table] headers (dotted allowed), dotted keys,
// strings / integers / floats / booleans, # comments. That covers every
// config this project reads; nesting beyond dotted keys is not supported.
using TomlValue = std::variant<int64_t, double, bool, std::string>;
using TomlTable = std::map<std::string, TomlValue>;  // keys are full dotted paths

TomlTable toml_parse(const std::string& text);
TomlTable toml_parse_file(const std::string& path);

// Parses "key=value" (value grammar as above) for CLI overrides.
std::pair<std::string, TomlValue> toml_parse_override(const std::string& kv);

// Canonical emission: sorted dotted keys, one per line. Used for config
// snapshots, so equal tables serialize to identical bytes.
std::string toml_emit(const TomlTable& t);

std::string toml_value_str(const TomlValue& v);

}  // namespace ccis
