#pragma once

#include <string>
#include <vector>

#include "ccis/util/toml.hpp"

namespace ccis::cli {

// Resolved configuration tree: defaults < config file < CLI overrides. The
// canonical TOML emission of the resolved table is hashed and snapshotted into
// every run directory, so artifacts can name the exact config that made them.
class RunConfig {
  public:
    static TomlTable defaults();

    static RunConfig resolve(const std::string& config_path,
                             const std::vector<std::string>& overrides);

    int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::string get_str(const std::string& key) const;
    bool has(const std::string& key) const { return table_.count(key) > 0; }
    void set(const std::string& key, TomlValue v) { table_[key] = std::move(v); }

    uint64_t hash() const;
    std::string emit() const;
    void write_snapshot(const std::string& dir) const;

    const TomlTable& table() const { return table_; }

  private:
    TomlTable table_;
};

}  // namespace ccis::cli
