#include "ccis/cli/run_config.hpp"

#include <filesystem>
#include <fstream>

#include "ccis/core/errors.hpp"
#include "ccis/util/hash.hpp"

namespace ccis::cli {

TomlTable RunConfig::defaults() {
    TomlTable t;
    t["dataset.n"] = int64_t(2000);
    t["dataset.size"] = int64_t(64);
    t["dataset.seed"] = int64_t(1);
    t["dataset.out"] = std::string("data");
    t["dataset.captioner"] = std::string("template");

    t["model.T"] = int64_t(1000);
    t["model.beta_start"] = 1e-4;
    t["model.beta_end"] = 0.02;
    t["model.blur_sigma"] = 2.0;

    t["backbone.steps"] = int64_t(10000);
    t["backbone.learning_rate"] = 2e-4;
    t["backbone.batch_size"] = int64_t(4);
    t["backbone.prompt_dropout_p"] = 0.5;
    t["backbone.seed"] = int64_t(11);
    t["backbone.out"] = std::string("runs/backbone");

    t["train.learning_rate"] = 1e-5;
    t["train.batch_size"] = int64_t(4);
    t["train.steps"] = int64_t(10000);
    t["train.prompt_dropout_p"] = 0.5;
    t["train.seed"] = int64_t(42);
    t["train.checkpoint_every"] = int64_t(2000);
    t["train.dataset"] = std::string("");
    t["train.backbone"] = std::string("");
    t["train.output_dir"] = std::string("runs/control");
    t["train.grad_clip"] = false;
    t["train.clip_norm"] = 1.0;

    t["sample.steps"] = int64_t(20);
    t["sample.cfg"] = 7.0;
    t["sample.eta"] = 0.0;
    t["sample.seed"] = int64_t(0);

    t["eval.n_samples"] = int64_t(128);
    t["eval.seed"] = int64_t(7);
    t["eval.extractor"] = std::string("backbone");
    return t;
}

RunConfig RunConfig::resolve(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
    RunConfig rc;
    rc.table_ = defaults();
    if (!config_path.empty()) {
        const auto file = toml_parse_file(config_path);
        for (const auto& [k, v] : file) {
            if (!rc.table_.count(k)) throw ConfigError("unknown config key in file: " + k);
            rc.table_[k] = v;
        }
    }
    for (const auto& kv : overrides) {
        auto [k, v] = toml_parse_override(kv);
        if (!rc.table_.count(k)) throw ConfigError("unknown override key: " + k);
        rc.table_[k] = v;
    }
    return rc;
}

int64_t RunConfig::get_int(const std::string& key) const {
    const auto it = table_.find(key);
    if (it == table_.end()) throw ConfigError("missing config key: " + key);
    if (const auto* v = std::get_if<int64_t>(&it->second)) return *v;
    throw ConfigError("config key " + key + " must be an integer");
}

double RunConfig::get_double(const std::string& key) const {
    const auto it = table_.find(key);
    if (it == table_.end()) throw ConfigError("missing config key: " + key);
    if (const auto* v = std::get_if<double>(&it->second)) return *v;
    if (const auto* v = std::get_if<int64_t>(&it->second)) return static_cast<double>(*v);
    throw ConfigError("config key " + key + " must be a number");
}

bool RunConfig::get_bool(const std::string& key) const {
    const auto it = table_.find(key);
    if (it == table_.end()) throw ConfigError("missing config key: " + key);
    if (const auto* v = std::get_if<bool>(&it->second)) return *v;
    throw ConfigError("config key " + key + " must be a boolean");
}

std::string RunConfig::get_str(const std::string& key) const {
    const auto it = table_.find(key);
    if (it == table_.end()) throw ConfigError("missing config key: " + key);
    if (const auto* v = std::get_if<std::string>(&it->second)) return *v;
    throw ConfigError("config key " + key + " must be a string");
}

std::string RunConfig::emit() const { return toml_emit(table_); }

uint64_t RunConfig::hash() const { return fnv1a64(emit()); }

void RunConfig::write_snapshot(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    const auto path = std::filesystem::path(dir) / "config.toml";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write config snapshot: " + path.string());
    f << "# resolved config, hash " << hash_hex(hash()) << "\n" << emit();
}

}  // namespace ccis::cli
