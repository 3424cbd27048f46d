#pragma once

// Training configuration and the flat key/value run-config document used by
// the command-line tool.

#include "attacks.hpp"
#include "data.hpp"
#include "model.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace robad {

struct TrainConfig {
    ModelConfig model;
    double lr = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 30; // cap; early stopping usually ends sooner
    double w_contrastive = 0.1;
    double temperature = 1.0;
    AttackSpec train_attack{};
    bool regenerate_attacks_each_epoch = true;
    std::uint64_t seed = 0;
    std::size_t early_stop_patience = 5;

    void validate() const {
        model.validate();
        if (!(lr > 0.0))
            throw ConfigError("lr", "lr must be positive");
        if (batch_size < 1)
            throw ConfigError("batch_size", "batch_size must be at least 1");
        if (is_adversary_aware(model.variant) && batch_size < 2)
            throw ConfigError("batch_size", "adversary-aware training needs batch_size >= 2");
        if (!(w_contrastive >= 0.0 && w_contrastive <= 1.0))
            throw ConfigError("w_contrastive", "w_contrastive must lie in [0, 1]");
        if (!(temperature > 0.0))
            throw ConfigError("temperature", "temperature must be positive");
        if (train_attack.ngram_order < 1)
            throw ConfigError("ngram_order", "ngram_order must be at least 1");
        if (early_stop_patience < 1)
            throw ConfigError("early_stop_patience", "early_stop_patience must be at least 1");
    }
};

/// Everything one CLI invocation needs besides file paths.
struct RunConfig {
    TrainConfig train;
    PreprocessSettings prep;
    std::size_t folds = 5;
    double val_fraction = 0.1;
    std::vector<AttackKind> attacks{AttackKind::copy_append, AttackKind::foreign_post,
                                    AttackKind::ngram_gen};
    std::uint64_t attack_seed = 0;
    std::size_t jobs = 1;

    void validate() const {
        train.validate();
        if (folds < 2)
            throw ConfigError("folds", "folds must be at least 2");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0))
            throw ConfigError("val_fraction", "val_fraction must lie in [0, 1)");
        if (jobs < 1)
            throw ConfigError("jobs", "jobs must be at least 1");
        if (prep.tokens_per_post != train.model.tokens_per_post ||
            prep.window != train.model.window)
            throw ConfigError("tokens_per_post", "preprocessing and model sizes disagree");
    }
};

namespace detail {

inline std::size_t get_count(const std::string &key, const nlohmann::json &v) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError(key, "\"" + key + "\" must be a non-negative integer");
    return v.get<std::size_t>();
}

inline double get_real(const std::string &key, const nlohmann::json &v) {
    if (!v.is_number())
        throw ConfigError(key, "\"" + key + "\" must be a number");
    return v.get<double>();
}

inline bool get_bool(const std::string &key, const nlohmann::json &v) {
    if (!v.is_boolean())
        throw ConfigError(key, "\"" + key + "\" must be true or false");
    return v.get<bool>();
}

inline std::string get_string(const std::string &key, const nlohmann::json &v) {
    if (!v.is_string())
        throw ConfigError(key, "\"" + key + "\" must be a string");
    return v.get<std::string>();
}

using KeySetter = std::function<void(RunConfig &, const std::string &, const nlohmann::json &)>;

inline const std::map<std::string, KeySetter> &config_keys() {
    static const std::map<std::string, KeySetter> keys = {
        {"lr", [](RunConfig &c, auto &k, auto &v) { c.train.lr = get_real(k, v); }},
        {"batch_size", [](RunConfig &c, auto &k, auto &v) { c.train.batch_size = get_count(k, v); }},
        {"epochs", [](RunConfig &c, auto &k, auto &v) { c.train.epochs = get_count(k, v); }},
        {"w_contrastive",
         [](RunConfig &c, auto &k, auto &v) { c.train.w_contrastive = get_real(k, v); }},
        {"temperature",
         [](RunConfig &c, auto &k, auto &v) { c.train.temperature = get_real(k, v); }},
        {"train_attack",
         [](RunConfig &c, auto &k, auto &v) {
             try {
                 c.train.train_attack.kind = parse_attack_kind(get_string(k, v));
             } catch (const ConfigError &e) {
                 throw ConfigError(k, e.what());
             }
         }},
        {"train_attack_seed",
         [](RunConfig &c, auto &k, auto &v) { c.train.train_attack.seed = get_count(k, v); }},
        {"ngram_order",
         [](RunConfig &c, auto &k, auto &v) { c.train.train_attack.ngram_order = get_count(k, v); }},
        {"regenerate_attacks_each_epoch",
         [](RunConfig &c, auto &k, auto &v) {
             c.train.regenerate_attacks_each_epoch = get_bool(k, v);
         }},
        {"seed", [](RunConfig &c, auto &k, auto &v) { c.train.seed = get_count(k, v); }},
        {"early_stop_patience",
         [](RunConfig &c, auto &k, auto &v) { c.train.early_stop_patience = get_count(k, v); }},
        {"tokens_per_post",
         [](RunConfig &c, auto &k, auto &v) {
             c.train.model.tokens_per_post = c.prep.tokens_per_post = get_count(k, v);
             c.train.train_attack.target_len = c.prep.tokens_per_post;
         }},
        {"window",
         [](RunConfig &c, auto &k, auto &v) {
             c.train.model.window = c.prep.window = get_count(k, v);
         }},
        {"emb_dim", [](RunConfig &c, auto &k, auto &v) { c.train.model.emb_dim = get_count(k, v); }},
        {"heads", [](RunConfig &c, auto &k, auto &v) { c.train.model.heads = get_count(k, v); }},
        {"enc_layers",
         [](RunConfig &c, auto &k, auto &v) { c.train.model.enc_layers = get_count(k, v); }},
        {"dec_layers",
         [](RunConfig &c, auto &k, auto &v) { c.train.model.dec_layers = get_count(k, v); }},
        {"ffn_mult", [](RunConfig &c, auto &k, auto &v) { c.train.model.ffn_mult = get_count(k, v); }},
        {"dropout", [](RunConfig &c, auto &k, auto &v) { c.train.model.dropout = get_real(k, v); }},
        {"variant",
         [](RunConfig &c, auto &k, auto &v) {
             c.train.model.variant = parse_variant(get_string(k, v));
         }},
        {"min_freq", [](RunConfig &c, auto &k, auto &v) { c.prep.min_freq = get_count(k, v); }},
        {"min_post_tokens",
         [](RunConfig &c, auto &k, auto &v) { c.prep.min_post_tokens = get_count(k, v); }},
        {"min_posts", [](RunConfig &c, auto &k, auto &v) { c.prep.min_posts = get_count(k, v); }},
        {"folds", [](RunConfig &c, auto &k, auto &v) { c.folds = get_count(k, v); }},
        {"val_fraction", [](RunConfig &c, auto &k, auto &v) { c.val_fraction = get_real(k, v); }},
        {"attacks",
         [](RunConfig &c, auto &k, auto &v) {
             if (!v.is_array())
                 throw ConfigError(k, "\"attacks\" must be an array of attack names");
             c.attacks.clear();
             for (const auto &a : v) {
                 try {
                     c.attacks.push_back(parse_attack_kind(get_string(k, a)));
                 } catch (const ConfigError &e) {
                     throw ConfigError(k, e.what());
                 }
             }
         }},
        {"attack_seed", [](RunConfig &c, auto &k, auto &v) { c.attack_seed = get_count(k, v); }},
        {"jobs", [](RunConfig &c, auto &k, auto &v) { c.jobs = get_count(k, v); }},
    };
    return keys;
}

} // namespace detail

/// Sets one key; unknown keys and ill-typed values raise ConfigError naming
/// the key. Range checks happen in RunConfig::validate.
inline void apply_config_key(RunConfig &cfg, const std::string &key, const nlohmann::json &value) {
    const auto &keys = detail::config_keys();
    auto it = keys.find(key);
    if (it == keys.end())
        throw ConfigError(key, "unknown config key \"" + key + "\"");
    it->second(cfg, key, value);
}

inline std::vector<std::string> config_key_names() {
    std::vector<std::string> out;
    for (const auto &[k, _] : detail::config_keys())
        out.push_back(k);
    return out;
}

/// Applies a flat JSON object on top of `base` and validates the result.
inline RunConfig parse_run_config(const nlohmann::json &doc, RunConfig base = {}) {
    if (!doc.is_object())
        throw ConfigError("config document must be a flat JSON object");
    for (const auto &[k, v] : doc.items())
        apply_config_key(base, k, v);
    base.validate();
    return base;
}

inline nlohmann::json read_json_file(const std::string &path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error &e) {
        throw ConfigError(std::string("invalid JSON in ") + path + ": " + e.what());
    }
}

inline RunConfig load_run_config(const std::string &path, RunConfig base = {}) {
    return parse_run_config(read_json_file(path), std::move(base));
}

/// One named point of a hyperparameter grid.
struct GridPoint {
    std::string label; // e.g. "enc_layers=2,w_contrastive=0.1"
    RunConfig config;
};

/// Cartesian product of a grid document {"key": [values...], ...} applied
/// to `base`. Keys iterate in document order, the last key fastest.
inline std::vector<GridPoint> expand_grid(const nlohmann::ordered_json &grid,
                                          const RunConfig &base) {
    if (!grid.is_object() || grid.empty())
        throw ConfigError("grid", "sweep grid must be a non-empty object of value arrays");
    std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;
    for (const auto &[k, v] : grid.items()) {
        if (!v.is_array() || v.empty())
            throw ConfigError(k, "grid entry \"" + k + "\" must be a non-empty array");
        std::vector<nlohmann::json> values;
        for (const auto &x : v)
            values.emplace_back(nlohmann::json::parse(x.dump()));
        axes.emplace_back(k, std::move(values));
    }
    std::vector<GridPoint> points{{"", base}};
    for (const auto &[key, values] : axes) {
        std::vector<GridPoint> next;
        for (const auto &p : points)
            for (const auto &v : values) {
                GridPoint q = p;
                apply_config_key(q.config, key, v);
                q.label += (q.label.empty() ? "" : ",") + key + "=" + v.dump();
                next.push_back(std::move(q));
            }
        points = std::move(next);
    }
    for (const auto &p : points)
        p.config.validate();
    return points;
}

} // namespace robad
