#pragma once

// Strict JSON (de)serialization of run configurations. Unknown keys are
// rejected; missing keys keep their defaults.

#include <cstdint>
#include <functional>
#include <string>

#include <nlohmann/json.hpp>

#include "cbpo/core.hpp"
#include "cbpo/datagen.hpp"
#include "cbpo/trainer.hpp"

namespace cbpo {

inline constexpr int kSchemaVersion = 1;

namespace detail {

using FieldHandler = std::function<bool(const std::string& key, const nlohmann::json& value)>;

/// Calls `handle` for every member of `j`; a handler returning false marks
/// the key as unknown.
inline void parse_strict(const nlohmann::json& j, const std::string& where, const FieldHandler& handle) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        try {
            known = handle(key, value);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where + "." + key + ": " + e.what());
        }
        if (!known) throw ConfigError("unknown field '" + key + "' in " + where);
    }
}

}  // namespace detail

/// Every top-level config must carry a supported "schema_version".
inline void require_schema_version(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("schema_version")) throw ConfigError("missing required field 'schema_version'");
    const auto& v = j.at("schema_version");
    if (!v.is_number_integer() || v.get<int>() != kSchemaVersion) {
        throw ConfigError("unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
    }
}

// ---------------------------------------------------------------------------
// Dataset construction

struct DatasetSpec {
    std::string target_user = "u000";
    double ratio_x = 1.0;
    Grouping grouping = Grouping::random;
    double history_fraction = 1.0;

    void validate() const {
        if (!(ratio_x > 0.0) || !std::isfinite(ratio_x)) throw ConfigError("ratio_x must be > 0");
        if (!(history_fraction > 0.0 && history_fraction <= 1.0)) {
            throw ConfigError("history_fraction must lie in (0,1]");
        }
    }
};

inline nlohmann::ordered_json to_json(const DatasetSpec& d) {
    return {{"target_user", d.target_user},
            {"ratio_x", d.ratio_x},
            {"grouping", to_string(d.grouping)},
            {"history_fraction", d.history_fraction}};
}

inline DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
    DatasetSpec d;
    detail::parse_strict(j, "dataset", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "target_user") d.target_user = v.get<std::string>();
        else if (k == "ratio_x") d.ratio_x = v.get<double>();
        else if (k == "grouping") d.grouping = parse_grouping(v.get<std::string>());
        else if (k == "history_fraction") d.history_fraction = v.get<double>();
        else return false;
        return true;
    });
    d.validate();
    return d;
}

/// Target/auxiliary split for one seed, truncated to the history fraction.
inline UserDataset prepare_dataset(const Population& pop, const DatasetSpec& spec, std::uint64_t seed) {
    spec.validate();
    UserDataset d = build_user_dataset(pop, spec.target_user, spec.ratio_x, spec.grouping, seed);
    if (spec.history_fraction < 1.0) d = truncate_history(d, spec.history_fraction);
    return d;
}

// ---------------------------------------------------------------------------
// Training configuration

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["method"] = to_string(c.method);
    j["epochs"] = c.epochs;
    j["batch_size_pos"] = c.batch_size_pos;
    j["batch_size_aux"] = c.batch_size_aux;
    j["learning_rate"] = c.learning_rate;
    j["beta"] = c.beta;
    if (c.alpha) j["alpha"] = *c.alpha;
    else j["alpha"] = "estimate";
    if (c.pi_n) j["pi_n"] = *c.pi_n;
    else j["pi_n"] = nullptr;
    j["ema_decay"] = c.ema_decay;
    j["reference_mode"] = to_string(c.reference_mode);
    j["seed"] = c.seed;
    j["adam"] = {{"beta1", c.adam.beta1},
                 {"beta2", c.adam.beta2},
                 {"eps", c.adam.eps},
                 {"weight_decay", c.adam.weight_decay},
                 {"warmup_ratio", c.adam.warmup_ratio}};
    j["lambda_d"] = c.lambda_d;
    j["lambda_u"] = c.lambda_u;
    j["context_size"] = c.context_size;
    j["warm_start_epochs"] = c.warm_start_epochs;
    j["warm_start_lr"] = c.warm_start_lr;
    j["warm_start_batch"] = c.warm_start_batch;
    j["dpo_sampling_budget"] = c.dpo_sampling_budget;
    j["proxy"] = {{"epochs", c.proxy.epochs},
                  {"learning_rate", c.proxy.learning_rate},
                  {"batch_size", c.proxy.batch_size},
                  {"l2", c.proxy.l2}};
    return j;
}

inline std::optional<double> parse_alpha_field(const nlohmann::json& v) {
    if (v.is_string()) {
        if (v.get<std::string>() != "estimate") throw ConfigError("alpha must be a number or \"estimate\"");
        return std::nullopt;
    }
    return v.get<double>();
}

inline ProxyTrainingConfig proxy_config_from_json(const nlohmann::json& j, ProxyTrainingConfig base = {}) {
    detail::parse_strict(j, "proxy", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "epochs") base.epochs = v.get<std::size_t>();
        else if (k == "learning_rate") base.learning_rate = v.get<double>();
        else if (k == "batch_size") base.batch_size = v.get<std::size_t>();
        else if (k == "l2") base.l2 = v.get<double>();
        else return false;
        return true;
    });
    if (base.batch_size == 0 || !(base.learning_rate > 0.0) || !(base.l2 >= 0.0)) {
        throw ConfigError("proxy: batch_size >= 1, learning_rate > 0 and l2 >= 0 required");
    }
    return base;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    detail::parse_strict(j, "train", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "method") c.method = parse_method(v.get<std::string>());
        else if (k == "epochs") c.epochs = v.get<std::size_t>();
        else if (k == "batch_size_pos") c.batch_size_pos = v.get<std::size_t>();
        else if (k == "batch_size_aux") c.batch_size_aux = v.get<std::size_t>();
        else if (k == "learning_rate") c.learning_rate = v.get<double>();
        else if (k == "beta") c.beta = v.get<double>();
        else if (k == "alpha") c.alpha = parse_alpha_field(v);
        else if (k == "pi_n") c.pi_n = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
        else if (k == "ema_decay") c.ema_decay = v.get<double>();
        else if (k == "reference_mode") c.reference_mode = parse_reference_mode(v.get<std::string>());
        else if (k == "seed") c.seed = v.get<std::uint64_t>();
        else if (k == "adam") {
            detail::parse_strict(v, "train.adam", [&](const std::string& ak, const nlohmann::json& av) {
                if (ak == "beta1") c.adam.beta1 = av.get<double>();
                else if (ak == "beta2") c.adam.beta2 = av.get<double>();
                else if (ak == "eps") c.adam.eps = av.get<double>();
                else if (ak == "weight_decay") c.adam.weight_decay = av.get<double>();
                else if (ak == "warmup_ratio") c.adam.warmup_ratio = av.get<double>();
                else return false;
                return true;
            });
        }
        else if (k == "lambda_d") c.lambda_d = v.get<double>();
        else if (k == "lambda_u") c.lambda_u = v.get<double>();
        else if (k == "context_size") c.context_size = v.get<std::size_t>();
        else if (k == "warm_start_epochs") c.warm_start_epochs = v.get<std::size_t>();
        else if (k == "warm_start_lr") c.warm_start_lr = v.get<double>();
        else if (k == "warm_start_batch") c.warm_start_batch = v.get<std::size_t>();
        else if (k == "dpo_sampling_budget") c.dpo_sampling_budget = v.get<std::size_t>();
        else if (k == "proxy") c.proxy = proxy_config_from_json(v, c.proxy);
        else return false;
        return true;
    });
    c.validate();
    return c;
}

}  // namespace cbpo
