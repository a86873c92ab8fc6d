#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "tinymm/assembly.hpp"
#include "tinymm/optim.hpp"

namespace tinymm {

inline nlohmann::json to_json(const VisionConfig& c) {
    return {{"resolution", c.resolution}, {"patch_size", c.patch_size}, {"depth", c.depth},
            {"width", c.width},           {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
            {"channels", c.channels}};
}

inline nlohmann::json to_json(const ConnectorConfig& c) {
    return {{"type", c.type}, {"queries", c.queries}, {"heads", c.heads}};
}

inline nlohmann::json to_json(const LmConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"width", c.width},
            {"depth", c.depth},           {"heads", c.heads},
            {"max_seq_len", c.max_seq_len}, {"mlp_ratio", c.mlp_ratio}};
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"vision", to_json(c.vision)}, {"connector", to_json(c.connector)},
            {"lm", to_json(c.lm)}};
}

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline VisionConfig vision_config_from_json(const nlohmann::json& j) {
    VisionConfig c;
    detail::read_field(j, "resolution", c.resolution);
    detail::read_field(j, "patch_size", c.patch_size);
    detail::read_field(j, "depth", c.depth);
    detail::read_field(j, "width", c.width);
    detail::read_field(j, "heads", c.heads);
    detail::read_field(j, "mlp_ratio", c.mlp_ratio);
    detail::read_field(j, "channels", c.channels);
    return c;
}

inline ConnectorConfig connector_config_from_json(const nlohmann::json& j) {
    ConnectorConfig c;
    detail::read_field(j, "type", c.type);
    detail::read_field(j, "queries", c.queries);
    detail::read_field(j, "heads", c.heads);
    return c;
}

inline LmConfig lm_config_from_json(const nlohmann::json& j) {
    LmConfig c;
    detail::read_field(j, "vocab_size", c.vocab_size);
    detail::read_field(j, "width", c.width);
    detail::read_field(j, "depth", c.depth);
    detail::read_field(j, "heads", c.heads);
    detail::read_field(j, "max_seq_len", c.max_seq_len);
    detail::read_field(j, "mlp_ratio", c.mlp_ratio);
    return c;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("vision")) c.vision = vision_config_from_json(j.at("vision"));
    if (j.contains("connector")) c.connector = connector_config_from_json(j.at("connector"));
    if (j.contains("lm")) c.lm = lm_config_from_json(j.at("lm"));
    return c;
}

// Hash of the model identity (architecture + vocabulary). Recipe settings are
// deliberately excluded: a base-PT checkpoint must be loadable to initialize
// share-PT or SFT on the same model.
inline std::string config_hash(const ModelConfig& cfg, const Vocab& vocab) {
    std::string blob = to_json(cfg).dump();
    for (const std::string& t : vocab.tokens()) {
        blob += '\x1f';
        blob += t;
    }
    return hex64(fnv1a(blob));
}

// Per-stage run settings. The paper-faithful values are the defaults; any
// field can be overridden by the run config.
struct RecipeConfig {
    std::string recipe = "base"; // base | share
    std::string stage = "pt";    // pt | sft
    double learning_rate = 1e-3;
    int batch_size = 256;
    int epochs = 1;
    int freeze_prefix_k = -1; // share PT only; -1 resolves from vision depth
    std::string init_connector_from;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static RecipeConfig defaults(const std::string& recipe, const std::string& stage) {
        RecipeConfig c;
        c.recipe = recipe;
        c.stage = stage;
        if (stage == "sft") {
            c.learning_rate = 2e-5;
            c.batch_size = 128;
        } else if (recipe == "share") {
            c.learning_rate = 2e-5;
            c.batch_size = 256;
        } else {
            c.learning_rate = 1e-3;
            c.batch_size = 256;
        }
        c.epochs = 1;
        return c;
    }

    void validate() const {
        if (recipe != "base" && recipe != "share") {
            throw ConfigError("unknown recipe '" + recipe + "'");
        }
        if (stage != "pt" && stage != "sft") {
            throw ConfigError("unknown stage '" + stage + "'");
        }
        if (learning_rate <= 0) throw ConfigError("learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (recipe == "share" && stage == "pt" && init_connector_from.empty()) {
            throw ConfigError("share pre-training requires init_connector_from "
                              "(a base-PT checkpoint)");
        }
    }

    AdamWConfig adamw() const { return {beta1, beta2, eps, weight_decay}; }
};

inline RecipeConfig recipe_config_from_json(const nlohmann::json& j) {
    std::string recipe = "base", stage = "pt";
    detail::read_field(j, "recipe", recipe);
    detail::read_field(j, "stage", stage);
    RecipeConfig c = RecipeConfig::defaults(recipe, stage);
    detail::read_field(j, "learning_rate", c.learning_rate);
    detail::read_field(j, "batch_size", c.batch_size);
    detail::read_field(j, "epochs", c.epochs);
    detail::read_field(j, "freeze_prefix_k", c.freeze_prefix_k);
    detail::read_field(j, "init_connector_from", c.init_connector_from);
    detail::read_field(j, "weight_decay", c.weight_decay);
    detail::read_field(j, "beta1", c.beta1);
    detail::read_field(j, "beta2", c.beta2);
    detail::read_field(j, "eps", c.eps);
    return c;
}

inline nlohmann::json to_json(const RecipeConfig& c) {
    return {{"recipe", c.recipe},
            {"stage", c.stage},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"freeze_prefix_k", c.freeze_prefix_k},
            {"init_connector_from", c.init_connector_from},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps}};
}

// One JSON document per run: seed, model shape, recipe settings.
struct RunConfig {
    std::uint64_t seed = 1;
    ModelConfig model;
    RecipeConfig recipe;
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::read_field(j, "seed", c.seed);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("recipe")) c.recipe = recipe_config_from_json(j.at("recipe"));
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    try {
        return run_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error in ") + path + ": " + e.what());
    }
}

} // namespace tinymm
