#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinymm/config.hpp"
#include "tinymm/optim.hpp"

namespace tinymm {

// Single binary file: 8-byte magic, little-endian u64 header length, JSON
// header, then the raw float64 arrays in header order (parameter values
// first, optimizer m/v pairs after). Raw doubles round-trip bitwise, which
// is what makes resume-from-checkpoint exact.
inline constexpr char kCheckpointMagic[8] = {'T', 'M', 'M', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
    nlohmann::json header;
    std::map<std::string, Tensor> params;
    std::map<std::string, std::pair<Tensor, Tensor>> moments;

    std::string hash() const { return header.at("config_hash").get<std::string>(); }
    int step() const { return header.at("step").get<int>(); }
};

namespace detail {

inline void write_tensor(std::ofstream& out, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

inline Tensor read_tensor(std::ifstream& in, std::vector<int> shape) {
    Tensor t(std::move(shape));
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw IoError("checkpoint truncated while reading a tensor");
    return t;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, Model& model, const Vocab& vocab,
                            const RecipeConfig& recipe, int step, std::uint64_t seed,
                            const std::string& rng_state, const AdamW* opt = nullptr) {
    nlohmann::json header;
    header["version"] = 1;
    header["config_hash"] = config_hash(model.config(), vocab);
    header["step"] = step;
    header["stage"] = recipe.stage;
    header["recipe"] = recipe.recipe;
    header["seed"] = seed;
    header["rng_state"] = rng_state;
    header["vocab"] = vocab.tokens();
    header["model"] = to_json(model.config());

    nlohmann::json params = nlohmann::json::array();
    auto named = model.named_params();
    for (const auto& [name, p] : named) {
        params.push_back({{"name", name}, {"shape", p->value.shape()}, {"trainable", p->trainable}});
    }
    header["params"] = params;

    if (opt) {
        nlohmann::json names = nlohmann::json::array();
        for (const auto& [name, mv] : opt->moments()) names.push_back(name);
        header["opt"] = {{"names", names},
                         {"adam_step", opt->step_count()},
                         {"beta1", opt->config().beta1},
                         {"beta2", opt->config().beta2},
                         {"eps", opt->config().eps},
                         {"weight_decay", opt->config().weight_decay}};
    }

    const std::string hbytes = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint64_t hlen = hbytes.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
    for (const auto& [name, p] : named) detail::write_tensor(out, p->value);
    if (opt) {
        for (const auto& [name, mv] : opt->moments()) {
            detail::write_tensor(out, mv.first);
            detail::write_tensor(out, mv.second);
        }
    }
    if (!out) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::string(magic, 8) != std::string(kCheckpointMagic, 8)) {
        throw IoError("not a tinymm checkpoint: " + path);
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    std::string hbytes(hlen, '\0');
    in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("checkpoint header truncated: " + path);

    Checkpoint ck;
    try {
        ck.header = nlohmann::json::parse(hbytes);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt checkpoint header: ") + e.what());
    }
    for (const auto& entry : ck.header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        ck.params[name] = detail::read_tensor(in, entry.at("shape").get<std::vector<int>>());
    }
    if (ck.header.contains("opt")) {
        for (const auto& jn : ck.header.at("opt").at("names")) {
            const std::string name = jn.get<std::string>();
            // moments share the parameter's shape
            std::vector<int> shape;
            for (const auto& entry : ck.header.at("params")) {
                if (entry.at("name").get<std::string>() == name) {
                    shape = entry.at("shape").get<std::vector<int>>();
                    break;
                }
            }
            if (shape.empty()) throw IoError("optimizer state for unknown parameter " + name);
            Tensor m = detail::read_tensor(in, shape);
            Tensor v = detail::read_tensor(in, shape);
            ck.moments[name] = {std::move(m), std::move(v)};
        }
    }
    return ck;
}

// Rebuilds the model and vocabulary exactly as checkpointed.
inline Model model_from_checkpoint(const Checkpoint& ck, Vocab& vocab_out) {
    vocab_out = Vocab::from_tokens(ck.header.at("vocab").get<std::vector<std::string>>());
    Model model(model_config_from_json(ck.header.at("model")));
    model.init(ck.header.at("seed").get<std::uint64_t>());
    std::map<std::string, bool> trainable;
    for (const auto& entry : ck.header.at("params")) {
        trainable[entry.at("name").get<std::string>()] = entry.at("trainable").get<bool>();
    }
    model.visit_params([&](const std::string& name, Parameter& p) {
        auto it = ck.params.find(name);
        if (it == ck.params.end()) throw IoError("checkpoint missing parameter " + name);
        if (!p.value.same_shape(it->second)) {
            throw IoError("checkpoint shape mismatch for " + name + ": " +
                          shape_str(it->second.shape()) + " vs " + shape_str(p.value.shape()));
        }
        p.value = it->second;
        p.trainable = trainable.at(name);
        p.clear_grad();
    });
    return model;
}

// Loads parameter values into an already-built model; the checkpoint must
// carry the same model identity hash.
inline void load_params_into(Model& model, const Vocab& vocab, const Checkpoint& ck) {
    const std::string expect = config_hash(model.config(), vocab);
    if (ck.hash() != expect) {
        throw ConfigError("checkpoint config hash " + ck.hash() +
                          " does not match this run's model hash " + expect);
    }
    model.visit_params([&](const std::string& name, Parameter& p) {
        p.value = ck.params.at(name);
        p.clear_grad();
    });
}

// Share-PT initialization: copy only the connector weights out of a base-PT
// checkpoint (bitwise).
inline void load_connector_params(Model& model, const Vocab& vocab, const Checkpoint& ck) {
    const std::string expect = config_hash(model.config(), vocab);
    if (ck.hash() != expect) {
        throw ConfigError("connector init checkpoint hash " + ck.hash() +
                          " does not match this run's model hash " + expect);
    }
    model.visit_params([&](const std::string& name, Parameter& p) {
        if (name.rfind("connector.", 0) != 0) return;
        p.value = ck.params.at(name);
        p.clear_grad();
    });
}

} // namespace tinymm
