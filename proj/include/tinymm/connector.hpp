#pragma once

#include <string>
#include <variant>

#include "tinymm/block.hpp"

namespace tinymm {

struct ConnectorConfig {
    std::string type = "mlp"; // "mlp" | "resampler"
    int queries = 16;         // resampler only
    int heads = 2;            // resampler only

    void validate() const {
        if (type != "mlp" && type != "resampler") {
            throw ConfigError("unknown connector type '" + type + "'");
        }
        if (type == "resampler" && queries < 1) {
            throw ConfigError("resampler needs at least one query");
        }
    }
};

// Tokenwise two-layer MLP with GELU between, projecting d_x -> d. Output
// length always equals the input patch count.
class MlpConnector {
public:
    MlpConnector() = default;
    MlpConnector(int d_x, int d, Rng& rng, double stddev = 0.02) {
        fc1_.init(rng, d_x, d, stddev);
        fc2_.init(rng, d, d, stddev);
    }

    Var project(Graph& g, Var patches) const {
        return fc2_.forward(g, gelu(fc1_.forward(g, patches)));
    }

    int out_len(int patch_count) const { return patch_count; }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) {
        fc1_.visit(prefix + "fc1", fn);
        fc2_.visit(prefix + "fc2", fn);
    }

private:
    LinearLayer fc1_, fc2_;
};

// Learned queries cross-attending over projected patch features, then an
// output projection. Always emits exactly Q tokens. Keys carry no positional
// encoding, so the output is invariant to patch order.
class ResamplerConnector {
public:
    ResamplerConnector() = default;
    ResamplerConnector(int d_x, int d, int queries, int heads, Rng& rng, double stddev = 0.02)
        : heads_(heads) {
        queries_.value = Tensor({queries, d});
        fill_normal(queries_.value, rng, stddev);
        key_proj_.init(rng, d_x, d, stddev);
        val_proj_.init(rng, d_x, d, stddev);
        out_proj_.init(rng, d, d, stddev);
    }

    Var project(Graph& g, Var patches) const {
        if (patches.value().dim(0) == 0) {
            throw ContractError("resampler needs at least one patch feature");
        }
        Var q = g.leaf(const_cast<Parameter&>(queries_));
        Var att = attention(q, key_proj_.forward(g, patches), val_proj_.forward(g, patches),
                            heads_, /*causal=*/false);
        return out_proj_.forward(g, att);
    }

    int out_len(int) const { return queries_.value.dim(0); }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "queries", queries_);
        key_proj_.visit(prefix + "key_proj", fn);
        val_proj_.visit(prefix + "val_proj", fn);
        out_proj_.visit(prefix + "out_proj", fn);
    }

private:
    Parameter queries_;
    LinearLayer key_proj_, val_proj_, out_proj_;
    int heads_ = 1;
};

// Variant wrapper so assembly stays agnostic to the connector choice.
class Connector {
public:
    Connector() = default;

    Connector(const ConnectorConfig& cfg, int d_x, int d, Rng& rng) : type_(cfg.type) {
        cfg.validate();
        if (cfg.type == "mlp") {
            impl_ = MlpConnector(d_x, d, rng);
        } else {
            impl_ = ResamplerConnector(d_x, d, cfg.queries, cfg.heads, rng);
        }
    }

    const std::string& type() const { return type_; }

    Var project(Graph& g, Var patches) const {
        return std::visit([&](const auto& c) { return c.project(g, patches); }, impl_);
    }

    int out_len(int patch_count) const {
        return std::visit([&](const auto& c) { return c.out_len(patch_count); }, impl_);
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) {
        std::visit([&](auto& c) { c.visit_params(prefix, fn); }, impl_);
    }

private:
    std::string type_ = "mlp";
    std::variant<MlpConnector, ResamplerConnector> impl_;
};

} // namespace tinymm
