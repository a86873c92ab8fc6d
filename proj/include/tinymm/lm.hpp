#pragma once

#include <string>
#include <vector>

#include "tinymm/block.hpp"

namespace tinymm {

struct LmConfig {
    int vocab_size = 0;
    int width = 128; // d
    int depth = 3;
    int heads = 4;
    int max_seq_len = 320;
    int mlp_ratio = 4;

    void validate() const {
        if (vocab_size < 1) throw ConfigError("lm vocab size must be >= 1");
        if (depth < 1) throw ConfigError("lm depth must be >= 1");
        if (heads < 1 || width % heads != 0) {
            throw ConfigError("lm width " + std::to_string(width) + " not divisible by " +
                              std::to_string(heads) + " heads");
        }
        if (max_seq_len < 1) throw ConfigError("lm max sequence length must be >= 1");
    }
};

// Decoder-only LM over embedding sequences. The logit head is weight-tied to
// the token embedding table.
class Lm {
public:
    Lm() = default;

    explicit Lm(LmConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        blocks_.resize(static_cast<size_t>(cfg_.depth));
    }

    void init(Rng& rng, double stddev = 0.02) {
        tok_embed_.value = Tensor({cfg_.vocab_size, cfg_.width});
        fill_normal(tok_embed_.value, rng, stddev);
        pos_.value = Tensor({cfg_.max_seq_len, cfg_.width});
        fill_normal(pos_.value, rng, stddev);
        for (TransformerBlock& b : blocks_) {
            b.heads = cfg_.heads;
            b.init(rng, cfg_.width, cfg_.width * cfg_.mlp_ratio, cfg_.depth, stddev);
        }
        final_ln_.init(cfg_.width);
    }

    const LmConfig& config() const { return cfg_; }

    Var embed_ids(Graph& g, const std::vector<int>& ids) const {
        return embed(g.leaf(const_cast<Parameter&>(tok_embed_)), ids);
    }

    // L x d inputs -> L x d hidden states; position i sees positions <= i only.
    Var decode(Graph& g, Var seq) const {
        const int L = seq.value().dim(0);
        if (L < 1) throw ContractError("decode needs at least one position");
        if (L > cfg_.max_seq_len) {
            throw ShapeError("sequence length " + std::to_string(L) +
                             " exceeds max sequence length " + std::to_string(cfg_.max_seq_len));
        }
        Var x = add(seq, slice_rows(g.leaf(const_cast<Parameter&>(pos_)), 0, L));
        for (const TransformerBlock& b : blocks_) x = b.forward(g, x, /*causal=*/true);
        return final_ln_.forward(g, x);
    }

    // Weight-tied head: hidden (L x d) -> logits (L x |V|).
    Var logits(Graph& g, Var hidden) const {
        return matmul_nt(hidden, g.leaf(const_cast<Parameter&>(tok_embed_)));
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "tok_embed", tok_embed_);
        fn(prefix + "pos", pos_);
        for (size_t i = 0; i < blocks_.size(); ++i) {
            blocks_[i].visit(prefix + "block" + std::to_string(i), fn);
        }
        final_ln_.visit(prefix + "final_ln", fn);
    }

private:
    LmConfig cfg_;
    Parameter tok_embed_;
    Parameter pos_;
    std::vector<TransformerBlock> blocks_;
    LayerNormLayer final_ln_;
};

} // namespace tinymm
