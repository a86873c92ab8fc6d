#pragma once

#include <string>
#include <vector>

#include "tinymm/block.hpp"

namespace tinymm {

// Visual token count for a square image. SigLIP-style grids floor the
// division (384/14 -> 27, hence 729 tokens), so this is grid arithmetic, not
// exact divisibility; encoding an actual image additionally requires the
// resolution to divide evenly (see VisionConfig::validate).
inline int patch_count(int resolution, int patch_size) {
    if (patch_size <= 0 || resolution <= 0 || resolution < patch_size) {
        throw ConfigError("patch_count: invalid resolution " + std::to_string(resolution) +
                          " / patch size " + std::to_string(patch_size));
    }
    const int side = resolution / patch_size;
    return side * side;
}

struct VisionConfig {
    int resolution = 24;
    int patch_size = 8;
    int depth = 2;
    int width = 64; // d_x
    int heads = 2;
    int mlp_ratio = 4;
    int channels = 3;

    void validate() const {
        if (resolution <= 0 || patch_size <= 0 || resolution % patch_size != 0) {
            throw ConfigError("vision resolution " + std::to_string(resolution) +
                              " not divisible by patch size " + std::to_string(patch_size));
        }
        if (depth < 1) throw ConfigError("vision depth must be >= 1");
        if (heads < 1 || width % heads != 0) {
            throw ConfigError("vision width " + std::to_string(width) + " not divisible by " +
                              std::to_string(heads) + " heads");
        }
    }

    int patches() const { return patch_count(resolution, patch_size); }
    int patch_dim() const { return channels * patch_size * patch_size; }
};

// Miniature ViT: patchify, linear patch embedding, learned absolute
// positions, pre-norm blocks without a causal mask, final layer norm. All
// patch tokens come out; there is no CLS token.
class VisionEncoder {
public:
    VisionEncoder() = default;

    explicit VisionEncoder(VisionConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        blocks_.resize(static_cast<size_t>(cfg_.depth));
    }

    void init(Rng& rng, double stddev = 0.02) {
        patch_embed_.init(rng, cfg_.patch_dim(), cfg_.width, stddev);
        pos_.value = Tensor({cfg_.patches(), cfg_.width});
        fill_normal(pos_.value, rng, stddev);
        for (TransformerBlock& b : blocks_) {
            b.heads = cfg_.heads;
            b.init(rng, cfg_.width, cfg_.width * cfg_.mlp_ratio, cfg_.depth, stddev);
        }
        final_ln_.init(cfg_.width);
    }

    const VisionConfig& config() const { return cfg_; }
    int depth() const { return cfg_.depth; }

    // Rearranges C x H x W pixels into an M x (C*p*p) patch matrix,
    // row-major over the patch grid, channel-major within a patch.
    Tensor patchify(const Tensor& image) const {
        if (image.rank() != 3 || image.dim(0) != cfg_.channels || image.dim(1) != cfg_.resolution ||
            image.dim(2) != cfg_.resolution) {
            throw ShapeError("image shape " + shape_str(image.shape()) +
                             " does not match vision config [" + std::to_string(cfg_.channels) +
                             "x" + std::to_string(cfg_.resolution) + "x" +
                             std::to_string(cfg_.resolution) + "]");
        }
        const int p = cfg_.patch_size;
        const int grid = cfg_.resolution / p;
        const int res = cfg_.resolution;
        Tensor out({grid * grid, cfg_.patch_dim()});
        for (int gy = 0; gy < grid; ++gy) {
            for (int gx = 0; gx < grid; ++gx) {
                double* dst = out.data() +
                              static_cast<size_t>(gy * grid + gx) * static_cast<size_t>(cfg_.patch_dim());
                for (int c = 0; c < cfg_.channels; ++c) {
                    for (int py = 0; py < p; ++py) {
                        const double* src = image.data() +
                                            (static_cast<size_t>(c) * res + static_cast<size_t>(gy * p + py)) * res +
                                            static_cast<size_t>(gx * p);
                        for (int px = 0; px < p; ++px) *dst++ = src[px];
                    }
                }
            }
        }
        return out;
    }

    // image -> M x d_x patch features.
    Var encode(Graph& g, const Tensor& image) const {
        Var x = g.constant(patchify(image));
        x = patch_embed_.forward(g, x);
        x = add(x, g.leaf(const_cast<Parameter&>(pos_)));
        for (const TransformerBlock& b : blocks_) x = b.forward(g, x, /*causal=*/false);
        return final_ln_.forward(g, x);
    }

    Tensor encode_value(const Tensor& image) const {
        Graph g;
        return encode(g, image).value();
    }

    // Freeze the patch embedding, position table and the first k blocks;
    // every later block and the final norm become trainable. k = 0 thaws the
    // whole encoder.
    void set_freeze_prefix(int k) {
        if (k < 0 || k > cfg_.depth) {
            throw ConfigError("freeze prefix " + std::to_string(k) + " out of range [0, " +
                              std::to_string(cfg_.depth) + "]");
        }
        const bool freeze_stem = k > 0;
        patch_embed_.visit("", [&](const std::string&, Parameter& p) { p.trainable = !freeze_stem; });
        pos_.trainable = !freeze_stem;
        for (int i = 0; i < cfg_.depth; ++i) blocks_[static_cast<size_t>(i)].set_trainable(i >= k);
        final_ln_.visit("", [](const std::string&, Parameter& p) { p.trainable = true; });
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) {
        patch_embed_.visit(prefix + "patch_embed", fn);
        fn(prefix + "pos", pos_);
        for (size_t i = 0; i < blocks_.size(); ++i) {
            blocks_[i].visit(prefix + "block" + std::to_string(i), fn);
        }
        final_ln_.visit(prefix + "final_ln", fn);
    }

private:
    VisionConfig cfg_;
    LinearLayer patch_embed_;
    Parameter pos_;
    std::vector<TransformerBlock> blocks_;
    LayerNormLayer final_ln_;
};

} // namespace tinymm
