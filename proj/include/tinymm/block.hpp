#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tinymm/ops.hpp"
#include "tinymm/rng.hpp"

namespace tinymm {

inline constexpr double kLayerNormEps = 1e-5;

using ParamVisitor = std::function<void(const std::string&, Parameter&)>;

struct LinearLayer {
    Parameter w; // in x out
    Parameter b; // out

    void init(Rng& rng, int in, int out, double stddev) {
        w.value = Tensor({in, out});
        fill_normal(w.value, rng, stddev);
        b.value = Tensor::zeros({out});
    }

    Var forward(Graph& g, Var x) const {
        return linear(x, g.leaf(const_cast<Parameter&>(w)), g.leaf(const_cast<Parameter&>(b)));
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
    }
};

struct LayerNormLayer {
    Parameter gain;
    Parameter bias;

    void init(int d) {
        gain.value = Tensor::full({d}, 1.0);
        bias.value = Tensor::zeros({d});
    }

    Var forward(Graph& g, Var x) const {
        return layer_norm(x, g.leaf(const_cast<Parameter&>(gain)),
                          g.leaf(const_cast<Parameter&>(bias)), kLayerNormEps);
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + ".gain", gain);
        fn(prefix + ".bias", bias);
    }
};

// Pre-norm transformer block: attention and MLP sublayers, each behind a
// layer norm, with residual connections around both.
struct TransformerBlock {
    LayerNormLayer ln1, ln2;
    LinearLayer wq, wk, wv, wo;
    LinearLayer fc1, fc2;
    int heads = 1;

    // Residual projections (wo, fc2) take the 1/sqrt(2*depth) scaled init.
    void init(Rng& rng, int d, int mlp_hidden, int depth, double stddev = 0.02) {
        const double resid = stddev / std::sqrt(2.0 * depth);
        ln1.init(d);
        ln2.init(d);
        wq.init(rng, d, d, stddev);
        wk.init(rng, d, d, stddev);
        wv.init(rng, d, d, stddev);
        wo.init(rng, d, d, resid);
        fc1.init(rng, d, mlp_hidden, stddev);
        fc2.init(rng, mlp_hidden, d, resid);
    }

    Var forward(Graph& g, Var x, bool causal) const {
        Var h = ln1.forward(g, x);
        Var att = attention(wq.forward(g, h), wk.forward(g, h), wv.forward(g, h), heads, causal);
        x = add(x, wo.forward(g, att));
        Var m = fc2.forward(g, gelu(fc1.forward(g, ln2.forward(g, x))));
        return add(x, m);
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        ln1.visit(prefix + ".ln1", fn);
        wq.visit(prefix + ".wq", fn);
        wk.visit(prefix + ".wk", fn);
        wv.visit(prefix + ".wv", fn);
        wo.visit(prefix + ".wo", fn);
        ln2.visit(prefix + ".ln2", fn);
        fc1.visit(prefix + ".fc1", fn);
        fc2.visit(prefix + ".fc2", fn);
    }

    void set_trainable(bool t) {
        visit("", [t](const std::string&, Parameter& p) { p.trainable = t; });
    }
};

} // namespace tinymm
