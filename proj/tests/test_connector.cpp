#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tinymm/connector.hpp"
#include "tinymm/gradcheck.hpp"

using namespace tinymm;

namespace {

constexpr int kDx = 5;
constexpr int kD = 8;

Tensor random_patches(int m, Rng& rng) {
    Tensor t({m, kDx});
    fill_normal(t, rng, 1.0);
    return t;
}

std::map<std::string, Parameter*> param_map(Connector& c) {
    std::map<std::string, Parameter*> out;
    c.visit_params("", [&](const std::string& name, Parameter& p) { out[name] = &p; });
    return out;
}

Connector make(const std::string& type, int queries, int heads, std::uint64_t seed) {
    ConnectorConfig cfg;
    cfg.type = type;
    cfg.queries = queries;
    cfg.heads = heads;
    Rng rng(seed);
    return Connector(cfg, kDx, kD, rng);
}

Tensor project_value(const Connector& c, const Tensor& patches) {
    Graph g;
    return c.project(g, g.constant(patches)).value();
}

} // namespace

TEST_CASE("mlp with zero weights collapses to the output bias") {
    Connector c = make("mlp", 0, 0, 1);
    auto P = param_map(c);
    P["fc2.w"]->value.fill(0.0);
    for (int j = 0; j < kD; ++j) P["fc2.b"]->value[static_cast<size_t>(j)] = j + 0.5;
    Rng rng(2);
    Tensor out = project_value(c, random_patches(4, rng));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < kD; ++j) REQUIRE(out.at(i, j) == j + 0.5);
}

TEST_CASE("mlp is tokenwise: permuting rows permutes outputs") {
    Connector c = make("mlp", 0, 0, 3);
    Rng rng(4);
    Tensor in = random_patches(5, rng);
    Tensor out = project_value(c, in);
    // reverse the rows
    Tensor rev({5, kDx});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < kDx; ++j) rev.at(i, j) = in.at(4 - i, j);
    Tensor rout = project_value(c, rev);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < kD; ++j) REQUIRE(rout.at(i, j) == out.at(4 - i, j));
}

TEST_CASE("mlp single token matches the scalar-loop oracle") {
    Connector c = make("mlp", 0, 0, 5);
    auto P = param_map(c);
    Rng rng(6);
    Tensor in = random_patches(1, rng);
    Tensor got = project_value(c, in);

    std::vector<double> hidden(kD, 0.0);
    for (int o = 0; o < kD; ++o) {
        double acc = P["fc1.b"]->value[static_cast<size_t>(o)];
        for (int k = 0; k < kDx; ++k) acc += in.at(0, k) * P["fc1.w"]->value.at(k, o);
        hidden[static_cast<size_t>(o)] = acc * 0.5 * (1.0 + std::erf(acc / std::sqrt(2.0)));
    }
    for (int o = 0; o < kD; ++o) {
        double acc = P["fc2.b"]->value[static_cast<size_t>(o)];
        for (int k = 0; k < kD; ++k) acc += hidden[static_cast<size_t>(k)] * P["fc2.w"]->value.at(k, o);
        REQUIRE(got.at(0, o) == Catch::Approx(acc).margin(1e-10));
    }
}

TEST_CASE("mlp gradient check") {
    Connector c = make("mlp", 0, 0, 7);
    Rng rng(8);
    Tensor in = random_patches(3, rng);
    Tensor w({3, kD});
    fill_normal(w, rng, 1.0);
    auto loss_value = [&]() {
        Graph g;
        return sum(mul(c.project(g, g.constant(in)), g.constant(w))).value()[0];
    };
    std::vector<Parameter*> params;
    c.visit_params("", [&](const std::string&, Parameter& p) {
        p.clear_grad();
        params.push_back(&p);
    });
    {
        Graph g;
        Var loss = sum(mul(c.project(g, g.constant(in)), g.constant(w)));
        g.backward(loss);
        g.add_param_grads();
    }
    REQUIRE(finite_difference_check(params, loss_value).ok(1e-4));
}

TEST_CASE("resampler emits exactly Q tokens regardless of M") {
    Connector c = make("resampler", 16, 2, 9);
    Rng rng(10);
    for (int m : {4, 576, 729}) {
        Tensor out = project_value(c, random_patches(m, rng));
        REQUIRE(out.shape() == std::vector<int>{16, kD});
        REQUIRE(c.out_len(m) == 16);
    }
}

TEST_CASE("resampler rejects an empty patch set") {
    Connector c = make("resampler", 4, 1, 11);
    Tensor empty({0, kDx});
    Graph g;
    REQUIRE_THROWS_AS(c.project(g, g.constant(empty)), ContractError);
}

TEST_CASE("resampler single key: attention weight is 1") {
    Connector c = make("resampler", 3, 1, 12);
    auto P = param_map(c);
    Rng rng(13);
    Tensor in = random_patches(1, rng);
    Tensor got = project_value(c, in);

    // value projection of the lone patch
    std::vector<double> val(kD);
    for (int o = 0; o < kD; ++o) {
        double acc = P["val_proj.b"]->value[static_cast<size_t>(o)];
        for (int k = 0; k < kDx; ++k) acc += in.at(0, k) * P["val_proj.w"]->value.at(k, o);
        val[static_cast<size_t>(o)] = acc;
    }
    // with one key every query attends to it fully; rows differ only via out_proj
    for (int q = 0; q < 3; ++q) {
        for (int o = 0; o < kD; ++o) {
            double acc = P["out_proj.b"]->value[static_cast<size_t>(o)];
            for (int k = 0; k < kD; ++k) acc += val[static_cast<size_t>(k)] * P["out_proj.w"]->value.at(k, o);
            REQUIRE(got.at(q, o) == Catch::Approx(acc).margin(1e-10));
        }
    }
}

TEST_CASE("resampler Q=1 single head over two keys matches hand softmax oracle") {
    Connector c = make("resampler", 1, 1, 14);
    auto P = param_map(c);
    Rng rng(15);
    Tensor in = random_patches(2, rng);
    Tensor got = project_value(c, in);

    auto proj = [&](const char* w, const char* b, const double* x, int in_d, std::vector<double>& out) {
        out.assign(static_cast<size_t>(P[w]->value.dim(1)), 0.0);
        for (int o = 0; o < P[w]->value.dim(1); ++o) {
            double acc = P[b]->value[static_cast<size_t>(o)];
            for (int k = 0; k < in_d; ++k) acc += x[k] * P[w]->value.at(k, o);
            out[static_cast<size_t>(o)] = acc;
        }
    };
    std::vector<double> k0, k1, v0, v1;
    proj("key_proj.w", "key_proj.b", in.data(), kDx, k0);
    proj("key_proj.w", "key_proj.b", in.data() + kDx, kDx, k1);
    proj("val_proj.w", "val_proj.b", in.data(), kDx, v0);
    proj("val_proj.w", "val_proj.b", in.data() + kDx, kDx, v1);
    const Tensor& q = P["queries"]->value;
    double s0 = 0, s1 = 0;
    for (int j = 0; j < kD; ++j) {
        s0 += q.at(0, j) * k0[static_cast<size_t>(j)];
        s1 += q.at(0, j) * k1[static_cast<size_t>(j)];
    }
    s0 /= std::sqrt(static_cast<double>(kD));
    s1 /= std::sqrt(static_cast<double>(kD));
    const double mx = std::max(s0, s1);
    const double w0 = std::exp(s0 - mx), w1 = std::exp(s1 - mx);
    std::vector<double> att(kD);
    for (int j = 0; j < kD; ++j)
        att[static_cast<size_t>(j)] = (w0 * v0[static_cast<size_t>(j)] + w1 * v1[static_cast<size_t>(j)]) / (w0 + w1);
    std::vector<double> expect;
    proj("out_proj.w", "out_proj.b", att.data(), kD, expect);
    for (int o = 0; o < kD; ++o)
        REQUIRE(got.at(0, o) == Catch::Approx(expect[static_cast<size_t>(o)]).margin(1e-8));
}

TEST_CASE("resampler output is invariant to patch permutation") {
    Connector c = make("resampler", 5, 2, 16);
    Rng rng(17);
    Tensor in = random_patches(9, rng);
    Tensor perm({9, kDx});
    std::vector<int> order{4, 7, 0, 8, 2, 6, 1, 5, 3};
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < kDx; ++j) perm.at(i, j) = in.at(order[static_cast<size_t>(i)], j);
    Tensor a = project_value(c, in);
    Tensor b = project_value(c, perm);
    for (size_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == Catch::Approx(b[i]).margin(1e-9));
}

TEST_CASE("connector swap changes only the output length") {
    Rng rng(18);
    Tensor in = random_patches(8, rng);
    Connector mlp = make("mlp", 0, 0, 19);
    Connector res = make("resampler", 4, 1, 19);
    Tensor a = project_value(mlp, in);
    Tensor b = project_value(res, in);
    REQUIRE(a.dim(1) == kD);
    REQUIRE(b.dim(1) == kD);
    REQUIRE(a.dim(0) == 8);
    REQUIRE(b.dim(0) == 4);
}

TEST_CASE("unknown connector type is rejected") {
    ConnectorConfig cfg;
    cfg.type = "gated";
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
