#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <map>

#include "tinymm/eval.hpp"
#include "tinymm/training.hpp"

using namespace tinymm;
namespace fs = std::filesystem;

namespace {

ModelConfig toy_model_config(int vocab_size, int vision_depth = 2) {
    ModelConfig cfg;
    cfg.vision.resolution = 12;
    cfg.vision.patch_size = 4;
    cfg.vision.depth = vision_depth;
    cfg.vision.width = 8;
    cfg.vision.heads = 2;
    cfg.connector.type = "mlp";
    cfg.lm.vocab_size = vocab_size;
    cfg.lm.width = 16;
    cfg.lm.depth = 2;
    cfg.lm.heads = 2;
    cfg.lm.max_seq_len = 256;
    return cfg;
}

// tiny corpus of real records over tiny scenes
struct ToyWorld {
    Vocab vocab;
    std::vector<ConversationRecord> records;
    std::vector<SceneSpec> specs;
    std::map<std::string, Tensor> images;

    std::vector<TrainItem> items(const std::string& stage) const {
        std::vector<TrainItem> out;
        for (const ConversationRecord& rec : records) {
            TokenizedSample s = stage == "pt" ? derive_caption_pair(rec, vocab)
                                              : render_conversation(rec, vocab);
            out.push_back({images.at(rec.image_ref), std::move(s)});
        }
        return out;
    }
};

ToyWorld make_world(int n, std::uint64_t seed) {
    ToyWorld w;
    std::vector<std::string> texts;
    for (int i = 0; i < n; ++i) {
        auto [spec, rec] = gen_record(seed + static_cast<std::uint64_t>(i), 12);
        rec.image_ref = "img" + std::to_string(i);
        w.images[rec.image_ref] = render_scene(spec);
        for (const Turn& t : rec.turns) texts.push_back(t.text);
        w.specs.push_back(spec);
        w.records.push_back(rec);
    }
    w.vocab = build_vocab(texts);
    return w;
}

std::map<std::string, Tensor> snapshot(Model& model) {
    std::map<std::string, Tensor> out;
    model.visit_params([&](const std::string& name, Parameter& p) { out[name] = p.value; });
    return out;
}

RecipeConfig quick_recipe(const std::string& recipe, const std::string& stage, double lr,
                          int batch, int epochs) {
    RecipeConfig c = RecipeConfig::defaults(recipe, stage);
    c.learning_rate = lr;
    c.batch_size = batch;
    c.epochs = epochs;
    return c;
}

} // namespace

TEST_CASE("lr_schedule endpoints and warmup peak") {
    REQUIRE(lr_schedule(0, 100, 0.5) == 0.0);
    const int warmup = 3; // ceil(0.03 * 100)
    REQUIRE(lr_schedule(warmup, 100, 0.5) == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(lr_schedule(100, 100, 0.5) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE_THROWS_AS(lr_schedule(101, 100, 0.5), ContractError);
    // monotone through warmup
    for (int s = 1; s <= warmup; ++s) REQUIRE(lr_schedule(s, 100, 0.5) > lr_schedule(s - 1, 100, 0.5));
}

TEST_CASE("adamw: zero grads and zero decay is a bitwise fixed point") {
    Parameter p(Tensor({3}, {1.0, -2.0, 3.5}));
    p.ensure_grad();
    const std::vector<double> before = p.value.vec();
    AdamW opt;
    opt.step({{"p", &p}}, 0.1);
    REQUIRE(p.value.vec() == before);
}

TEST_CASE("adamw first step approximates -lr * sign(g)") {
    for (double g : {0.7, -2.3, 123.0}) {
        Parameter p(Tensor::scalar(1.0));
        p.ensure_grad();
        p.grad[0] = g;
        AdamW opt;
        opt.step({{"p", &p}}, 1e-2);
        REQUIRE(p.value[0] == Catch::Approx(1.0 - 1e-2 * (g > 0 ? 1.0 : -1.0)).margin(1e-6));
    }
}

TEST_CASE("adamw decoupled weight decay scales the parameter") {
    Parameter p(Tensor({2}, {2.0, -4.0}));
    p.ensure_grad();
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.1});
    opt.step({{"p", &p}}, 0.5);
    REQUIRE(p.value[0] == Catch::Approx(2.0 * (1.0 - 0.5 * 0.1)).margin(1e-12));
    REQUIRE(p.value[1] == Catch::Approx(-4.0 * (1.0 - 0.5 * 0.1)).margin(1e-12));
}

TEST_CASE("adamw never touches frozen parameters") {
    Parameter p(Tensor::scalar(5.0));
    p.trainable = false;
    AdamW opt;
    opt.step({{"p", &p}}, 1.0);
    REQUIRE(p.value[0] == 5.0);
}

TEST_CASE("param_partition realizes the recipes") {
    ToyWorld w = make_world(4, 3);
    Model model(toy_model_config(w.vocab.size(), 4));
    model.init(7);

    SECTION("base PT trains only the connector") {
        PartitionSummary s = param_partition("base", "pt", model);
        REQUIRE(s.by_submodule.at("connector").frozen == 0);
        REQUIRE(s.by_submodule.at("vision").trainable == 0);
        REQUIRE(s.by_submodule.at("lm").trainable == 0);
    }
    SECTION("base SFT keeps the vision encoder frozen, LM and connector train") {
        PartitionSummary s = param_partition("base", "sft", model);
        REQUIRE(s.by_submodule.at("vision").trainable == 0);
        REQUIRE(s.by_submodule.at("connector").frozen == 0);
        REQUIRE(s.by_submodule.at("lm").frozen == 0);
    }
    SECTION("share PT freezes the first k vision blocks") {
        PartitionSummary s = param_partition("share", "pt", model, 2);
        model.visit_params([&](const std::string& name, Parameter& p) {
            if (name.rfind("vision.block0", 0) == 0 || name.rfind("vision.block1", 0) == 0 ||
                name.rfind("vision.patch_embed", 0) == 0 || name == "vision.pos") {
                REQUIRE_FALSE(p.trainable);
            }
            if (name.rfind("vision.block2", 0) == 0 || name.rfind("vision.block3", 0) == 0 ||
                name.rfind("vision.final_ln", 0) == 0 || name.rfind("lm.", 0) == 0 ||
                name.rfind("connector.", 0) == 0) {
                REQUIRE(p.trainable);
            }
        });
        REQUIRE(s.by_submodule.at("vision").trainable > 0);
        REQUIRE(s.by_submodule.at("vision").frozen > 0);
    }
    SECTION("partition is exclusive and exhaustive") {
        PartitionSummary s = param_partition("share", "pt", model, 2);
        REQUIRE(s.trainable + s.frozen == model.param_count());
    }
    SECTION("share PT trainable count strictly exceeds base PT's") {
        const size_t base = param_partition("base", "pt", model).trainable;
        const size_t share = param_partition("share", "pt", model, 2).trainable;
        REQUIRE(share > base);
    }
    SECTION("unknown recipe rejected") {
        REQUIRE_THROWS_AS(param_partition("warp", "pt", model), ConfigError);
    }
}

TEST_CASE("resolve_freeze_k follows the depth rule") {
    RecipeConfig c = RecipeConfig::defaults("share", "pt");
    c.init_connector_from = "x";
    REQUIRE(resolve_freeze_k(c, 24) == 12);
    REQUIRE(resolve_freeze_k(c, 4) == 2);
    c.freeze_prefix_k = 3;
    REQUIRE(resolve_freeze_k(c, 24) == 3);
}

TEST_CASE("share PT config without an init checkpoint is rejected") {
    RecipeConfig c = RecipeConfig::defaults("share", "pt");
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c.init_connector_from = "base.ckpt";
    REQUIRE_NOTHROW(c.validate());
}

TEST_CASE("paper-faithful recipe defaults") {
    RecipeConfig base_pt = RecipeConfig::defaults("base", "pt");
    REQUIRE(base_pt.learning_rate == 1e-3);
    REQUIRE(base_pt.batch_size == 256);
    REQUIRE(base_pt.epochs == 1);
    RecipeConfig sft = RecipeConfig::defaults("base", "sft");
    REQUIRE(sft.learning_rate == 2e-5);
    REQUIRE(sft.batch_size == 128);
    RecipeConfig share_pt = RecipeConfig::defaults("share", "pt");
    REQUIRE(share_pt.learning_rate == 2e-5);
    REQUIRE(share_pt.batch_size == 256);
}

TEST_CASE("frozen parameters stay bitwise fixed through training") {
    ToyWorld w = make_world(6, 11);
    Model model(toy_model_config(w.vocab.size()));
    model.init(13);
    param_partition("base", "sft", model);
    auto before = snapshot(model);
    AdamW opt;
    RecipeConfig rc = quick_recipe("base", "sft", 1e-3, 3, 2);
    train_stage(model, w.items("sft"), rc, 5, opt);
    model.visit_params([&](const std::string& name, Parameter& p) {
        if (!p.trainable) {
            REQUIRE(p.value.vec() == before.at(name).vec());
        } else {
            REQUIRE(p.value.vec() != before.at(name).vec());
        }
    });
}

TEST_CASE("training is deterministic in the seed") {
    ToyWorld w = make_world(6, 17);
    auto run = [&]() {
        Model model(toy_model_config(w.vocab.size()));
        model.init(23);
        param_partition("base", "sft", model);
        AdamW opt;
        RecipeConfig rc = quick_recipe("base", "sft", 1e-3, 2, 2);
        return train_stage(model, w.items("sft"), rc, 29, opt).loss_log;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a == b); // bitwise
}

TEST_CASE("overfit: 8 samples, 200 steps, loss below 0.05") {
    ToyWorld w = make_world(8, 31);
    ModelConfig cfg = toy_model_config(w.vocab.size());
    cfg.lm.width = 48;
    cfg.lm.depth = 2;
    Model model(cfg);
    model.init(37);
    param_partition("base", "sft", model);
    AdamW opt;
    RecipeConfig rc = quick_recipe("base", "sft", 5e-3, 8, 200);
    TrainResult res = train_stage(model, w.items("sft"), rc, 41, opt);
    REQUIRE(res.steps_run == 200);
    REQUIRE(res.loss_log.back() < 0.05);
}

TEST_CASE("checkpoint round trip restores training bitwise") {
    ToyWorld w = make_world(6, 43);
    const fs::path dir = fs::temp_directory_path() / "tinymm_ckpt_test";
    fs::create_directories(dir);
    const std::string ckpt = (dir / "mid.ckpt").string();

    RecipeConfig rc = quick_recipe("base", "sft", 1e-3, 2, 4);
    auto items = [&]() { return w.items("sft"); };

    // uninterrupted run
    Model a(toy_model_config(w.vocab.size()));
    a.init(47);
    param_partition("base", "sft", a);
    AdamW opt_a;
    TrainResult full = train_stage(a, items(), rc, 53, opt_a);

    // interrupted at step 5, checkpointed, resumed
    Model b(toy_model_config(w.vocab.size()));
    b.init(47);
    param_partition("base", "sft", b);
    AdamW opt_b;
    TrainControl first_leg;
    first_leg.stop_after_steps = 5;
    TrainResult head = train_stage(b, items(), rc, 53, opt_b, first_leg);
    save_checkpoint(ckpt, b, w.vocab, rc, head.steps_run, 53, Rng(53).state(), &opt_b);

    Checkpoint ck = read_checkpoint(ckpt);
    Vocab restored_vocab;
    Model c = model_from_checkpoint(ck, restored_vocab);
    REQUIRE(restored_vocab.tokens() == w.vocab.tokens());
    AdamW opt_c(rc.adamw());
    opt_c.restore(ck.header.at("opt").at("adam_step").get<int>(), ck.moments);
    TrainControl second_leg;
    second_leg.start_step = ck.step();
    TrainResult tail = train_stage(c, items(), rc, 53, opt_c, second_leg);

    std::vector<double> stitched = head.loss_log;
    stitched.insert(stitched.end(), tail.loss_log.begin(), tail.loss_log.end());
    REQUIRE(stitched == full.loss_log); // bitwise

    auto fa = snapshot(a), fc = snapshot(c);
    for (const auto& [name, t] : fa) REQUIRE(t.vec() == fc.at(name).vec());

    SECTION("wrong config hash is an explicit error") {
        ModelConfig other = toy_model_config(w.vocab.size());
        other.lm.width = 32;
        Model m(other);
        m.init(1);
        REQUIRE_THROWS_AS(load_params_into(m, w.vocab, ck), ConfigError);
    }
    SECTION("re-reading the checkpoint gives identical data") {
        Checkpoint again = read_checkpoint(ckpt);
        REQUIRE(again.header == ck.header);
        for (const auto& [name, t] : ck.params) REQUIRE(again.params.at(name).vec() == t.vec());
    }
    fs::remove_all(dir);
}

TEST_CASE("share PT starts from the base connector bitwise") {
    ToyWorld w = make_world(6, 59);
    const fs::path dir = fs::temp_directory_path() / "tinymm_share_init_test";
    fs::create_directories(dir);
    const std::string base_ckpt = (dir / "base_pt.ckpt").string();

    Model base(toy_model_config(w.vocab.size()));
    base.init(61);
    param_partition("base", "pt", base);
    AdamW opt;
    RecipeConfig rc = quick_recipe("base", "pt", 1e-3, 3, 1);
    train_stage(base, w.items("pt"), rc, 67, opt);
    save_checkpoint(base_ckpt, base, w.vocab, rc, 2, 67, Rng(67).state(), &opt);

    Model share(toy_model_config(w.vocab.size()));
    share.init(71); // different init; connector must be overwritten
    Checkpoint ck = read_checkpoint(base_ckpt);
    load_connector_params(share, w.vocab, ck);
    base.visit_params([&](const std::string& name, Parameter& pb) {
        if (name.rfind("connector.", 0) != 0) return;
        share.visit_params([&](const std::string& n2, Parameter& ps) {
            if (n2 == name) REQUIRE(ps.value.vec() == pb.value.vec());
        });
    });
    fs::remove_all(dir);
}

TEST_CASE("training rejects an empty trainable set and reports divergence") {
    ToyWorld w = make_world(4, 73);
    Model model(toy_model_config(w.vocab.size()));
    model.init(79);
    model.visit_params([](const std::string&, Parameter& p) { p.trainable = false; });
    AdamW opt;
    RecipeConfig rc = quick_recipe("base", "pt", 1e-3, 2, 1);
    REQUIRE_THROWS_AS(train_stage(model, w.items("pt"), rc, 83, opt), ConfigError);
}
