#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "tinymm/data.hpp"

using namespace tinymm;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("render_scene guards") {
    SceneSpec empty;
    REQUIRE_THROWS_AS(render_scene(empty), ValidationError);
    SceneSpec overlap;
    overlap.objects = {{ShapeKind::circle, ColorKind::red, 4},
                       {ShapeKind::square, ColorKind::blue, 4}};
    REQUIRE_THROWS_AS(render_scene(overlap), ValidationError);
}

TEST_CASE("render_scene is deterministic and bounded") {
    SceneSpec spec;
    spec.objects = {{ShapeKind::triangle, ColorKind::yellow, 0},
                    {ShapeKind::circle, ColorKind::blue, 8}};
    Tensor a = render_scene(spec);
    Tensor b = render_scene(spec);
    REQUIRE(a.vec() == b.vec());
    for (double v : a.vec()) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("red circle dominates the red channel inside its cell") {
    SceneSpec spec;
    spec.objects = {{ShapeKind::circle, ColorKind::red, 4}};
    Tensor img = render_scene(spec);
    const int res = spec.resolution, s = res / 3;
    const int cy0 = (4 / 3) * s, cx0 = (4 % 3) * s;
    double mass[3] = {0, 0, 0};
    for (int c = 0; c < 3; ++c)
        for (int y = cy0; y < cy0 + s; ++y)
            for (int x = cx0; x < cx0 + s; ++x)
                mass[c] += img[(static_cast<size_t>(c) * res + y) * res + x];
    REQUIRE(mass[0] > mass[1]);
    REQUIRE(mass[0] > mass[2]);
    REQUIRE(mass[1] == mass[2]); // green and blue drop identically
}

TEST_CASE("gen_record answers are consistent with the scene by construction") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 99ull}) {
        auto [spec, rec] = gen_record(seed);
        rec.validate();
        for (size_t i = 2; i < rec.turns.size(); i += 2) {
            const std::string& q = rec.turns[i].text;
            auto gold = answer_for(spec, q);
            REQUIRE(gold.has_value());
            REQUIRE(rec.turns[i + 1].text == *gold);
        }
    }
}

TEST_CASE("presence negatives reference absent shape-color pairs") {
    int negatives = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto [spec, rec] = gen_record(seed, 24, false);
        for (size_t i = 2; i < rec.turns.size(); i += 2) {
            if (question_kind(rec.turns[i].text) != "presence") continue;
            REQUIRE(rec.turns[i + 1].text == "no");
            ++negatives;
        }
    }
    REQUIRE(negatives == 40); // every record carries exactly one probe
}

TEST_CASE("gen_record is deterministic in the seed") {
    auto [spec_a, rec_a] = gen_record(42);
    auto [spec_b, rec_b] = gen_record(42);
    REQUIRE(spec_a.triples() == spec_b.triples());
    REQUIRE(rec_a.turns.size() == rec_b.turns.size());
    for (size_t i = 0; i < rec_a.turns.size(); ++i)
        REQUIRE(rec_a.turns[i].text == rec_b.turns[i].text);
}

TEST_CASE("gen_corpus splits, disjointness, balance, reproducibility") {
    const fs::path dir_a = fs::temp_directory_path() / "tinymm_corpus_a";
    const fs::path dir_b = fs::temp_directory_path() / "tinymm_corpus_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    CorpusSummary sum = gen_corpus(20, 7, dir_a.string());

    SECTION("split sizes partition n") {
        REQUIRE(sum.train.size() == 16);
        REQUIRE(sum.val.size() == 2);
        REQUIRE(sum.test.size() == 2);
        REQUIRE(load_jsonl((dir_a / "train.jsonl").string()).size() == 16);
        REQUIRE(load_jsonl((dir_a / "val.jsonl").string()).size() == 2);
        REQUIRE(load_jsonl((dir_a / "test.jsonl").string()).size() == 2);
    }

    SECTION("train and test triples are disjoint") {
        std::set<std::tuple<int, int, int>> train_triples, test_triples;
        for (const SceneSpec& s : sum.train)
            for (auto t : s.triples()) train_triples.insert(t);
        for (const SceneSpec& s : sum.test)
            for (auto t : s.triples()) test_triples.insert(t);
        for (const auto& t : test_triples) REQUIRE_FALSE(train_triples.count(t));
    }

    SECTION("presence probes balanced within one") {
        for (const char* split : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
            int yes = 0, no = 0;
            for (const ConversationRecord& rec : load_jsonl((dir_a / split).string())) {
                for (size_t i = 2; i < rec.turns.size(); i += 2) {
                    if (question_kind(rec.turns[i].text) != "presence") continue;
                    (rec.turns[i + 1].text == "yes" ? yes : no)++;
                }
            }
            REQUIRE(std::abs(yes - no) <= 1);
        }
    }

    SECTION("regeneration is byte-identical") {
        gen_corpus(20, 7, dir_b.string());
        for (const char* f :
             {"train.jsonl", "val.jsonl", "test.jsonl", "images.bin", "images.json", "meta.json"}) {
            REQUIRE(read_file(dir_a / f) == read_file(dir_b / f));
        }
    }

    SECTION("archive round trip") {
        ImageArchive arch = ImageArchive::load(dir_a.string());
        REQUIRE(arch.size() == 20);
        Tensor img = arch.image("img000000");
        REQUIRE(img.shape() == std::vector<int>{3, 24, 24});
        Tensor direct = render_scene(sum.train[0]);
        for (size_t i = 0; i < img.numel(); ++i)
            REQUIRE(img[i] == static_cast<double>(static_cast<float>(direct[i])));
    }

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("gen_corpus rejects tiny corpora") {
    REQUIRE_THROWS_AS(gen_corpus(9, 1, (fs::temp_directory_path() / "nope").string()), ConfigError);
}
