#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "tinymm/conversation.hpp"
#include "tinymm/rng.hpp"

namespace tinymm {

static_assert(std::endian::native == std::endian::little,
              "image archive writes little-endian float32");

enum class ShapeKind { circle, square, triangle };
enum class ColorKind { red, green, blue, yellow };

inline const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        default: return "triangle";
    }
}

inline const char* color_name(ColorKind c) {
    switch (c) {
        case ColorKind::red: return "red";
        case ColorKind::green: return "green";
        case ColorKind::blue: return "blue";
        default: return "yellow";
    }
}

inline std::array<double, 3> color_rgb(ColorKind c) {
    switch (c) {
        case ColorKind::red: return {1.0, 0.0, 0.0};
        case ColorKind::green: return {0.0, 1.0, 0.0};
        case ColorKind::blue: return {0.0, 0.0, 1.0};
        default: return {1.0, 1.0, 0.0};
    }
}

// 3x3 grid cell, row-major.
inline std::string cell_name(int cell) {
    static const char* rows[] = {"top", "middle", "bottom"};
    static const char* cols[] = {"left", "center", "right"};
    return std::string(rows[cell / 3]) + " " + cols[cell % 3];
}

struct SceneObject {
    ShapeKind shape;
    ColorKind color;
    int cell; // 0..8
};

struct SceneSpec {
    std::vector<SceneObject> objects;
    int resolution = 24;

    void validate() const {
        if (objects.empty() || objects.size() > 3) {
            throw ValidationError("scene must contain 1..3 objects, got " +
                                  std::to_string(objects.size()));
        }
        if (resolution < 9 || resolution % 3 != 0) {
            throw ValidationError("scene resolution must be a positive multiple of 3");
        }
        std::set<int> cells;
        for (const SceneObject& o : objects) {
            if (o.cell < 0 || o.cell > 8) throw ValidationError("grid cell out of range");
            if (!cells.insert(o.cell).second) {
                throw ValidationError("two objects share grid cell " + std::to_string(o.cell));
            }
        }
    }

    std::vector<std::tuple<int, int, int>> triples() const {
        std::vector<std::tuple<int, int, int>> out;
        for (const SceneObject& o : objects)
            out.emplace_back(static_cast<int>(o.shape), static_cast<int>(o.color), o.cell);
        return out;
    }
};

// Deterministic rasterization: filled shapes on a white background, one per
// grid cell, pixel-center inclusion tests.
inline Tensor render_scene(const SceneSpec& spec) {
    spec.validate();
    const int res = spec.resolution;
    const int s = res / 3;
    Tensor img = Tensor::full({3, res, res}, 1.0);
    const double margin = s / 8.0;
    for (const SceneObject& o : spec.objects) {
        const int cy0 = (o.cell / 3) * s;
        const int cx0 = (o.cell % 3) * s;
        const auto rgb = color_rgb(o.color);
        for (int y = cy0; y < cy0 + s; ++y) {
            for (int x = cx0; x < cx0 + s; ++x) {
                const double py = y + 0.5 - cy0;
                const double px = x + 0.5 - cx0;
                bool inside = false;
                switch (o.shape) {
                    case ShapeKind::square:
                        inside = py >= margin && py <= s - margin && px >= margin &&
                                 px <= s - margin;
                        break;
                    case ShapeKind::circle: {
                        const double r = s / 2.0 - margin;
                        inside = (py - s / 2.0) * (py - s / 2.0) + (px - s / 2.0) * (px - s / 2.0) <=
                                 r * r;
                        break;
                    }
                    case ShapeKind::triangle: {
                        const double h = s - 2 * margin;
                        if (py >= margin && py <= s - margin) {
                            const double half = (py - margin) / h * (s / 2.0 - margin);
                            inside = std::abs(px - s / 2.0) <= half;
                        }
                        break;
                    }
                }
                if (inside) {
                    for (int c = 0; c < 3; ++c)
                        img[(static_cast<size_t>(c) * res + static_cast<size_t>(y)) * res +
                            static_cast<size_t>(x)] = rgb[static_cast<size_t>(c)];
                }
            }
        }
    }
    return img;
}

// ---- question/answer oracle --------------------------------------------------
// The generator produces questions from these templates and the eval module
// reuses this same pure function as ground truth.

inline std::optional<std::string> answer_for(const SceneSpec& spec, const std::string& question) {
    const std::string color_prefix = "what color is the ";
    const std::string count_q = "how many objects are there?";
    const std::string presence_prefix = "is there a ";
    if (question.rfind(color_prefix, 0) == 0 && question.back() == '?') {
        const std::string shape = question.substr(color_prefix.size(),
                                                  question.size() - color_prefix.size() - 1);
        const SceneObject* found = nullptr;
        int hits = 0;
        for (const SceneObject& o : spec.objects) {
            if (shape_name(o.shape) == shape) {
                found = &o;
                ++hits;
            }
        }
        if (hits != 1) return std::nullopt; // ambiguous or absent
        return std::string(color_name(found->color));
    }
    if (question == count_q) {
        static const char* words[] = {"", "one", "two", "three"};
        return std::string(words[spec.objects.size()]);
    }
    if (question.rfind(presence_prefix, 0) == 0 && question.back() == '?') {
        const std::string rest = question.substr(presence_prefix.size(),
                                                 question.size() - presence_prefix.size() - 1);
        const size_t space = rest.find(' ');
        if (space == std::string::npos) return std::nullopt;
        const std::string color = rest.substr(0, space);
        const std::string shape = rest.substr(space + 1);
        for (const SceneObject& o : spec.objects) {
            if (color == color_name(o.color) && shape == shape_name(o.shape)) return "yes";
        }
        return "no";
    }
    return std::nullopt;
}

inline std::string question_kind(const std::string& question) {
    if (question.rfind("what color", 0) == 0) return "color";
    if (question.rfind("how many", 0) == 0) return "count";
    if (question.rfind("is there", 0) == 0) return "presence";
    return "other";
}

// ---- record generation ---------------------------------------------------------

namespace detail {

inline std::string caption_for(const SceneSpec& spec) {
    std::vector<const SceneObject*> ordered;
    for (const SceneObject& o : spec.objects) ordered.push_back(&o);
    std::sort(ordered.begin(), ordered.end(),
              [](const SceneObject* a, const SceneObject* b) { return a->cell < b->cell; });
    std::string out;
    for (size_t i = 0; i < ordered.size(); ++i) {
        if (i > 0) out += (i + 1 == ordered.size()) ? " and " : ", ";
        out += "a " + std::string(color_name(ordered[i]->color)) + " " +
               shape_name(ordered[i]->shape) + " in the " + cell_name(ordered[i]->cell);
    }
    return out + ".";
}

// shapes that occur exactly once are fair game for a color question
inline std::vector<ShapeKind> unique_shapes(const SceneSpec& spec) {
    std::map<int, int> counts;
    for (const SceneObject& o : spec.objects) counts[static_cast<int>(o.shape)]++;
    std::vector<ShapeKind> out;
    for (const auto& [shape, n] : counts) {
        if (n == 1) out.push_back(static_cast<ShapeKind>(shape));
    }
    return out;
}

inline SceneSpec random_scene(Rng& rng, int resolution) {
    SceneSpec spec;
    spec.resolution = resolution;
    const int n = 1 + static_cast<int>(rng.below(3));
    std::vector<int> cells{0, 1, 2, 3, 4, 5, 6, 7, 8};
    rng.shuffle(cells);
    for (int i = 0; i < n; ++i) {
        spec.objects.push_back({static_cast<ShapeKind>(rng.below(3)),
                                static_cast<ColorKind>(rng.below(4)),
                                cells[static_cast<size_t>(i)]});
    }
    return spec;
}

} // namespace detail

// Multi-turn record for a scene: caption turn, then QA turns (color question
// when some shape is unambiguous, a count question half the time, and always
// one presence probe with the requested polarity).
inline ConversationRecord record_for_scene(const SceneSpec& spec, Rng& rng, bool presence_positive,
                                           const std::string& image_ref) {
    ConversationRecord rec;
    rec.image_ref = image_ref;
    rec.turns.push_back({Role::human, "<image>\ndescribe the image."});
    rec.turns.push_back({Role::assistant, detail::caption_for(spec)});

    std::vector<std::string> questions;
    const auto uniq = detail::unique_shapes(spec);
    if (!uniq.empty()) {
        const ShapeKind s = uniq[static_cast<size_t>(rng.below(uniq.size()))];
        questions.push_back("what color is the " + std::string(shape_name(s)) + "?");
    }
    if (rng.below(2) == 0) questions.push_back("how many objects are there?");

    std::string presence_q;
    if (presence_positive) {
        const SceneObject& o = spec.objects[static_cast<size_t>(rng.below(spec.objects.size()))];
        presence_q = "is there a " + std::string(color_name(o.color)) + " " + shape_name(o.shape) + "?";
    } else {
        std::set<std::pair<int, int>> present;
        for (const SceneObject& o : spec.objects)
            present.insert({static_cast<int>(o.shape), static_cast<int>(o.color)});
        while (true) {
            const int shape = static_cast<int>(rng.below(3));
            const int color = static_cast<int>(rng.below(4));
            if (!present.count({shape, color})) {
                presence_q = "is there a " + std::string(color_name(static_cast<ColorKind>(color))) +
                             " " + shape_name(static_cast<ShapeKind>(shape)) + "?";
                break;
            }
        }
    }
    questions.push_back(presence_q);
    rng.shuffle(questions);

    for (const std::string& q : questions) {
        rec.turns.push_back({Role::human, q});
        rec.turns.push_back({Role::assistant, *answer_for(spec, q)});
    }
    return rec;
}

inline std::pair<SceneSpec, ConversationRecord> gen_record(std::uint64_t seed, int resolution = 24,
                                                           std::optional<bool> presence_positive = {}) {
    Rng rng = Rng::fork(seed, 7770);
    SceneSpec spec = detail::random_scene(rng, resolution);
    const bool positive = presence_positive.value_or((seed & 1) == 0);
    return {spec, record_for_scene(spec, rng, positive, "img" + std::to_string(seed))};
}

// ---- image archive ------------------------------------------------------------
// One flat binary file of float32 C x H x W arrays plus a JSON index mapping
// image id to its float offset.

class ImageArchive {
public:
    void add(const std::string& id, const Tensor& image) {
        if (index_.count(id)) throw ValidationError("duplicate image id " + id);
        if (shape_.empty()) {
            shape_ = image.shape();
        } else if (shape_ != image.shape()) {
            throw ShapeError("archive images must share one shape, got " +
                             shape_str(image.shape()) + " after " + shape_str(shape_));
        }
        index_[id] = floats_.size();
        for (size_t i = 0; i < image.numel(); ++i) floats_.push_back(static_cast<float>(image[i]));
    }

    Tensor image(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw IndexError("image id not in archive: " + id);
        size_t n = 1;
        for (int d : shape_) n *= static_cast<size_t>(d);
        Tensor out(shape_);
        for (size_t i = 0; i < n; ++i) out[i] = static_cast<double>(floats_[it->second + i]);
        return out;
    }

    size_t size() const { return index_.size(); }

    void save(const std::string& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        std::ofstream bin(fs::path(dir) / "images.bin", std::ios::binary | std::ios::trunc);
        if (!bin) throw IoError("cannot write images.bin under " + dir);
        bin.write(reinterpret_cast<const char*>(floats_.data()),
                  static_cast<std::streamsize>(floats_.size() * sizeof(float)));
        nlohmann::json idx;
        idx["shape"] = shape_;
        nlohmann::json offsets = nlohmann::json::object();
        for (const auto& [id, off] : index_) offsets[id] = off;
        idx["offsets"] = offsets;
        std::ofstream meta(fs::path(dir) / "images.json", std::ios::trunc);
        meta << idx.dump(2) << '\n';
    }

    static ImageArchive load(const std::string& dir) {
        namespace fs = std::filesystem;
        std::ifstream meta(fs::path(dir) / "images.json");
        if (!meta) throw IoError("cannot open images.json under " + dir);
        nlohmann::json idx = nlohmann::json::parse(meta);
        ImageArchive a;
        a.shape_ = idx.at("shape").get<std::vector<int>>();
        for (const auto& [id, off] : idx.at("offsets").items()) a.index_[id] = off.get<size_t>();
        std::ifstream bin(fs::path(dir) / "images.bin", std::ios::binary);
        if (!bin) throw IoError("cannot open images.bin under " + dir);
        bin.seekg(0, std::ios::end);
        const auto bytes = static_cast<size_t>(bin.tellg());
        bin.seekg(0);
        a.floats_.resize(bytes / sizeof(float));
        bin.read(reinterpret_cast<char*>(a.floats_.data()), static_cast<std::streamsize>(bytes));
        return a;
    }

private:
    std::vector<int> shape_;
    std::vector<float> floats_;
    std::map<std::string, size_t> index_;
};

// ---- corpus generation ----------------------------------------------------------

struct CorpusSummary {
    std::vector<SceneSpec> train, val, test;
    int n = 0;
    std::uint64_t seed = 0;
    int resolution = 0;
};

namespace detail {

using Triple = std::tuple<int, int, int>; // shape, color, cell

inline SceneSpec scene_from_pool(const std::vector<Triple>& pool, Rng& rng, int resolution) {
    std::map<int, std::vector<Triple>> by_cell;
    for (const Triple& t : pool) by_cell[std::get<2>(t)].push_back(t);
    std::vector<int> cells;
    for (const auto& [cell, opts] : by_cell) cells.push_back(cell);
    int n = 1 + static_cast<int>(rng.below(3));
    n = std::min<int>(n, static_cast<int>(cells.size()));
    rng.shuffle(cells);
    SceneSpec spec;
    spec.resolution = resolution;
    for (int i = 0; i < n; ++i) {
        const auto& opts = by_cell[cells[static_cast<size_t>(i)]];
        const Triple& t = opts[static_cast<size_t>(rng.below(opts.size()))];
        spec.objects.push_back({static_cast<ShapeKind>(std::get<0>(t)),
                                static_cast<ColorKind>(std::get<1>(t)), std::get<2>(t)});
    }
    return spec;
}

} // namespace detail

// Generates n records split 80/10/10; test scenes draw from a reserved pool
// of (shape, color, cell) triples that never occurs in train or val.
inline CorpusSummary gen_corpus(int n, std::uint64_t seed, const std::string& out_dir,
                                int resolution = 24) {
    if (n < 10) throw ConfigError("corpus needs at least 10 records, got " + std::to_string(n));
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    std::vector<detail::Triple> all;
    for (int s = 0; s < 3; ++s)
        for (int c = 0; c < 4; ++c)
            for (int cell = 0; cell < 9; ++cell) all.emplace_back(s, c, cell);
    Rng pool_rng = Rng::fork(seed, 1);
    pool_rng.shuffle(all);
    const size_t held_out = 12;
    std::vector<detail::Triple> test_pool(all.begin(), all.begin() + held_out);
    std::vector<detail::Triple> train_pool(all.begin() + held_out, all.end());

    const int n_test = n / 10;
    const int n_val = n / 10;
    const int n_train = n - n_test - n_val;

    CorpusSummary summary;
    summary.n = n;
    summary.seed = seed;
    summary.resolution = resolution;

    ImageArchive archive;
    const struct SplitDef {
        const char* name;
        int count;
        std::vector<SceneSpec>* specs;
        const std::vector<detail::Triple>* pool;
    } splits[] = {
        {"train", n_train, &summary.train, &train_pool},
        {"val", n_val, &summary.val, &train_pool},
        {"test", n_test, &summary.test, &test_pool},
    };

    int global = 0;
    for (const auto& split : splits) {
        std::vector<ConversationRecord> records;
        for (int i = 0; i < split.count; ++i, ++global) {
            Rng rng = Rng::fork(seed, 100000 + static_cast<std::uint64_t>(global));
            SceneSpec spec = detail::scene_from_pool(*split.pool, rng, resolution);
            char idbuf[16];
            std::snprintf(idbuf, sizeof idbuf, "img%06d", global);
            const bool presence_positive = (i % 2) == 0; // balanced per split
            records.push_back(record_for_scene(spec, rng, presence_positive, idbuf));
            archive.add(idbuf, render_scene(spec));
            split.specs->push_back(spec);
        }
        save_jsonl((fs::path(out_dir) / (std::string(split.name) + ".jsonl")).string(), records);
    }
    archive.save(out_dir);

    nlohmann::json meta{{"n", n},
                        {"seed", seed},
                        {"resolution", resolution},
                        {"train", n_train},
                        {"val", n_val},
                        {"test", n_test}};
    std::ofstream mf(fs::path(out_dir) / "meta.json", std::ios::trunc);
    mf << meta.dump(2) << '\n';
    return summary;
}

} // namespace tinymm
