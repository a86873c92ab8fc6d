#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "tinymm/connector.hpp"
#include "tinymm/conversation.hpp"
#include "tinymm/lm.hpp"
#include "tinymm/vision.hpp"

namespace tinymm {

struct ModelConfig {
    VisionConfig vision;
    ConnectorConfig connector;
    LmConfig lm;

    void validate() const {
        vision.validate();
        connector.validate();
        lm.validate();
    }
};

// The composed multimodal model: vision encoder, connector, decoder LM.
class Model {
public:
    Model() = default;

    explicit Model(ModelConfig cfg) : cfg_(cfg), vision_(cfg.vision), lm_(cfg.lm) {
        cfg_.validate();
    }

    void init(std::uint64_t seed) {
        Rng rng(seed);
        vision_.init(rng);
        Rng crng = Rng::fork(seed, 1);
        connector_ = Connector(cfg_.connector, cfg_.vision.width, cfg_.lm.width, crng);
        Rng lrng = Rng::fork(seed, 2);
        lm_.init(lrng);
    }

    const ModelConfig& config() const { return cfg_; }
    VisionEncoder& vision() { return vision_; }
    const VisionEncoder& vision() const { return vision_; }
    Connector& connector() { return connector_; }
    const Connector& connector() const { return connector_; }
    Lm& lm() { return lm_; }
    const Lm& lm() const { return lm_; }

    void visit_params(const ParamVisitor& fn) {
        vision_.visit_params("vision.", fn);
        connector_.visit_params("connector.", fn);
        lm_.visit_params("lm.", fn);
    }

    std::vector<std::pair<std::string, Parameter*>> named_params() {
        std::vector<std::pair<std::string, Parameter*>> out;
        visit_params([&](const std::string& name, Parameter& p) { out.emplace_back(name, &p); });
        return out;
    }

    size_t param_count() {
        size_t n = 0;
        visit_params([&](const std::string&, Parameter& p) { n += p.value.numel(); });
        return n;
    }

    size_t trainable_param_count() {
        size_t n = 0;
        visit_params([&](const std::string&, Parameter& p) {
            if (p.trainable) n += p.value.numel();
        });
        return n;
    }

    void zero_grads() {
        visit_params([](const std::string&, Parameter& p) { p.clear_grad(); });
    }

    // image -> connector output (the visual tokens spliced into the stream)
    Var visual_tokens(Graph& g, const Tensor& image) const {
        return connector_.project(g, vision_.encode(g, image));
    }

private:
    ModelConfig cfg_;
    VisionEncoder vision_;
    Connector connector_;
    Lm lm_;
};

// Text embedding stream with the IMAGE position replaced by the m visual
// rows. labels/visual mask are realigned to the new length N - 1 + m.
struct SplicedSequence {
    Var embeddings;
    std::vector<int> labels;
    std::vector<bool> is_visual;
};

inline SplicedSequence splice_visual(Graph& g, const Lm& lm, const TokenizedSample& sample,
                                     Var visual) {
    int image_tokens = 0;
    for (int id : sample.ids) image_tokens += id == Vocab::kImage;
    if (image_tokens != 1 || sample.image_pos < 0 ||
        sample.image_pos >= static_cast<int>(sample.ids.size()) ||
        sample.ids[static_cast<size_t>(sample.image_pos)] != Vocab::kImage) {
        throw ValidationError("splice_visual expects exactly one IMAGE token, found " +
                              std::to_string(image_tokens));
    }
    const int p = sample.image_pos;
    const int n = static_cast<int>(sample.ids.size());
    const int m = visual.value().dim(0);

    std::vector<int> before(sample.ids.begin(), sample.ids.begin() + p);
    std::vector<int> after(sample.ids.begin() + p + 1, sample.ids.end());

    SplicedSequence out;
    out.embeddings = concat_rows({lm.embed_ids(g, before), visual, lm.embed_ids(g, after)});
    out.labels.assign(sample.labels.begin(), sample.labels.begin() + p);
    out.labels.insert(out.labels.end(), static_cast<size_t>(m), kIgnoreLabel);
    out.labels.insert(out.labels.end(), sample.labels.begin() + p + 1, sample.labels.end());
    out.is_visual.assign(static_cast<size_t>(n - 1 + m), false);
    for (int i = 0; i < m; ++i) out.is_visual[static_cast<size_t>(p + i)] = true;
    return out;
}

struct ModelForward {
    Var loss;
    Var logits;                    // L' x |V|
    std::vector<int> next_labels;  // target for logit row i is next_labels[i]
    int supervised = 0;
};

// Shared forward for both objectives: splice, decode, tied head, mean
// next-token cross-entropy over positions whose (shifted) label is
// supervised. Logit row i predicts the token at stream position i + 1.
inline ModelForward multimodal_forward(Graph& g, const Model& model, const Tensor& image,
                                       const TokenizedSample& sample) {
    SplicedSequence seq = splice_visual(g, model.lm(), sample, model.visual_tokens(g, image));
    Var hidden = model.lm().decode(g, seq.embeddings);
    ModelForward f;
    f.logits = model.lm().logits(g, hidden);
    f.next_labels.assign(seq.labels.begin() + 1, seq.labels.end());
    f.next_labels.push_back(kIgnoreLabel); // nothing follows the last position
    f.loss = cross_entropy_rows(f.logits, f.next_labels);
    const int V = model.lm().config().vocab_size;
    for (int l : f.next_labels) f.supervised += is_supervised(l, V) ? 1 : 0;
    return f;
}

// Eq.-3-style objective: mean cross-entropy over assistant-token positions
// only (the sample's labels carry the mask).
inline Var loss_sft(Graph& g, const Model& model, const Tensor& image,
                    const TokenizedSample& sample) {
    return multimodal_forward(g, model, image, sample).loss;
}

// Eq.-2-style objective on a caption pair; identical computation, since the
// caption sample's only supervised span is the first response.
inline Var loss_pretrain(Graph& g, const Model& model, const Tensor& image,
                         const TokenizedSample& caption_sample) {
    return multimodal_forward(g, model, image, caption_sample).loss;
}

namespace detail {

inline int argmax_row(const Tensor& t, int row) {
    int best = 0;
    for (int j = 1; j < t.dim(1); ++j) {
        if (t.at(row, j) > t.at(row, best)) best = j;
    }
    return best;
}

} // namespace detail

// Greedy decoding from a prompt prefix (which must end in a human turn; the
// assistant marker is appended by render_prompt). Deterministic; stops at
// EOS, the token budget, or the LM's length limit.
inline std::string generate(const Model& model, const Tensor& image,
                            const std::vector<Turn>& prefix, int max_new, const Vocab& vocab) {
    TokenizedSample prompt = render_prompt(prefix, vocab);
    Tensor visual;
    {
        Graph g;
        visual = model.visual_tokens(g, image).value();
    }
    std::vector<int> ids = prompt.ids;
    std::vector<int> generated;
    const int max_len = model.lm().config().max_seq_len;
    for (int step = 0; step < max_new; ++step) {
        const int stream_len = static_cast<int>(ids.size()) - 1 + visual.dim(0);
        if (stream_len >= max_len) break;
        Graph g;
        TokenizedSample cur;
        cur.ids = ids;
        cur.labels.assign(ids.size(), kIgnoreLabel);
        cur.image_pos = prompt.image_pos;
        SplicedSequence seq = splice_visual(g, model.lm(), cur, g.constant(visual));
        Var hidden = model.lm().decode(g, seq.embeddings);
        Var last = slice_rows(hidden, stream_len - 1, stream_len);
        Var logits = model.lm().logits(g, last);
        const int next = detail::argmax_row(logits.value(), 0);
        if (next == Vocab::kEos) break;
        ids.push_back(next);
        generated.push_back(next);
    }
    return vocab.decode(generated, /*image_as_placeholder=*/false);
}

// Batch of (image, sample) pairs. pad() realizes the spec'd common-length
// form: PAD ids with IGNORE labels; training iterates the unpadded items and
// averages per-sample losses, which the padding would not change anyway.
struct MultimodalBatch {
    std::vector<std::pair<Tensor, TokenizedSample>> items;

    int max_length() const {
        int n = 0;
        for (const auto& [img, s] : items) n = std::max(n, s.length());
        return n;
    }

    void pad() {
        const int n = max_length();
        for (auto& [img, s] : items) {
            s.ids.resize(static_cast<size_t>(n), Vocab::kPad);
            s.labels.resize(static_cast<size_t>(n), kIgnoreLabel);
        }
    }
};

} // namespace tinymm
