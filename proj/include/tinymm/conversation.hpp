#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tinymm/ops.hpp"
#include "tinymm/vocab.hpp"

namespace tinymm {

inline constexpr const char* kImagePlaceholder = "<image>";

enum class Role { human, assistant };

struct Turn {
    Role role;
    std::string text;
};

// One image plus T (human, assistant) turn pairs. The image placeholder
// string appears exactly once, inside the first human turn.
struct ConversationRecord {
    std::string image_ref;
    std::vector<Turn> turns;

    int pair_count() const { return static_cast<int>(turns.size()) / 2; }

    void validate() const {
        if (turns.empty() || turns.size() % 2 != 0) {
            throw ValidationError("conversation must consist of whole (human, assistant) pairs");
        }
        for (size_t i = 0; i < turns.size(); ++i) {
            const Role expect = (i % 2 == 0) ? Role::human : Role::assistant;
            if (turns[i].role != expect) {
                throw ValidationError("turn " + std::to_string(i) +
                                      " breaks human/assistant alternation");
            }
        }
        int placeholders = 0;
        for (size_t i = 0; i < turns.size(); ++i) {
            size_t pos = 0;
            while ((pos = turns[i].text.find(kImagePlaceholder, pos)) != std::string::npos) {
                ++placeholders;
                if (i != 0) {
                    throw ValidationError("image placeholder outside the first human turn");
                }
                pos += std::char_traits<char>::length(kImagePlaceholder);
            }
        }
        if (placeholders != 1) {
            throw ValidationError("expected exactly one image placeholder, found " +
                                  std::to_string(placeholders));
        }
    }
};

// [begin, end) index range into a token sequence.
struct SpanRange {
    int begin = 0;
    int end = 0;
};

struct TokenizedSample {
    std::vector<int> ids;
    std::vector<int> labels; // vocab id where supervised, kIgnoreLabel elsewhere
    int image_pos = -1;      // index of the IMAGE token, -1 for text-only

    int length() const { return static_cast<int>(ids.size()); }

    int supervised_count(int vocab_size) const {
        int n = 0;
        for (int l : labels) n += is_supervised(l, vocab_size) ? 1 : 0;
        return n;
    }
};

inline Vocab build_vocab(const std::vector<std::string>& corpus) { return Vocab::build(corpus); }

// labels[i] = ids[i] inside an assistant span (the caller includes the
// span's EOS), IGNORE everywhere else.
inline std::vector<int> mask_labels(const std::vector<int>& ids,
                                    std::vector<SpanRange> assistant_spans) {
    std::sort(assistant_spans.begin(), assistant_spans.end(),
              [](const SpanRange& a, const SpanRange& b) { return a.begin < b.begin; });
    const int n = static_cast<int>(ids.size());
    int prev_end = 0;
    std::vector<int> labels(ids.size(), kIgnoreLabel);
    for (const SpanRange& s : assistant_spans) {
        if (s.begin < 0 || s.end > n || s.begin > s.end) {
            throw ValidationError("assistant span [" + std::to_string(s.begin) + ", " +
                                  std::to_string(s.end) + ") out of bounds for length " +
                                  std::to_string(n));
        }
        if (s.begin < prev_end) {
            throw ValidationError("overlapping assistant spans at index " +
                                  std::to_string(s.begin));
        }
        prev_end = s.end;
        for (int i = s.begin; i < s.end; ++i) labels[static_cast<size_t>(i)] = ids[static_cast<size_t>(i)];
    }
    return labels;
}

namespace detail {

// Appends the character tokens of a human turn, expanding the placeholder to
// the single IMAGE token.
inline void append_human_text(const std::string& text, const Vocab& vocab, std::vector<int>& ids,
                              int& image_pos) {
    size_t pos = text.find(kImagePlaceholder);
    if (pos == std::string::npos) {
        vocab.append_chars(text, ids);
        return;
    }
    vocab.append_chars(text.substr(0, pos), ids);
    image_pos = static_cast<int>(ids.size());
    ids.push_back(Vocab::kImage);
    vocab.append_chars(text.substr(pos + std::char_traits<char>::length(kImagePlaceholder)), ids);
}

inline TokenizedSample render_turns(const std::vector<Turn>& turns, const Vocab& vocab) {
    std::vector<int> ids{Vocab::kBos};
    std::vector<SpanRange> spans;
    int image_pos = -1;
    for (const Turn& t : turns) {
        if (t.role == Role::human) {
            ids.push_back(Vocab::kHuman);
            append_human_text(t.text, vocab, ids, image_pos);
        } else {
            ids.push_back(Vocab::kAssistant);
            const int begin = static_cast<int>(ids.size());
            vocab.append_chars(t.text, ids);
            ids.push_back(Vocab::kEos); // EOS belongs to the supervised span
            spans.push_back({begin, static_cast<int>(ids.size())});
        }
    }
    TokenizedSample s;
    s.labels = mask_labels(ids, spans);
    s.ids = std::move(ids);
    s.image_pos = image_pos;
    return s;
}

} // namespace detail

// Template: BOS, then per turn a role marker and the turn's characters, with
// EOS closing each assistant turn. No system slot.
inline TokenizedSample render_conversation(const ConversationRecord& rec, const Vocab& vocab) {
    rec.validate();
    return detail::render_turns(rec.turns, vocab);
}

// Pre-training view: the record truncated to its first turn pair, so the
// caption-pair ids are a prefix of the full rendering and the first response
// (plus its EOS) is the only supervised span.
inline TokenizedSample derive_caption_pair(const ConversationRecord& rec, const Vocab& vocab) {
    rec.validate();
    std::vector<Turn> first_pair(rec.turns.begin(), rec.turns.begin() + 2);
    return detail::render_turns(first_pair, vocab);
}

// Generation prompt: complete pairs followed by one trailing human turn,
// closed with the assistant role marker the decoder continues from.
inline TokenizedSample render_prompt(const std::vector<Turn>& prefix, const Vocab& vocab) {
    if (prefix.empty() || prefix.size() % 2 != 1 || prefix.back().role != Role::human) {
        throw ValidationError("prompt prefix must end with a human turn");
    }
    for (size_t i = 0; i < prefix.size(); ++i) {
        const Role expect = (i % 2 == 0) ? Role::human : Role::assistant;
        if (prefix[i].role != expect) {
            throw ValidationError("prompt turn " + std::to_string(i) +
                                  " breaks human/assistant alternation");
        }
    }
    TokenizedSample s = detail::render_turns(prefix, vocab);
    if (s.image_pos < 0) throw ValidationError("prompt prefix carries no image placeholder");
    s.ids.push_back(Vocab::kAssistant);
    s.labels.assign(s.ids.size(), kIgnoreLabel);
    return s;
}

// ---- JSONL corpus format ----------------------------------------------------
// {"image": "<id>", "turns": [{"role": "human"|"assistant", "text": "..."}]}

inline ConversationRecord record_from_json(const nlohmann::json& j) {
    ConversationRecord rec;
    rec.image_ref = j.at("image").get<std::string>();
    for (const auto& t : j.at("turns")) {
        const std::string role = t.at("role").get<std::string>();
        if (role != "human" && role != "assistant") {
            throw ValidationError("unknown role '" + role + "'");
        }
        rec.turns.push_back({role == "human" ? Role::human : Role::assistant,
                             t.at("text").get<std::string>()});
    }
    return rec;
}

inline nlohmann::json record_to_json(const ConversationRecord& rec) {
    nlohmann::json turns = nlohmann::json::array();
    for (const Turn& t : rec.turns) {
        turns.push_back({{"role", t.role == Role::human ? "human" : "assistant"},
                         {"text", t.text}});
    }
    return {{"image", rec.image_ref}, {"turns", turns}};
}

inline std::vector<ConversationRecord> load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<ConversationRecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void save_jsonl(const std::string& path, const std::vector<ConversationRecord>& recs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    for (const ConversationRecord& r : recs) out << record_to_json(r).dump() << '\n';
}

} // namespace tinymm
