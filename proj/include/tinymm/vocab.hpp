#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tinymm/common.hpp"

namespace tinymm {

// Character-level vocabulary: reserved specials first, then the corpus
// characters in sorted order, so the id assignment is reproducible.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kImage = 3;
    static constexpr int kHuman = 4;
    static constexpr int kAssistant = 5;
    static constexpr int kNumSpecials = 6;

    static const std::vector<std::string>& special_tokens() {
        static const std::vector<std::string> names = {"<pad>", "<bos>", "<eos>",
                                                       "<image>", "<human>", "<assistant>"};
        return names;
    }

    static Vocab build(const std::vector<std::string>& corpus) {
        std::set<char> chars;
        for (const std::string& s : corpus)
            for (char c : s) chars.insert(c);
        Vocab v;
        v.tokens_ = special_tokens();
        for (char c : chars) {
            v.char_ids_[c] = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(std::string(1, c));
        }
        return v;
    }

    // Reconstruction from a checkpoint header.
    static Vocab from_tokens(const std::vector<std::string>& tokens) {
        if (tokens.size() < kNumSpecials ||
            !std::equal(special_tokens().begin(), special_tokens().end(), tokens.begin())) {
            throw ValidationError("vocab token list does not start with the reserved specials");
        }
        Vocab v;
        v.tokens_ = tokens;
        for (size_t i = kNumSpecials; i < tokens.size(); ++i) {
            if (tokens[i].size() != 1) {
                throw ValidationError("non-special vocab entry is not a single character: '" +
                                      tokens[i] + "'");
            }
            v.char_ids_[tokens[i][0]] = static_cast<int>(i);
        }
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }

    bool knows(char c) const { return char_ids_.count(c) > 0; }

    int char_id(char c) const {
        auto it = char_ids_.find(c);
        if (it == char_ids_.end()) {
            throw IndexError(std::string("character not in vocabulary: '") + c + "'");
        }
        return it->second;
    }

    void append_chars(const std::string& text, std::vector<int>& out) const {
        for (char c : text) out.push_back(char_id(c));
    }

    // Inverse map for non-special ids; IMAGE optionally round-trips to its
    // placeholder so turn texts reconstruct exactly.
    std::string decode(const std::vector<int>& ids, bool image_as_placeholder = true) const {
        std::string out;
        for (int id : ids) {
            if (id < 0 || id >= size()) {
                throw IndexError("token id " + std::to_string(id) + " out of range [0, " +
                                 std::to_string(size()) + ")");
            }
            if (id == kImage && image_as_placeholder) {
                out += "<image>";
            } else if (!is_special(id)) {
                out += tokens_[static_cast<size_t>(id)];
            }
        }
        return out;
    }

private:
    std::vector<std::string> tokens_;
    std::map<char, int> char_ids_;
};

} // namespace tinymm
