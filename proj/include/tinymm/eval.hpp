#pragma once

#include <algorithm>
#include <cctype>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinymm/data.hpp"
#include "tinymm/training.hpp"

namespace tinymm {

inline std::string normalize_answer(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    std::string out = s.substr(b, e - b);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

// Fraction of normalized exact matches.
inline double exact_match(const std::vector<std::string>& predictions,
                          const std::vector<std::string>& golds) {
    if (predictions.size() != golds.size()) {
        throw ContractError("exact_match: " + std::to_string(predictions.size()) +
                            " predictions vs " + std::to_string(golds.size()) + " golds");
    }
    if (predictions.empty()) return 0.0;
    int hits = 0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        hits += normalize_answer(predictions[i]) == normalize_answer(golds[i]) ? 1 : 0;
    }
    return static_cast<double>(hits) / predictions.size();
}

struct QaItem {
    Tensor image;
    std::vector<Turn> prompt; // gold context turns, ending with the question
    std::string gold;
};

struct ProbeItem {
    Tensor image;
    std::vector<Turn> prompt;
    bool positive = false; // gold answer is "yes"
};

// Questions are prompted with the gold conversation context of all prior
// turns, matching the training distribution of multi-turn records.
struct EvalSet {
    std::vector<QaItem> color_qa;
    std::vector<QaItem> count_qa;
    std::vector<ProbeItem> probes;
};

inline EvalSet build_eval_set(const std::vector<ConversationRecord>& records,
                              const ImageArchive& archive) {
    EvalSet set;
    for (const ConversationRecord& rec : records) {
        Tensor img = archive.image(rec.image_ref);
        for (size_t q = 2; q + 1 < rec.turns.size(); q += 2) {
            std::vector<Turn> prompt(rec.turns.begin(), rec.turns.begin() + static_cast<long>(q) + 1);
            const std::string kind = question_kind(rec.turns[q].text);
            const std::string& gold = rec.turns[q + 1].text;
            if (kind == "color") {
                set.color_qa.push_back({img, prompt, gold});
            } else if (kind == "count") {
                set.count_qa.push_back({img, prompt, gold});
            } else if (kind == "presence") {
                set.probes.push_back({img, prompt, gold == "yes"});
            }
        }
    }
    return set;
}

inline double qa_accuracy(const Model& model, const std::vector<QaItem>& items, const Vocab& vocab,
                          int max_new = 16) {
    if (items.empty()) return 0.0;
    std::vector<std::string> preds, golds;
    preds.reserve(items.size());
    for (const QaItem& item : items) {
        preds.push_back(generate(model, item.image, item.prompt, max_new, vocab));
        golds.push_back(item.gold);
    }
    return exact_match(preds, golds);
}

struct ProbeResult {
    double accuracy = 0.0;
    double yes_rate = 0.0;
    double f1_on_negatives = 0.0;
    int total = 0;
};

// Scoring core: answers are parsed by prefix match on yes/no, anything else
// counts as incorrect (and as a miss for the negative-class F1).
inline ProbeResult probe_metrics(const std::vector<std::pair<bool, std::string>>& gold_and_answer) {
    ProbeResult r;
    r.total = static_cast<int>(gold_and_answer.size());
    if (gold_and_answer.empty()) return r;
    int correct = 0, yes = 0;
    int tp_no = 0, pred_no = 0, gold_no = 0;
    for (const auto& [positive, answer] : gold_and_answer) {
        const std::string raw = normalize_answer(answer);
        const bool said_yes = raw.rfind("yes", 0) == 0;
        const bool said_no = raw.rfind("no", 0) == 0;
        yes += said_yes ? 1 : 0;
        pred_no += said_no ? 1 : 0;
        gold_no += positive ? 0 : 1;
        if (positive ? said_yes : said_no) ++correct;
        if (!positive && said_no) ++tp_no;
    }
    r.accuracy = static_cast<double>(correct) / r.total;
    r.yes_rate = static_cast<double>(yes) / r.total;
    const double precision = pred_no > 0 ? static_cast<double>(tp_no) / pred_no : 0.0;
    const double recall = gold_no > 0 ? static_cast<double>(tp_no) / gold_no : 0.0;
    r.f1_on_negatives = (precision + recall) > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    return r;
}

inline ProbeResult presence_probe(const Model& model, const std::vector<ProbeItem>& items,
                                  const Vocab& vocab, int max_new = 4) {
    std::vector<std::pair<bool, std::string>> scored;
    scored.reserve(items.size());
    for (const ProbeItem& item : items) {
        scored.emplace_back(item.positive, generate(model, item.image, item.prompt, max_new, vocab));
    }
    return probe_metrics(scored);
}

// exp(mean supervised-token cross-entropy) over a split. Never mutates the
// model.
inline double perplexity(const Model& model, const std::vector<TrainItem>& split) {
    if (split.empty()) throw ContractError("perplexity: empty split");
    double ce_sum = 0.0;
    long tokens = 0;
    for (const TrainItem& item : split) {
        Graph g;
        ModelForward f = multimodal_forward(g, const_cast<Model&>(model), item.image, item.sample);
        ce_sum += f.loss.value()[0] * f.supervised;
        tokens += f.supervised;
    }
    return std::exp(ce_sum / static_cast<double>(tokens));
}

// ---- run reports ------------------------------------------------------------
// Row schema: {"run_id", "config_hash", "metrics": {...}, "step"} plus the
// sort keys surfaced for the table.

struct RunReport {
    std::string run_id;
    std::string config_hash;
    int step = 0;
    std::string recipe;
    std::string connector;
    size_t model_size = 0;
    std::map<std::string, double> metrics;
};

inline void sort_reports(std::vector<RunReport>& rows) {
    std::sort(rows.begin(), rows.end(), [](const RunReport& a, const RunReport& b) {
        if (a.recipe != b.recipe) return a.recipe < b.recipe;
        if (a.model_size != b.model_size) return a.model_size < b.model_size;
        return a.run_id < b.run_id;
    });
}

inline nlohmann::json report_json(std::vector<RunReport> rows) {
    sort_reports(rows);
    nlohmann::json out = nlohmann::json::array();
    for (const RunReport& r : rows) {
        nlohmann::json metrics = nlohmann::json::object();
        for (const auto& [k, v] : r.metrics) metrics[k] = v;
        out.push_back({{"run_id", r.run_id},
                       {"config_hash", r.config_hash},
                       {"metrics", metrics},
                       {"step", r.step},
                       {"recipe", r.recipe},
                       {"connector", r.connector},
                       {"model_size", r.model_size}});
    }
    return out;
}

inline std::string report_table(std::vector<RunReport> rows) {
    sort_reports(rows);
    std::vector<std::string> columns;
    for (const RunReport& r : rows) {
        for (const auto& [k, v] : r.metrics) {
            if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
        }
    }
    std::sort(columns.begin(), columns.end());
    std::ostringstream os;
    os << std::left << std::setw(24) << "run_id" << std::setw(8) << "recipe" << std::setw(11)
       << "connector" << std::setw(10) << "params" << std::setw(7) << "step";
    for (const std::string& c : columns) os << std::setw(std::max<size_t>(c.size() + 2, 12)) << c;
    os << '\n';
    for (const RunReport& r : rows) {
        os << std::left << std::setw(24) << r.run_id << std::setw(8) << r.recipe << std::setw(11)
           << r.connector << std::setw(10) << r.model_size << std::setw(7) << r.step;
        for (const std::string& c : columns) {
            std::ostringstream cell;
            auto it = r.metrics.find(c);
            if (it == r.metrics.end()) {
                cell << "-";
            } else {
                cell << std::fixed << std::setprecision(4) << it->second;
            }
            os << std::setw(std::max<size_t>(c.size() + 2, 12)) << cell.str();
        }
        os << '\n';
    }
    return os.str();
}

} // namespace tinymm
