#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "tinymm/checkpoint.hpp"
#include "tinymm/data.hpp"

namespace tinymm {

// Share-recipe freeze count: the reference 12 when the encoder is that deep,
// otherwise half the depth so the prefix/rest structure survives at toy scale.
inline int resolve_freeze_k(const RecipeConfig& recipe, int vision_depth) {
    if (recipe.freeze_prefix_k >= 0) return recipe.freeze_prefix_k;
    return vision_depth < 12 ? vision_depth / 2 : 12;
}

struct PartitionCounts {
    size_t trainable = 0;
    size_t frozen = 0;
};

struct PartitionSummary {
    std::map<std::string, PartitionCounts> by_submodule; // vision / connector / lm
    size_t trainable = 0;
    size_t frozen = 0;
};

// Applies the recipe's trainable-parameter selection:
//   base PT          -> connector only
//   base / share SFT -> connector + LM, vision frozen
//   share PT         -> connector + LM + vision blocks k.. and final norm,
//                       with the vision stem and first k blocks frozen
inline PartitionSummary param_partition(const std::string& recipe, const std::string& stage,
                                        Model& model, int freeze_k = -1) {
    if ((recipe != "base" && recipe != "share") || (stage != "pt" && stage != "sft")) {
        throw ConfigError("unknown recipe/stage combination '" + recipe + "/" + stage + "'");
    }
    model.visit_params([&](const std::string& name, Parameter& p) {
        if (name.rfind("connector.", 0) == 0) {
            p.trainable = true;
        } else if (name.rfind("lm.", 0) == 0) {
            p.trainable = stage == "sft" || recipe == "share";
        } else {
            p.trainable = false; // vision default; share PT refines below
        }
    });
    if (recipe == "share" && stage == "pt") {
        const int k = freeze_k >= 0 ? freeze_k : model.vision().depth() / 2;
        model.vision().set_freeze_prefix(k);
    }

    PartitionSummary s;
    model.visit_params([&](const std::string& name, Parameter& p) {
        const std::string sub = name.substr(0, name.find('.'));
        auto& c = s.by_submodule[sub];
        (p.trainable ? c.trainable : c.frozen) += p.value.numel();
        (p.trainable ? s.trainable : s.frozen) += p.value.numel();
    });
    return s;
}

struct TrainItem {
    Tensor image;
    TokenizedSample sample;
};

struct TrainResult {
    std::vector<double> loss_log; // one mean batch loss per step
    int steps_run = 0;
    int total_steps = 0;
};

struct TrainControl {
    int start_step = 0;       // resume point (steps already taken)
    int stop_after_steps = 0; // 0 = run to the end of the schedule
    std::function<void(int /*completed steps*/)> on_step;
};

namespace detail {

// Per-epoch permutation is a pure function of (seed, epoch): resuming needs
// only the step counter, no generator state.
inline std::vector<int> epoch_permutation(std::uint64_t seed, int epoch, int n) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng = Rng::fork(seed, 0xE70C0000ull + static_cast<std::uint64_t>(epoch));
    rng.shuffle(order);
    return order;
}

// Forward+backward each sample on a worker thread, then fold gradients into
// the Parameters strictly in sample order, so results do not depend on the
// thread count.
inline double batch_gradients(Model& model, const std::vector<const TrainItem*>& batch) {
    const int n = static_cast<int>(batch.size());
    const int workers = std::min(worker_count(), n);
    double loss_sum = 0.0;
    std::vector<std::unique_ptr<Graph>> graphs(static_cast<size_t>(n));
    std::vector<double> losses(static_cast<size_t>(n), 0.0);
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
    for (int base = 0; base < n; base += workers) {
        const int hi = std::min(n, base + workers);
        std::vector<std::thread> pool;
        for (int i = base; i < hi; ++i) {
            pool.emplace_back([&, i] {
                try {
                    auto g = std::make_unique<Graph>();
                    Var loss = loss_sft(*g, model, batch[static_cast<size_t>(i)]->image,
                                        batch[static_cast<size_t>(i)]->sample);
                    g->backward(loss);
                    losses[static_cast<size_t>(i)] = loss.value()[0];
                    graphs[static_cast<size_t>(i)] = std::move(g);
                } catch (...) {
                    errors[static_cast<size_t>(i)] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (int i = base; i < hi; ++i) {
            if (errors[static_cast<size_t>(i)]) std::rethrow_exception(errors[static_cast<size_t>(i)]);
            graphs[static_cast<size_t>(i)]->add_param_grads();
            graphs[static_cast<size_t>(i)].reset();
            loss_sum += losses[static_cast<size_t>(i)];
        }
    }
    return loss_sum / n;
}

} // namespace detail

// One stage: epochs x shuffled batches of the stage loss. PT and SFT share
// the objective code path; they differ in the samples fed in (caption pairs
// vs full renderings) and in the partition applied beforehand.
inline TrainResult train_stage(Model& model, const std::vector<TrainItem>& items,
                               const RecipeConfig& recipe, std::uint64_t seed, AdamW& opt,
                               const TrainControl& ctl = {}) {
    recipe.validate();
    if (items.empty()) throw ContractError("train_stage: empty corpus");
    const int n = static_cast<int>(items.size());
    const int steps_per_epoch = (n + recipe.batch_size - 1) / recipe.batch_size;
    const int total_steps = steps_per_epoch * recipe.epochs;

    auto named = model.named_params();
    std::vector<std::pair<std::string, Parameter*>> trainable;
    for (auto& [name, p] : named) {
        if (p->trainable) trainable.emplace_back(name, p);
    }
    if (trainable.empty()) throw ConfigError("train_stage: partition left nothing trainable");

    TrainResult result;
    result.total_steps = total_steps;
    int step = ctl.start_step;
    const int stop = ctl.stop_after_steps > 0
                         ? std::min(total_steps, ctl.start_step + ctl.stop_after_steps)
                         : total_steps;
    std::vector<int> order;
    int order_epoch = -1;
    for (; step < stop; ++step) {
        const int epoch = step / steps_per_epoch;
        const int slot = step % steps_per_epoch;
        if (epoch != order_epoch) {
            order = detail::epoch_permutation(seed, epoch, n);
            order_epoch = epoch;
        }
        std::vector<const TrainItem*> batch;
        for (int i = slot * recipe.batch_size; i < std::min(n, (slot + 1) * recipe.batch_size); ++i) {
            batch.push_back(&items[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        }

        model.zero_grads();
        const double loss = detail::batch_gradients(model, batch);
        if (!std::isfinite(loss)) {
            throw ContractError("training diverged: non-finite loss at step " +
                                std::to_string(step));
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (auto& [name, p] : trainable) {
            if (!p->has_grad()) p->ensure_grad();
            for (size_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= inv;
        }
        opt.step(trainable, lr_schedule(step, total_steps, recipe.learning_rate));
        result.loss_log.push_back(loss);
        ++result.steps_run;
        if (ctl.on_step) ctl.on_step(step + 1);
    }
    return result;
}

// PT items: caption pairs. SFT items: full conversation renderings.
inline std::vector<TrainItem> make_stage_items(const std::vector<ConversationRecord>& records,
                                               const ImageArchive& archive, const Vocab& vocab,
                                               const std::string& stage) {
    std::vector<TrainItem> items;
    items.reserve(records.size());
    for (const ConversationRecord& rec : records) {
        TokenizedSample s = stage == "pt" ? derive_caption_pair(rec, vocab)
                                          : render_conversation(rec, vocab);
        items.push_back({archive.image(rec.image_ref), std::move(s)});
    }
    return items;
}

} // namespace tinymm
