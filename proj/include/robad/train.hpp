#pragma once

// Adversary-aware training loop, evaluation, robustness evaluation and the
// cross-validated experiment drivers (ablation, sweep).

#include "attacks.hpp"
#include "config.hpp"
#include "data.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optim.hpp"

#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace robad {

struct TrainLogEntry {
    std::size_t epoch = 0;
    std::size_t step = 0;
    LossBundle loss;
};

/// "epoch step l_ce l_ce_attack l_clf l_infonce l_total"; an absent
/// contrastive term prints as "-".
inline std::string format_log_line(const TrainLogEntry &e) {
    char buf[256];
    char nce[32] = "-";
    if (e.loss.l_infonce)
        std::snprintf(nce, sizeof nce, "%.10g", *e.loss.l_infonce);
    std::snprintf(buf, sizeof buf, "epoch=%zu step=%zu l_ce=%.10g l_ce_attack=%.10g l_clf=%.10g "
                                   "l_infonce=%s l_total=%.10g",
                  e.epoch, e.step, e.loss.l_ce, e.loss.l_ce_attack, e.loss.l_clf, nce,
                  e.loss.l_total);
    return buf;
}

struct EpochSummary {
    std::size_t epoch = 0;
    double mean_total = 0.0;
    std::optional<double> val_f1;
    std::optional<double> val_loss;
};

struct TrainResult {
    ModelParams params;
    std::vector<TrainLogEntry> log;
    std::vector<EpochSummary> epochs;
    std::size_t best_epoch = 0; // 0 = initial parameters
};

struct TrainHooks {
    /// Called with the original-view users of every batch.
    std::function<void(std::span<const UserSequence *const>)> on_batch;
    /// Called after each step with its loss terms.
    std::function<void(const TrainLogEntry &)> on_step;
};

struct Predictions {
    std::vector<int> labels;
    std::vector<int> predicted;
    double mean_ce = 0.0;
};

/// Inference in chunks without recording a graph.
inline Predictions predict(const ModelParams &params, const ModelConfig &cfg,
                           std::span<const UserSequence> users, std::size_t chunk = 64) {
    NoGradGuard guard;
    Predictions out;
    double ce_sum = 0.0;
    for (std::size_t b = 0; b < users.size(); b += chunk) {
        std::vector<const UserSequence *> ptrs;
        std::vector<int> labels;
        for (std::size_t i = b; i < std::min(users.size(), b + chunk); ++i) {
            ptrs.push_back(&users[i]);
            labels.push_back(users[i].label);
        }
        auto fr = forward_batch(params, cfg, ptrs);
        auto pred = predicted_labels(fr.probs);
        ce_sum += cross_entropy(fr.probs, labels).item() * static_cast<double>(labels.size());
        out.labels.insert(out.labels.end(), labels.begin(), labels.end());
        out.predicted.insert(out.predicted.end(), pred.begin(), pred.end());
    }
    if (!users.empty())
        out.mean_ce = ce_sum / static_cast<double>(users.size());
    return out;
}

/// Precision / recall / F1 with bad actors as the positive class.
inline Scores evaluate(const ModelParams &params, const ModelConfig &cfg,
                       std::span<const UserSequence> users) {
    if (users.empty())
        throw ContractError("evaluate: empty user set");
    auto p = predict(params, cfg, users);
    return scores(confusion(p.predicted, p.labels));
}

struct AttackOutcome {
    double f1_after = 0.0;
    double relative_drop_pct = 0.0;
};

/// Attacks every user once with each spec (victims' new posts are drawn
/// from `corpus`) and reports the F1 after the attack and its relative
/// drop from `f1_before`.
inline std::map<std::string, AttackOutcome>
robustness_eval(const ModelParams &params, const ModelConfig &cfg,
                std::span<const UserSequence> users, std::span<const AttackSpec> attacks,
                std::span<const UserSequence> corpus, double f1_before) {
    std::map<std::string, AttackOutcome> out;
    for (const auto &spec : attacks) {
        std::vector<UserSequence> attacked;
        attacked.reserve(users.size());
        for (const auto &u : users)
            attacked.push_back(attack_user(spec, u, corpus, cfg.window, cfg.tokens_per_post));
        const double f1 = evaluate(params, cfg, attacked).f1;
        out[to_string(spec.kind)] = {f1, relative_drop_pct(f1_before, f1)};
    }
    return out;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                          std::size_t batch_size,
                                                          bool need_pairs) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t b = 0; b < order.size(); b += batch_size)
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                             order.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(order.size(), b + batch_size)));
    // InfoNCE needs two pairs; fold a trailing singleton into its predecessor.
    if (need_pairs && batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

} // namespace detail

/// Trains one model. Each epoch shuffles the users, builds the attacked
/// view of every batch with the mimicked attacker, and takes one Adam step
/// per batch on the combined objective (clean cross-entropy only for the
/// variants without the adversary-aware module). With a validation set the
/// parameters of the best validation-F1 epoch are returned (ties broken by
/// lower validation cross-entropy) and training stops after
/// `early_stop_patience` epochs without an F1 improvement; otherwise the
/// final parameters are returned.
inline TrainResult train(const TrainConfig &cfg, std::span<const UserSequence> train_users,
                         std::span<const UserSequence> val_users, const TrainHooks &hooks = {}) {
    cfg.validate();
    bool has0 = false, has1 = false;
    for (const auto &u : train_users) {
        has0 = has0 || u.label == 0;
        has1 = has1 || u.label == 1;
    }
    if (!has0 || !has1)
        throw ContractError("train: training users must contain both labels");
    const bool adversarial = is_adversary_aware(cfg.model.variant);
    if (adversarial && train_users.size() < 2)
        throw ContractError("train: adversary-aware training needs at least 2 users");

    TrainResult result;
    ModelParams model = init_params(cfg.model, cfg.seed);
    if (cfg.epochs == 0) {
        result.params = std::move(model);
        return result;
    }
    std::optional<ModelParams> best_params;

    auto params = model.list();
    auto adam = AdamState::for_params(params);
    const AdamOptions adam_opt{cfg.lr};
    Rng shuffle_rng(mix_seed(cfg.seed, 0x73687566ULL));
    Rng dropout_rng(mix_seed(cfg.seed, 0x64726f70ULL));
    ForwardOptions fopt;
    fopt.training = true;
    fopt.rng = &dropout_rng;

    std::optional<std::pair<double, double>> best; // (val F1, val CE)
    std::size_t since_improvement = 0;
    std::size_t step = 0;
    std::vector<std::size_t> order(train_users.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle(order, shuffle_rng);
        AttackSpec spec = cfg.train_attack;
        if (cfg.regenerate_attacks_each_epoch)
            spec.seed = mix_seed(cfg.train_attack.seed, epoch);
        double epoch_total = 0.0;
        auto batches = detail::make_batches(order, cfg.batch_size, adversarial);
        for (const auto &batch : batches) {
            std::vector<const UserSequence *> users;
            std::vector<int> labels;
            for (auto i : batch) {
                users.push_back(&train_users[i]);
                labels.push_back(train_users[i].label);
            }
            if (hooks.on_batch)
                hooks.on_batch(users);

            AdversarialLoss loss;
            if (adversarial) {
                std::vector<UserSequence> attacked;
                attacked.reserve(users.size());
                for (const auto *u : users)
                    attacked.push_back(attack_user(spec, *u, train_users, cfg.model.window,
                                                   cfg.model.tokens_per_post));
                std::vector<const UserSequence *> both = users;
                for (const auto &a : attacked)
                    both.push_back(&a);
                auto fr = forward_batch(model, cfg.model, both, fopt);
                const std::size_t n = users.size();
                loss = adversarial_objective(slice_rows(fr.probs, 0, n), slice_rows(fr.probs, n, n),
                                             labels, slice_rows(fr.z, 0, n),
                                             slice_rows(fr.z, n, n), cfg.w_contrastive,
                                             cfg.temperature);
            } else {
                auto fr = forward_batch(model, cfg.model, users, fopt);
                loss = clean_objective(fr.probs, labels);
            }
            zero_grad(params);
            backward(loss.total);
            adam_step(params, adam, adam_opt);

            TrainLogEntry entry{epoch, ++step, loss.bundle};
            epoch_total += loss.bundle.l_total;
            if (hooks.on_step)
                hooks.on_step(entry);
            result.log.push_back(entry);
        }

        EpochSummary summary{epoch, epoch_total / static_cast<double>(batches.size()), {}, {}};
        if (!val_users.empty()) {
            auto pred = predict(model, cfg.model, val_users);
            const double f1 = scores(confusion(pred.predicted, pred.labels)).f1;
            summary.val_f1 = f1;
            summary.val_loss = pred.mean_ce;
            const bool f1_up = !best || f1 > best->first;
            const bool tie_better = best && f1 == best->first && pred.mean_ce < best->second;
            if (f1_up || tie_better) {
                best = {f1, pred.mean_ce};
                result.best_epoch = epoch;
                best_params = model.clone();
            }
            since_improvement = f1_up ? 0 : since_improvement + 1;
        }
        result.epochs.push_back(summary);
        if (!val_users.empty() && since_improvement >= cfg.early_stop_patience)
            break;
    }
    result.params = best_params ? std::move(*best_params) : std::move(model);
    return result;
}

} // namespace robad
