#pragma once

// Cross-validated experiments: k-fold training/evaluation, ablation over the
// model variants and hyperparameter sweeps.

#include "train.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace robad {

/// One fold's encoded data. The vocabulary is built from the fold's
/// training users only.
struct FoldData {
    std::size_t fold = 0;
    Vocab vocab;
    ModelConfig model;
    std::vector<UserSequence> train; // model-fitting users
    std::vector<UserSequence> val;   // held out from the training split
    std::vector<UserSequence> test;
    std::vector<UserSequence> train_all() const {
        auto all = train;
        all.insert(all.end(), val.begin(), val.end());
        return all;
    }
};

/// Filtered users plus their fold assignment; shared by every fold.
struct CvPlan {
    std::vector<TokenizedUser> users;
    std::vector<Fold> folds;

    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto &f : folds) {
            for (auto i : f.test)
                h = fnv1a64(users[i].user_id + ";", h);
            h = fnv1a64("|", h);
        }
        return h;
    }
};

inline CvPlan plan_cross_validation(const RunConfig &cfg, const std::vector<RawUser> &raw) {
    CvPlan plan;
    plan.users = filter_users(raw, cfg.prep);
    if (plan.users.empty())
        throw DataError("no user survives the post/user filters");
    std::vector<int> labels;
    for (const auto &u : plan.users)
        labels.push_back(u.label);
    try {
        plan.folds = kfold_split(labels, cfg.folds, cfg.train.seed);
    } catch (const ContractError &e) {
        throw DataError(e.what());
    }
    return plan;
}

/// Encodes fold `f`. Pass `vocab` to reuse a saved vocabulary.
inline FoldData prepare_fold(const RunConfig &cfg, const CvPlan &plan, std::size_t f,
                             const Vocab *vocab = nullptr) {
    const auto &fold = plan.folds.at(f);
    std::vector<TokenizedUser> train_tok, test_tok;
    for (auto i : fold.train)
        train_tok.push_back(plan.users[i]);
    for (auto i : fold.test)
        test_tok.push_back(plan.users[i]);
    FoldData d;
    d.fold = f;
    d.vocab = vocab ? *vocab : build_vocab(train_tok, cfg.prep.min_freq);
    d.model = cfg.train.model;
    d.model.vocab_size = d.vocab.size();
    auto train_all = encode_users(train_tok, d.vocab, cfg.prep);
    d.test = encode_users(test_tok, d.vocab, cfg.prep);
    std::vector<std::size_t> idx(train_all.size());
    std::vector<int> labels(train_all.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
        labels[i] = train_all[i].label;
    }
    auto [keep, held] = stratified_holdout(idx, labels, cfg.val_fraction, cfg.train.seed + f);
    for (auto i : keep)
        d.train.push_back(train_all[i]);
    for (auto i : held)
        d.val.push_back(train_all[i]);
    return d;
}

inline std::vector<AttackSpec> attack_specs(const RunConfig &cfg) {
    std::vector<AttackSpec> specs;
    for (auto kind : cfg.attacks)
        specs.push_back(AttackSpec{kind, cfg.attack_seed, cfg.train.train_attack.ngram_order,
                                   cfg.prep.tokens_per_post});
    return specs;
}

/// Test-fold scores and post-attack F1 of a trained fold model. Attack
/// donors come from the fold's training users.
inline FoldMetrics evaluate_fold(const RunConfig &cfg, const FoldData &data,
                                 const ModelParams &params) {
    FoldMetrics m;
    m.fold = data.fold;
    m.scores = evaluate(params, data.model, data.test);
    const auto specs = attack_specs(cfg);
    if (!specs.empty()) {
        const auto corpus = data.train_all();
        for (const auto &[k, o] :
             robustness_eval(params, data.model, data.test, specs, corpus, m.scores.f1)) {
            m.f1_after_attack[k] = o.f1_after;
            m.relative_drop_pct[k] = o.relative_drop_pct;
        }
    }
    return m;
}

struct FoldRun {
    FoldData data;
    TrainResult result;
    FoldMetrics metrics;
};

struct CvResult {
    MetricsReport report;
    std::vector<FoldRun> folds;
    std::uint64_t fold_fingerprint = 0;
};

struct CvHooks {
    /// Called (possibly from worker threads, serialised by a mutex) when a
    /// fold finishes.
    std::function<void(const FoldRun &)> on_fold;
    TrainHooks train;
};

/// Trains and evaluates every fold; folds run on up to cfg.jobs threads with
/// seed + fold_index each, so results do not depend on the job count.
inline CvResult cross_validate(const RunConfig &cfg, const std::vector<RawUser> &raw,
                               const CvHooks &hooks = {}) {
    cfg.validate();
    const auto plan = plan_cross_validation(cfg, raw);
    CvResult out;
    out.fold_fingerprint = plan.fingerprint();
    out.folds.resize(plan.folds.size());
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto worker = [&] {
        for (std::size_t f; (f = next++) < plan.folds.size();) {
            try {
                FoldRun run;
                run.data = prepare_fold(cfg, plan, f);
                TrainConfig tc = cfg.train;
                tc.model = run.data.model;
                tc.seed = cfg.train.seed + f;
                run.result = train(tc, run.data.train, run.data.val, hooks.train);
                run.metrics = evaluate_fold(cfg, run.data, run.result.params);
                std::lock_guard lock(mu);
                if (hooks.on_fold)
                    hooks.on_fold(run);
                out.folds[f] = std::move(run);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure)
                    failure = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::min(cfg.jobs, plan.folds.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t)
            pool.emplace_back(worker);
        for (auto &t : pool)
            t.join();
    }
    if (failure)
        std::rethrow_exception(failure);
    for (const auto &run : out.folds)
        out.report.per_fold.push_back(run.metrics);
    out.report.aggregate();
    return out;
}

struct AblationRow {
    Variant variant;
    MetricsReport report;
    std::uint64_t fold_fingerprint = 0;
    std::vector<std::vector<TrainLogEntry>> logs; // one per fold
};

inline constexpr std::array<Variant, 3> kAblationVariants{
    Variant::full, Variant::no_local_global, Variant::no_adversary_aware};

/// Cross-validates the full model and both ablations on identical folds
/// and seeds.
inline std::vector<AblationRow> ablate(const RunConfig &cfg, const std::vector<RawUser> &raw) {
    std::vector<AblationRow> rows;
    for (auto v : kAblationVariants) {
        RunConfig c = cfg;
        c.train.model.variant = v;
        auto cv = cross_validate(c, raw);
        AblationRow row{v, std::move(cv.report), cv.fold_fingerprint, {}};
        for (auto &f : cv.folds)
            row.logs.push_back(std::move(f.result.log));
        rows.push_back(std::move(row));
    }
    return rows;
}

/// "variant,f1,f1_after_<attack>..." with one row per variant.
inline std::string ablation_table(const std::vector<AblationRow> &rows) {
    std::ostringstream os;
    os << "variant,f1";
    if (!rows.empty())
        for (const auto &[k, _] : rows.front().report.f1_after_attack)
            os << ",f1_after_" << k;
    os << '\n';
    char buf[32];
    for (const auto &r : rows) {
        os << to_string(r.variant);
        std::snprintf(buf, sizeof buf, ",%.6f", r.report.f1);
        os << buf;
        for (const auto &[_, v] : r.report.f1_after_attack) {
            std::snprintf(buf, sizeof buf, ",%.6f", v);
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

struct SweepRow {
    std::string setting;
    double mean_f1 = 0.0;
    MetricsReport report;
};

inline std::vector<SweepRow> sweep(const std::vector<GridPoint> &grid,
                                   const std::vector<RawUser> &raw) {
    if (grid.empty())
        throw ConfigError("grid", "sweep grid is empty");
    std::vector<SweepRow> rows;
    for (const auto &point : grid) {
        auto cv = cross_validate(point.config, raw);
        rows.push_back({point.label, cv.report.f1, std::move(cv.report)});
    }
    return rows;
}

inline std::string sweep_table(const std::vector<SweepRow> &rows) {
    std::ostringstream os;
    os << "setting,mean_f1\n";
    char buf[32];
    for (const auto &r : rows) {
        std::snprintf(buf, sizeof buf, "%.6f", r.mean_f1);
        os << '"' << r.setting << "\"," << buf << '\n';
    }
    return os.str();
}

} // namespace robad
