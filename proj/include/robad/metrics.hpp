#pragma once

#include "errors.hpp"

#include <json.hpp>

#include <cstdio>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace robad {

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Counts with the bad-actor class (label 1) as positive.
inline Confusion confusion(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size())
        throw DimensionError("confusion: prediction and label counts differ");
    Confusion c;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (predicted[i] == 1)
            (truth[i] == 1 ? c.tp : c.fp)++;
        else
            (truth[i] == 1 ? c.fn : c.tn)++;
    }
    return c;
}

struct Scores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Precision, recall and F1; each ratio with a zero denominator is 0.
inline Scores scores(const Confusion &c) {
    Scores s;
    const auto tp = static_cast<double>(c.tp);
    if (c.tp + c.fp > 0)
        s.precision = tp / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0)
        s.recall = tp / static_cast<double>(c.tp + c.fn);
    if (s.precision + s.recall > 0.0)
        s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

/// 100 * (before - after) / before, in percent; 0 when before is 0.
inline double relative_drop_pct(double f1_before, double f1_after) {
    if (f1_before <= 0.0)
        return 0.0;
    return 100.0 * (f1_before - f1_after) / f1_before;
}

struct FoldMetrics {
    std::size_t fold = 0;
    Scores scores;
    std::map<std::string, double> f1_after_attack;
    std::map<std::string, double> relative_drop_pct;
};

/// Fold means plus the per-fold values they came from.
struct MetricsReport {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::map<std::string, double> f1_after_attack;
    std::map<std::string, double> relative_drop_pct;
    std::vector<FoldMetrics> per_fold;

    /// Recomputes the means from per_fold. Drops are taken between the
    /// mean F1 values, not averaged per fold.
    void aggregate() {
        precision = recall = f1 = 0.0;
        f1_after_attack.clear();
        relative_drop_pct.clear();
        if (per_fold.empty())
            return;
        const auto n = static_cast<double>(per_fold.size());
        for (const auto &f : per_fold) {
            precision += f.scores.precision / n;
            recall += f.scores.recall / n;
            f1 += f.scores.f1 / n;
            for (const auto &[k, v] : f.f1_after_attack)
                f1_after_attack[k] += v / n;
        }
        for (const auto &[k, v] : f1_after_attack)
            relative_drop_pct[k] = robad::relative_drop_pct(f1, v);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["precision"] = precision;
        j["recall"] = recall;
        j["f1"] = f1;
        j["f1_after_attack"] = f1_after_attack;
        j["relative_drop_pct"] = relative_drop_pct;
        auto folds = nlohmann::ordered_json::array();
        for (const auto &f : per_fold) {
            nlohmann::ordered_json fj;
            fj["fold"] = f.fold;
            fj["precision"] = f.scores.precision;
            fj["recall"] = f.scores.recall;
            fj["f1"] = f.scores.f1;
            fj["f1_after_attack"] = f.f1_after_attack;
            fj["relative_drop_pct"] = f.relative_drop_pct;
            folds.push_back(std::move(fj));
        }
        j["per_fold"] = std::move(folds);
        return j;
    }

    /// One row per fold plus a "mean" row.
    std::string to_csv() const {
        std::ostringstream os;
        os << "fold,precision,recall,f1";
        for (const auto &[k, _] : f1_after_attack)
            os << ",f1_after_" << k << ",drop_pct_" << k;
        os << '\n';
        auto row = [&](const std::string &name, const Scores &s,
                       const std::map<std::string, double> &after,
                       const std::map<std::string, double> &drop) {
            os << name << ',' << fmt(s.precision) << ',' << fmt(s.recall) << ',' << fmt(s.f1);
            for (const auto &[k, _] : f1_after_attack) {
                auto a = after.find(k);
                auto d = drop.find(k);
                os << ',' << (a == after.end() ? "" : fmt(a->second)) << ','
                   << (d == drop.end() ? "" : fmt(d->second));
            }
            os << '\n';
        };
        for (const auto &f : per_fold)
            row(std::to_string(f.fold), f.scores, f.f1_after_attack, f.relative_drop_pct);
        row("mean", {precision, recall, f1}, f1_after_attack, relative_drop_pct);
        return os.str();
    }

  private:
    static std::string fmt(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return buf;
    }
};

} // namespace robad
