#pragma once

#include "ops.hpp"

#include <optional>
#include <vector>

namespace robad {

inline constexpr double kProbClamp = 1e-12;

/// Mean binary cross-entropy of p(bad) = probs[:, 1] against labels, with
/// p(bad) clamped to [1e-12, 1 - 1e-12] before the logs.
inline Tensor cross_entropy(const Tensor &probs, const std::vector<int> &labels) {
    if (probs.rank() != 2 || probs.dim(1) != 2)
        throw DimensionError("cross_entropy: expected [N x 2] probabilities, got " +
                             shape_str(probs.shape()));
    if (labels.empty())
        throw ContractError("cross_entropy: empty batch");
    if (labels.size() != probs.dim(0))
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(probs.dim(0)) + " rows");
    const std::size_t n = labels.size();
    std::vector<double> pos(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw ContractError("cross_entropy: label must be 0 or 1");
        pos[i] = labels[i] == 1 ? 1.0 : 0.0;
        neg[i] = 1.0 - pos[i];
    }
    auto p_bad = clamp(flatten(slice_cols(probs, 1, 1)), kProbClamp, 1.0 - kProbClamp);
    auto ll = add(mul(Tensor::vector(pos), log(p_bad)),
                  mul(Tensor::vector(neg), log(affine(p_bad, -1.0, 1.0))));
    return scale(sum(ll), -1.0 / static_cast<double>(n));
}

/// InfoNCE over N (original, attacked) projection pairs. Each original-view
/// anchor scores its attacked counterpart against every other vector in the
/// batch (both views of the other N-1 users) by cosine similarity / tau;
/// the loss is the mean over the N anchors of
/// -log(exp(s_pos) / (exp(s_pos) + sum_neg exp(s_neg))).
inline Tensor info_nce(const Tensor &z_orig, const Tensor &z_attack, double temperature = 1.0) {
    detail::require_matrix("info_nce", z_orig);
    detail::require_same_shape("info_nce", z_orig, z_attack);
    if (!(temperature > 0.0))
        throw ConfigError("temperature", "temperature must be positive");
    const std::size_t n = z_orig.dim(0);
    if (n < 2)
        throw ContractError("info_nce: needs at least 2 pairs, got " + std::to_string(n));
    auto all = l2_normalize_rows(concat_rows(z_orig, z_attack));      // [2N x E]
    auto sims = scale(matmul(slice_rows(all, 0, n), transpose(all)), // [N x 2N]
                      1.0 / temperature);
    Mask keep(n * 2 * n, 1);
    std::vector<std::size_t> positive(n);
    for (std::size_t i = 0; i < n; ++i) {
        keep[i * 2 * n + i] = 0;
        positive[i] = n + i;
    }
    auto per_anchor = sub(masked_logsumexp(sims, keep), pick(sims, positive));
    return mean(per_anchor);
}

/// w * l_infonce + (1 - w) * l_clf.
inline Tensor total_loss(const Tensor &l_clf, const Tensor &l_infonce, double w_contrastive) {
    if (!(w_contrastive >= 0.0 && w_contrastive <= 1.0))
        throw ConfigError("w_contrastive", "w_contrastive must lie in [0, 1]");
    return add(scale(l_infonce, w_contrastive), scale(l_clf, 1.0 - w_contrastive));
}

inline double total_loss(double l_clf, double l_infonce, double w_contrastive) {
    if (!(w_contrastive >= 0.0 && w_contrastive <= 1.0))
        throw ConfigError("w_contrastive", "w_contrastive must lie in [0, 1]");
    return w_contrastive * l_infonce + (1.0 - w_contrastive) * l_clf;
}

/// Scalar values of every objective term for one training step. Without
/// the attacked branch, l_ce_attack is 0, l_infonce is absent and the
/// effective weight is 0, so l_total == l_clf == l_ce.
struct LossBundle {
    double l_ce = 0.0;
    double l_ce_attack = 0.0;
    double l_clf = 0.0;
    std::optional<double> l_infonce;
    double l_total = 0.0;
    double w_contrastive = 0.0;
};

struct AdversarialLoss {
    Tensor total;
    LossBundle bundle;
};

/// Combines the clean and attacked classification terms with the
/// contrastive term.
inline AdversarialLoss adversarial_objective(const Tensor &probs_orig, const Tensor &probs_attack,
                                             const std::vector<int> &labels, const Tensor &z_orig,
                                             const Tensor &z_attack, double w_contrastive,
                                             double temperature) {
    auto ce = cross_entropy(probs_orig, labels);
    auto ce_att = cross_entropy(probs_attack, labels);
    auto clf = add(ce, ce_att);
    auto nce = info_nce(z_orig, z_attack, temperature);
    auto total = total_loss(clf, nce, w_contrastive);
    LossBundle b;
    b.l_ce = ce.item();
    b.l_ce_attack = ce_att.item();
    b.l_clf = clf.item();
    b.l_infonce = nce.item();
    b.l_total = total.item();
    b.w_contrastive = w_contrastive;
    return {total, b};
}

inline AdversarialLoss clean_objective(const Tensor &probs, const std::vector<int> &labels) {
    auto ce = cross_entropy(probs, labels);
    LossBundle b;
    b.l_ce = ce.item();
    b.l_clf = b.l_ce;
    b.l_total = b.l_ce;
    return {ce, b};
}

} // namespace robad
