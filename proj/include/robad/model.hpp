#pragma once

// The local-global attended sequence classifier.
//
// Local level: each post's tokens (token embedding + learned token position)
// pass through bidirectional encoder blocks and are mean-pooled over the
// unmasked positions into one post embedding.
// Global level: the chronologically ordered post embeddings (+ learned post
// position) pass through causally masked decoder blocks; the hidden state at
// the most recent post is the sequence embedding.
// Heads: a linear+softmax classifier and a two-layer projection used by the
// contrastive objective.
//
// All matrices act on row vectors (x W). Padding is handled by compaction:
// only unmasked tokens/posts enter the blocks. Masked keys would receive an
// attention weight of exactly zero and masked queries are never pooled, so
// this computes the same values as running the padded rows with a key mask.

#include "data.hpp"
#include "ops.hpp"
#include "random.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace robad {

enum class Variant { full, no_local_global, no_adversary_aware, baseline_meanpool };

inline const char *to_string(Variant v) {
    switch (v) {
    case Variant::full:
        return "full";
    case Variant::no_local_global:
        return "no_local_global";
    case Variant::no_adversary_aware:
        return "no_adversary_aware";
    case Variant::baseline_meanpool:
        return "baseline_meanpool";
    }
    return "?";
}

inline Variant parse_variant(const std::string &s) {
    for (auto v : {Variant::full, Variant::no_local_global, Variant::no_adversary_aware,
                   Variant::baseline_meanpool})
        if (s == to_string(v))
            return v;
    throw ConfigError("variant", "unknown variant \"" + s + "\"");
}

/// Variants that replace the dual transformer by mean pooling.
inline bool uses_mean_pooling(Variant v) {
    return v == Variant::no_local_global || v == Variant::baseline_meanpool;
}

/// Variants trained with the attacked view and the contrastive term.
inline bool is_adversary_aware(Variant v) {
    return v == Variant::full || v == Variant::no_local_global;
}

struct ModelConfig {
    std::size_t vocab_size = 2;
    std::size_t tokens_per_post = 30;
    std::size_t window = 20;
    std::size_t emb_dim = 128;
    std::size_t heads = 2;
    std::size_t enc_layers = 1;
    std::size_t dec_layers = 1;
    std::size_t ffn_mult = 4;
    double dropout = 0.0;
    Variant variant = Variant::full;

    std::size_t head_dim() const { return emb_dim / heads; }
    std::size_t ffn_dim() const { return ffn_mult * emb_dim; }

    void validate() const {
        auto positive = [](const char *key, std::size_t v) {
            if (v < 1)
                throw ConfigError(key, std::string(key) + " must be at least 1");
        };
        positive("vocab_size", vocab_size);
        positive("tokens_per_post", tokens_per_post);
        positive("window", window);
        positive("emb_dim", emb_dim);
        positive("heads", heads);
        positive("enc_layers", enc_layers);
        positive("dec_layers", dec_layers);
        positive("ffn_mult", ffn_mult);
        if (emb_dim % heads != 0)
            throw ConfigError("heads", "emb_dim " + std::to_string(emb_dim) +
                                           " is not divisible by heads " + std::to_string(heads));
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw ConfigError("dropout", "dropout must lie in [0, 1)");
    }

    /// Everything that determines parameter shapes and their meaning.
    std::string canonical() const {
        return "vocab=" + std::to_string(vocab_size) + ";d=" + std::to_string(tokens_per_post) +
               ";T=" + std::to_string(window) + ";emb=" + std::to_string(emb_dim) +
               ";heads=" + std::to_string(heads) + ";enc=" + std::to_string(enc_layers) +
               ";dec=" + std::to_string(dec_layers) + ";ffn=" + std::to_string(ffn_mult) +
               ";variant=" + to_string(variant);
    }

    std::uint64_t hash() const { return fnv1a64(canonical()); }
};

/// Weights of one transformer block (post-sublayer layer norm).
struct BlockParams {
    Tensor wq, wk, wv, wo;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;

    template <typename F> void visit(const std::string &prefix, F &&f) {
        f(prefix + "wq", wq);
        f(prefix + "wk", wk);
        f(prefix + "wv", wv);
        f(prefix + "wo", wo);
        f(prefix + "ffn_w1", ffn_w1);
        f(prefix + "ffn_b1", ffn_b1);
        f(prefix + "ffn_w2", ffn_w2);
        f(prefix + "ffn_b2", ffn_b2);
        f(prefix + "ln1_gain", ln1_gain);
        f(prefix + "ln1_bias", ln1_bias);
        f(prefix + "ln2_gain", ln2_gain);
        f(prefix + "ln2_bias", ln2_bias);
    }
};

struct ModelParams {
    Tensor token_emb;  // [vocab x emb]
    Tensor token_pos;  // [tokens_per_post x emb]
    Tensor post_pos;   // [window x emb]
    std::vector<BlockParams> encoder;
    std::vector<BlockParams> decoder;
    Tensor classifier; // [emb x 2]
    Tensor proj1;      // [emb x emb]
    Tensor proj2;      // [emb x emb]

    /// Calls f(name, tensor&) for every parameter in a fixed order.
    template <typename F> void visit(F &&f) {
        f("token_emb", token_emb);
        f("token_pos", token_pos);
        f("post_pos", post_pos);
        for (std::size_t i = 0; i < encoder.size(); ++i)
            encoder[i].visit("enc" + std::to_string(i) + ".", f);
        for (std::size_t i = 0; i < decoder.size(); ++i)
            decoder[i].visit("dec" + std::to_string(i) + ".", f);
        f("classifier", classifier);
        f("proj1", proj1);
        f("proj2", proj2);
    }
    template <typename F> void visit(F &&f) const {
        const_cast<ModelParams *>(this)->visit(
            [&](const std::string &name, Tensor &t) { f(name, static_cast<const Tensor &>(t)); });
    }

    /// Handles to every parameter, in visit order.
    std::vector<Tensor> list() const {
        std::vector<Tensor> out;
        visit([&](const std::string &, const Tensor &t) { out.push_back(t); });
        return out;
    }

    std::size_t count() const {
        std::size_t n = 0;
        visit([&](const std::string &, const Tensor &t) { n += t.numel(); });
        return n;
    }

    /// Independent deep copy.
    ModelParams clone() const {
        ModelParams p = *this;
        p.visit([](const std::string &, Tensor &t) { t = t.clone(t.requires_grad()); });
        return p;
    }

    /// Bitwise equality of all values.
    bool same_values(const ModelParams &o) const {
        auto a = list(), b = o.list();
        if (a.size() != b.size())
            return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].shape() != b[i].shape() ||
                !std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin()))
                return false;
        return true;
    }
};

/// Parameter shapes implied by a configuration, in visit order.
inline std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig &cfg) {
    std::vector<std::pair<std::string, Shape>> out;
    const auto e = cfg.emb_dim, f = cfg.ffn_dim();
    out.push_back({"token_emb", {cfg.vocab_size, e}});
    out.push_back({"token_pos", {cfg.tokens_per_post, e}});
    out.push_back({"post_pos", {cfg.window, e}});
    auto block = [&](const std::string &p) {
        out.push_back({p + "wq", {e, e}});
        out.push_back({p + "wk", {e, e}});
        out.push_back({p + "wv", {e, e}});
        out.push_back({p + "wo", {e, e}});
        out.push_back({p + "ffn_w1", {e, f}});
        out.push_back({p + "ffn_b1", {f}});
        out.push_back({p + "ffn_w2", {f, e}});
        out.push_back({p + "ffn_b2", {e}});
        out.push_back({p + "ln1_gain", {e}});
        out.push_back({p + "ln1_bias", {e}});
        out.push_back({p + "ln2_gain", {e}});
        out.push_back({p + "ln2_bias", {e}});
    };
    for (std::size_t i = 0; i < cfg.enc_layers; ++i)
        block("enc" + std::to_string(i) + ".");
    for (std::size_t i = 0; i < cfg.dec_layers; ++i)
        block("dec" + std::to_string(i) + ".");
    out.push_back({"classifier", {e, 2}});
    out.push_back({"proj1", {e, e}});
    out.push_back({"proj2", {e, e}});
    return out;
}

/// Builds a parameter set from `fill(name, shape)`, laid out per config.
template <typename Fill> ModelParams make_params(const ModelConfig &cfg, Fill &&fill) {
    cfg.validate();
    auto shapes = param_shapes(cfg);
    ModelParams p;
    p.encoder.resize(cfg.enc_layers);
    p.decoder.resize(cfg.dec_layers);
    std::size_t i = 0;
    p.visit([&](const std::string &name, Tensor &t) {
        const auto &[n, shape] = shapes.at(i++);
        if (n != name)
            throw Error("parameter layout mismatch at " + name);
        t = fill(name, shape);
    });
    return p;
}

/// Glorot-uniform matrices, zero biases, unit layer-norm gains.
inline ModelParams init_params(const ModelConfig &cfg, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x696e6974ULL));
    return make_params(cfg, [&](const std::string &name, const Shape &shape) {
        const bool gain = name.ends_with("_gain");
        if (shape.size() == 1)
            return Tensor::full(shape, gain ? 1.0 : 0.0, true);
        const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
        std::vector<double> v(shape_numel(shape));
        for (auto &x : v)
            x = uniform(rng, -bound, bound);
        return Tensor(shape, std::move(v), true);
    });
}

struct ForwardOptions {
    bool training = false;
    Rng *rng = nullptr; // required when training with dropout > 0
    std::vector<AttentionTrace> *encoder_trace = nullptr; // one entry per encoder layer
    std::vector<AttentionTrace> *decoder_trace = nullptr; // one entry per decoder layer
};

namespace detail {

inline Tensor maybe_dropout(const Tensor &x, const ModelConfig &cfg, const ForwardOptions &opt) {
    if (!opt.training || cfg.dropout <= 0.0)
        return x;
    if (!opt.rng)
        throw ContractError("dropout during training needs an rng");
    return dropout(x, cfg.dropout, *opt.rng);
}

inline Tensor transformer_block(const Tensor &x, const BlockParams &b, const ModelConfig &cfg,
                                std::span<const Segment> segments, bool causal,
                                const ForwardOptions &opt, AttentionTrace *trace) {
    AttentionOptions ao;
    ao.heads = cfg.heads;
    ao.causal = causal;
    ao.trace = trace;
    auto q = matmul(x, b.wq);
    auto k = matmul(x, b.wk);
    auto v = matmul(x, b.wv);
    auto att = matmul(segmented_attention(q, k, v, segments, ao), b.wo);
    auto h = layer_norm(add(x, maybe_dropout(att, cfg, opt)), b.ln1_gain, b.ln1_bias);
    auto f = add_row(matmul(relu(add_row(matmul(h, b.ffn_w1), b.ffn_b1)), b.ffn_w2), b.ffn_b2);
    return layer_norm(add(h, maybe_dropout(f, cfg, opt)), b.ln2_gain, b.ln2_bias);
}

inline std::vector<AttentionTrace> *prepare_trace(std::vector<AttentionTrace> *t, std::size_t n) {
    if (t) {
        t->clear();
        t->resize(n);
    }
    return t;
}

} // namespace detail

/// Post embeddings for a list of posts, one row each [posts x emb].
inline Tensor encode_posts(const ModelParams &p, const ModelConfig &cfg,
                           std::span<const Post *const> posts, const ForwardOptions &opt = {}) {
    std::vector<std::size_t> ids, positions;
    std::vector<Segment> segments;
    for (const Post *post : posts) {
        if (post->ids.size() != post->mask.size())
            throw DimensionError("post ids and mask differ in length");
        if (post->ids.size() > cfg.tokens_per_post)
            throw DimensionError("post has " + std::to_string(post->ids.size()) +
                                 " token slots, limit " + std::to_string(cfg.tokens_per_post));
        Segment seg{ids.size(), 0};
        for (std::size_t i = 0; i < post->ids.size(); ++i) {
            if (!post->mask[i])
                continue;
            if (post->ids[i] < 0)
                throw IndexError("negative token id");
            ids.push_back(static_cast<std::size_t>(post->ids[i]));
            positions.push_back(i);
            ++seg.length;
        }
        if (seg.length == 0)
            throw ContractError("encode_post: post has no unmasked token");
        segments.push_back(seg);
    }
    if (segments.empty())
        throw ContractError("encode_posts: no posts");
    auto h = add(embedding_rows(p.token_emb, ids), embedding_rows(p.token_pos, positions));
    if (uses_mean_pooling(cfg.variant))
        return segment_mean(h, segments);
    auto *trace = detail::prepare_trace(opt.encoder_trace, p.encoder.size());
    for (std::size_t l = 0; l < p.encoder.size(); ++l)
        h = detail::transformer_block(h, p.encoder[l], cfg, segments, false, opt,
                                      trace ? &(*trace)[l] : nullptr);
    return segment_mean(h, segments);
}

/// Sequence embeddings [users x emb] from stacked post embeddings; each
/// segment holds one user's posts, oldest first.
inline Tensor encode_sequences(const ModelParams &p, const ModelConfig &cfg,
                               const Tensor &post_embs, std::span<const Segment> users,
                               const ForwardOptions &opt = {}) {
    if (users.empty())
        throw ContractError("encode_sequence: no sequences");
    std::vector<std::size_t> positions(post_embs.dim(0));
    std::vector<std::size_t> last;
    for (const auto &seg : users) {
        if (seg.length == 0)
            throw ContractError("encode_sequence: empty post sequence");
        if (seg.length > cfg.window)
            throw ContractError("encode_sequence: " + std::to_string(seg.length) +
                                " posts exceed the window of " + std::to_string(cfg.window));
        for (std::size_t i = 0; i < seg.length; ++i)
            positions.at(seg.offset + i) = i;
        last.push_back(seg.offset + seg.length - 1);
    }
    if (uses_mean_pooling(cfg.variant))
        return segment_mean(post_embs, users);
    auto h = add(post_embs, embedding_rows(p.post_pos, positions));
    auto *trace = detail::prepare_trace(opt.decoder_trace, p.decoder.size());
    for (std::size_t l = 0; l < p.decoder.size(); ++l)
        h = detail::transformer_block(h, p.decoder[l], cfg, users, true, opt,
                                      trace ? &(*trace)[l] : nullptr);
    return embedding_rows(h, last);
}

/// Class probabilities [rows x 2] (benign, bad) for embeddings [rows x emb].
inline Tensor classify(const ModelParams &p, const Tensor &emb) {
    return softmax_lastdim(matmul(emb.rank() == 1 ? as_row(emb) : emb, p.classifier));
}

/// Contrastive projection z = relu(emb W1) W2, row-wise.
inline Tensor project(const ModelParams &p, const Tensor &emb) {
    return matmul(relu(matmul(emb.rank() == 1 ? as_row(emb) : emb, p.proj1)), p.proj2);
}

/// Argmax over (benign, bad) with ties going to bad.
inline int predicted_label(double p_benign, double p_bad) { return p_bad >= p_benign ? 1 : 0; }

inline std::vector<int> predicted_labels(const Tensor &probs) {
    std::vector<int> out(probs.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = predicted_label(probs.at(i, 0), probs.at(i, 1));
    return out;
}

/// Single-post convenience wrapper; returns [emb].
inline Tensor encode_post(const ModelParams &p, const ModelConfig &cfg,
                          std::span<const std::int32_t> ids, const Mask &mask,
                          const ForwardOptions &opt = {}) {
    Post post{std::vector<std::int32_t>(ids.begin(), ids.end()), mask};
    const Post *ptr = &post;
    return flatten(encode_posts(p, cfg, std::span<const Post *const>(&ptr, 1), opt));
}

/// Single-sequence wrapper: rows of `post_embs` are post slots, `post_mask`
/// marks the valid ones (chronological). Returns [emb].
inline Tensor encode_sequence(const ModelParams &p, const ModelConfig &cfg,
                              const Tensor &post_embs, const Mask &post_mask,
                              const ForwardOptions &opt = {}) {
    if (post_embs.rank() != 2 || post_mask.size() != post_embs.dim(0))
        throw DimensionError("encode_sequence: mask length does not match post rows");
    std::vector<std::size_t> valid;
    for (std::size_t i = 0; i < post_mask.size(); ++i)
        if (post_mask[i])
            valid.push_back(i);
    if (valid.empty())
        throw ContractError("encode_sequence: empty post sequence");
    auto rows = embedding_rows(post_embs, valid);
    const Segment seg{0, valid.size()};
    return flatten(encode_sequences(p, cfg, rows, std::span<const Segment>(&seg, 1), opt));
}

struct ForwardResult {
    Tensor embedding; // [users x emb]
    Tensor probs;     // [users x 2]
    Tensor z;         // [users x emb]
};

/// Full pipeline for a batch of users in one graph.
inline ForwardResult forward_batch(const ModelParams &p, const ModelConfig &cfg,
                                   std::span<const UserSequence *const> users,
                                   const ForwardOptions &opt = {}) {
    std::vector<const Post *> posts;
    std::vector<Segment> segs;
    for (const auto *u : users) {
        if (u->posts.empty())
            throw ContractError("user " + u->user_id + " has no posts");
        segs.push_back({posts.size(), u->posts.size()});
        for (const auto &post : u->posts)
            posts.push_back(&post);
    }
    auto post_embs = encode_posts(p, cfg, posts, opt);
    auto emb = encode_sequences(p, cfg, post_embs, segs, opt);
    return {emb, classify(p, emb), project(p, emb)};
}

inline ForwardResult forward(const ModelParams &p, const ModelConfig &cfg,
                             const UserSequence &user, const ForwardOptions &opt = {}) {
    const UserSequence *ptr = &user;
    return forward_batch(p, cfg, std::span<const UserSequence *const>(&ptr, 1), opt);
}

} // namespace robad
