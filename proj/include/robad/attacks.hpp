#pragma once

// Next-post attack simulators. Each produces one new post for a victim and
// apply_attack appends it under the recency window.

#include "data.hpp"
#include "random.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace robad {

enum class AttackKind {
    copy_append,  // re-post one of the victim's own posts
    foreign_post, // post copied from a user of the opposite label
    ngram_gen,    // Markov-chain text fitted on opposite-label posts
    identity,     // no-op; leaves the sequence unchanged (harness checks)
};

inline const char *to_string(AttackKind k) {
    switch (k) {
    case AttackKind::copy_append:
        return "copy_append";
    case AttackKind::foreign_post:
        return "foreign_post";
    case AttackKind::ngram_gen:
        return "ngram_gen";
    case AttackKind::identity:
        return "identity";
    }
    return "?";
}

/// Accepts the long names and the CLI short forms copy / foreign / ngram.
inline AttackKind parse_attack_kind(const std::string &s) {
    if (s == "copy_append" || s == "copy")
        return AttackKind::copy_append;
    if (s == "foreign_post" || s == "foreign")
        return AttackKind::foreign_post;
    if (s == "ngram_gen" || s == "ngram")
        return AttackKind::ngram_gen;
    if (s == "identity" || s == "none")
        return AttackKind::identity;
    throw ConfigError("attack", "unknown attack kind \"" + s + "\"");
}

struct AttackSpec {
    AttackKind kind = AttackKind::copy_append;
    std::uint64_t seed = 0;
    std::size_t ngram_order = 2;
    std::size_t target_len = 30;
};

namespace detail {

inline Rng attack_rng(const AttackSpec &spec, const std::string &user_id) {
    return Rng(mix_seed(mix_seed(spec.seed, static_cast<std::uint64_t>(spec.kind)),
                        fnv1a64(user_id)));
}

inline std::vector<const UserSequence *> opposite_label_users(const UserSequence &victim,
                                                              std::span<const UserSequence> corpus) {
    std::vector<const UserSequence *> out;
    for (const auto &u : corpus)
        if (u.label != victim.label && u.user_id != victim.user_id && !u.posts.empty())
            out.push_back(&u);
    if (out.empty())
        throw ContractError("attack: corpus has no user with a label other than " +
                            std::to_string(victim.label));
    return out;
}

} // namespace detail

/// Order-k Markov chain over token ids. Contexts are the previous k-1
/// tokens, or the shorter post prefix near the start of a post.
class NgramModel {
  public:
    NgramModel(std::span<const std::vector<std::int32_t>> posts, std::size_t order)
        : order_(order) {
        if (order < 1)
            throw ContractError("ngram order must be at least 1");
        for (const auto &p : posts) {
            if (p.empty())
                continue;
            ++starts_[p.front()];
            for (std::size_t i = 1; i < p.size(); ++i)
                ++transitions_[context(p, i)][p[i]];
        }
        if (starts_.empty())
            throw ContractError("ngram model fitted on an empty corpus");
    }

    /// Samples up to `max_len` tokens; stops early at a context with no
    /// observed continuation.
    std::vector<std::int32_t> sample(Rng &rng, std::size_t max_len) const {
        std::vector<std::int32_t> out;
        if (max_len == 0)
            return out;
        out.push_back(draw(starts_, rng));
        while (out.size() < max_len) {
            auto it = transitions_.find(context(out, out.size()));
            if (it == transitions_.end())
                break;
            out.push_back(draw(it->second, rng));
        }
        return out;
    }

    const std::map<std::vector<std::int32_t>, std::map<std::int32_t, std::size_t>> &
    transitions() const {
        return transitions_;
    }
    const std::map<std::int32_t, std::size_t> &starts() const { return starts_; }

  private:
    std::vector<std::int32_t> context(const std::vector<std::int32_t> &seq, std::size_t pos) const {
        const std::size_t len = std::min(pos, order_ - 1);
        return {seq.begin() + static_cast<std::ptrdiff_t>(pos - len),
                seq.begin() + static_cast<std::ptrdiff_t>(pos)};
    }

    static std::int32_t draw(const std::map<std::int32_t, std::size_t> &counts, Rng &rng) {
        std::size_t total = 0;
        for (const auto &[_, c] : counts)
            total += c;
        auto r = uniform_index(rng, total);
        for (const auto &[tok, c] : counts) {
            if (r < c)
                return tok;
            r -= c;
        }
        return counts.rbegin()->first;
    }

    std::size_t order_;
    std::map<std::int32_t, std::size_t> starts_;
    std::map<std::vector<std::int32_t>, std::map<std::int32_t, std::size_t>> transitions_;
};

/// Valid token ids of the generated post (at most spec.target_len).
/// Deterministic in (spec, victim id, corpus).
inline std::vector<std::int32_t> generate_post(const AttackSpec &spec, const UserSequence &user,
                                               std::span<const UserSequence> corpus) {
    if (user.posts.empty())
        throw ContractError("generate_post: user " + user.user_id + " has no posts");
    auto rng = detail::attack_rng(spec, user.user_id);
    switch (spec.kind) {
    case AttackKind::identity:
        return {};
    case AttackKind::copy_append:
        return user.posts[uniform_index(rng, user.posts.size())].valid_ids();
    case AttackKind::foreign_post: {
        auto donors = detail::opposite_label_users(user, corpus);
        const auto *donor = donors[uniform_index(rng, donors.size())];
        return donor->posts[uniform_index(rng, donor->posts.size())].valid_ids();
    }
    case AttackKind::ngram_gen: {
        std::vector<std::vector<std::int32_t>> texts;
        for (const auto *u : detail::opposite_label_users(user, corpus))
            for (const auto &p : u->posts)
                texts.push_back(p.valid_ids());
        NgramModel model(texts, spec.ngram_order);
        return model.sample(rng, spec.target_len);
    }
    }
    return {};
}

/// Appends `new_post` (ids, no padding) and keeps the most recent `window`
/// posts. Empty `new_post` leaves the sequence unchanged.
inline UserSequence apply_attack(const UserSequence &user, const std::vector<std::int32_t> &new_post,
                                 std::size_t window, std::size_t tokens_per_post) {
    UserSequence out = user;
    if (new_post.empty())
        return out;
    Post p{std::vector<std::int32_t>(tokens_per_post, kPadId), Mask(tokens_per_post, 0)};
    for (std::size_t i = 0; i < std::min(new_post.size(), tokens_per_post); ++i) {
        p.ids[i] = new_post[i];
        p.mask[i] = 1;
    }
    out.posts.push_back(std::move(p));
    if (out.posts.size() > window)
        out.posts.erase(out.posts.begin(),
                        out.posts.begin() + static_cast<std::ptrdiff_t>(out.posts.size() - window));
    return out;
}

/// generate_post followed by apply_attack.
inline UserSequence attack_user(const AttackSpec &spec, const UserSequence &user,
                                std::span<const UserSequence> corpus, std::size_t window,
                                std::size_t tokens_per_post) {
    return apply_attack(user, generate_post(spec, user, corpus), window, tokens_per_post);
}

} // namespace robad
