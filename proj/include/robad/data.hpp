#pragma once

// Corpus ingestion, preprocessing, vocabulary, cross-validation folds and the
// synthetic corpus generator.

#include "errors.hpp"
#include "ops.hpp"
#include "random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace robad {

struct RawPost {
    std::string text;
    std::int64_t ts = 0;

    bool operator==(const RawPost &) const = default;
};

struct RawUser {
    std::string user_id;
    int label = 0; // 0 benign, 1 bad actor
    std::vector<RawPost> posts;

    bool operator==(const RawUser &) const = default;
};

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr const char *kPadToken = "<pad>";
inline constexpr const char *kUnkToken = "<unk>";

/// One post padded or truncated to a fixed token count.
struct Post {
    std::vector<std::int32_t> ids;
    Mask mask;

    std::size_t valid_count() const {
        return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(),
                                                      [](auto m) { return m != 0; }));
    }
    /// Ids of unmasked positions, in order.
    std::vector<std::int32_t> valid_ids() const {
        std::vector<std::int32_t> out;
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (mask[i])
                out.push_back(ids[i]);
        return out;
    }

    bool operator==(const Post &) const = default;
};

/// A user's most recent posts (oldest first), already mapped to ids.
struct UserSequence {
    std::string user_id;
    int label = 0;
    std::vector<Post> posts;

    /// Slot validity over a window of `window` post slots.
    Mask post_mask(std::size_t window) const {
        Mask m(window, 0);
        std::fill_n(m.begin(), std::min(window, posts.size()), 1);
        return m;
    }

    bool operator==(const UserSequence &) const = default;
};

// ─── Corpus file ────────────────────────────────────────────────────────────

namespace detail {

inline RawUser parse_user_record(const std::string &line, std::size_t lineno) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object())
        throw ParseError(lineno, "record is not an object");
    for (const char *key : {"user_id", "label", "posts"})
        if (!j.contains(key))
            throw ParseError(lineno, std::string("missing key \"") + key + "\"");
    if (j.size() != 3)
        for (const auto &[k, _] : j.items())
            if (k != "user_id" && k != "label" && k != "posts")
                throw ParseError(lineno, "unexpected key \"" + k + "\"");
    RawUser u;
    if (!j["user_id"].is_string())
        throw ParseError(lineno, "\"user_id\" must be a string");
    u.user_id = j["user_id"].get<std::string>();
    if (!j["label"].is_number_integer())
        throw ParseError(lineno, "\"label\" must be an integer");
    const auto label = j["label"].get<long long>();
    if (label != 0 && label != 1)
        throw ParseError(lineno, "\"label\" must be 0 or 1");
    u.label = static_cast<int>(label);
    if (!j["posts"].is_array())
        throw ParseError(lineno, "\"posts\" must be an array");
    for (const auto &p : j["posts"]) {
        if (!p.is_object() || p.size() != 2 || !p.contains("text") || !p.contains("ts"))
            throw ParseError(lineno, "post must be an object with exactly \"text\" and \"ts\"");
        if (!p["text"].is_string() || !p["ts"].is_number_integer())
            throw ParseError(lineno, "post \"text\" must be a string and \"ts\" an integer");
        RawPost rp{p["text"].get<std::string>(), p["ts"].get<std::int64_t>()};
        if (!u.posts.empty() && rp.ts < u.posts.back().ts)
            throw ParseError(lineno, "post timestamps are not ascending");
        u.posts.push_back(std::move(rp));
    }
    return u;
}

} // namespace detail

inline std::string to_record_line(const RawUser &u) {
    nlohmann::ordered_json j;
    j["user_id"] = u.user_id;
    j["label"] = u.label;
    auto posts = nlohmann::ordered_json::array();
    for (const auto &p : u.posts) {
        nlohmann::ordered_json pj;
        pj["text"] = p.text;
        pj["ts"] = p.ts;
        posts.push_back(std::move(pj));
    }
    j["posts"] = std::move(posts);
    return j.dump();
}

inline std::vector<RawUser> parse_corpus(std::istream &in) {
    std::vector<RawUser> users;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        users.push_back(detail::parse_user_record(line, lineno));
    }
    return users;
}

inline std::vector<RawUser> load_corpus(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open corpus file " + path);
    return parse_corpus(in);
}

inline void save_corpus(const std::string &path, const std::vector<RawUser> &users) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot write corpus file " + path);
    for (const auto &u : users)
        out << to_record_line(u) << '\n';
    if (!out)
        throw IoError("write failed for " + path);
}

// ─── Tokenisation and vocabulary ────────────────────────────────────────────

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!cur.empty())
                out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!cur.empty())
        out.push_back(std::move(cur));
    return out;
}

class Vocab {
  public:
    Vocab() : tokens_{kPadToken, kUnkToken} { reindex(); }

    /// Tokens seen at least `min_freq` times, most frequent first (ties
    /// lexicographic), after the two reserved entries.
    static Vocab build(const std::vector<std::vector<std::string>> &posts, std::size_t min_freq) {
        std::map<std::string, std::size_t> counts;
        for (const auto &p : posts)
            for (const auto &t : p)
                if (t != kPadToken && t != kUnkToken)
                    ++counts[t];
        std::vector<std::pair<std::string, std::size_t>> kept;
        for (auto &[t, c] : counts)
            if (c >= min_freq)
                kept.emplace_back(t, c);
        std::stable_sort(kept.begin(), kept.end(),
                         [](const auto &a, const auto &b) { return a.second > b.second; });
        Vocab v;
        v.min_freq_ = min_freq;
        for (auto &[t, _] : kept)
            v.tokens_.push_back(t);
        v.reindex();
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    std::size_t min_freq() const { return min_freq_; }
    const std::vector<std::string> &tokens() const { return tokens_; }

    std::int32_t id(const std::string &token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnkId : it->second;
    }
    const std::string &token(std::int32_t id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw IndexError("vocab id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<std::size_t>(id)];
    }

    void save(const std::string &path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot write vocab file " + path);
        for (const auto &t : tokens_)
            out << t << '\n';
    }

    static Vocab load(const std::string &path) {
        std::ifstream in(path, std::ios::binary);
        if (!in)
            throw IoError("cannot open vocab file " + path);
        Vocab v;
        v.tokens_.clear();
        std::string line;
        while (std::getline(in, line))
            v.tokens_.push_back(line);
        if (v.tokens_.size() < 2 || v.tokens_[0] != kPadToken || v.tokens_[1] != kUnkToken)
            throw DataError("vocab file " + path + " must start with <pad> and <unk>");
        v.reindex();
        if (v.index_.size() != v.tokens_.size())
            throw DataError("vocab file " + path + " has duplicate tokens");
        return v;
    }

    bool operator==(const Vocab &o) const { return tokens_ == o.tokens_; }

  private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < tokens_.size(); ++i)
            index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
    std::size_t min_freq_ = 2;
};

// ─── Preprocessing ──────────────────────────────────────────────────────────

struct PreprocessSettings {
    std::size_t tokens_per_post = 30;
    std::size_t window = 20;
    std::size_t min_post_tokens = 5;
    std::size_t min_posts = 5;
    std::size_t min_freq = 2;
};

/// A user after the post/user filters, still as token strings.
struct TokenizedUser {
    std::string user_id;
    int label = 0;
    std::vector<std::vector<std::string>> posts;
};

/// Drops short posts, then users left with too few posts, then keeps each
/// survivor's most recent `window` posts. Input order is preserved.
inline std::vector<TokenizedUser> filter_users(const std::vector<RawUser> &users,
                                               const PreprocessSettings &s) {
    std::vector<TokenizedUser> out;
    for (const auto &u : users) {
        TokenizedUser t{u.user_id, u.label, {}};
        for (const auto &p : u.posts) {
            auto toks = tokenize(p.text);
            if (toks.size() >= s.min_post_tokens)
                t.posts.push_back(std::move(toks));
        }
        if (t.posts.size() < s.min_posts)
            continue;
        if (t.posts.size() > s.window)
            t.posts.erase(t.posts.begin(),
                          t.posts.begin() + static_cast<std::ptrdiff_t>(t.posts.size() - s.window));
        out.push_back(std::move(t));
    }
    return out;
}

inline Vocab build_vocab(const std::vector<TokenizedUser> &users, std::size_t min_freq) {
    std::vector<std::vector<std::string>> posts;
    for (const auto &u : users)
        posts.insert(posts.end(), u.posts.begin(), u.posts.end());
    return Vocab::build(posts, min_freq);
}

inline Post encode_post_tokens(const std::vector<std::string> &tokens, const Vocab &vocab,
                               std::size_t tokens_per_post) {
    Post p{std::vector<std::int32_t>(tokens_per_post, kPadId), Mask(tokens_per_post, 0)};
    for (std::size_t i = 0; i < std::min(tokens.size(), tokens_per_post); ++i) {
        p.ids[i] = vocab.id(tokens[i]);
        p.mask[i] = 1;
    }
    return p;
}

inline UserSequence encode_user(const TokenizedUser &u, const Vocab &vocab,
                                const PreprocessSettings &s) {
    UserSequence seq{u.user_id, u.label, {}};
    for (const auto &p : u.posts)
        seq.posts.push_back(encode_post_tokens(p, vocab, s.tokens_per_post));
    return seq;
}

inline std::vector<UserSequence> encode_users(const std::vector<TokenizedUser> &users,
                                              const Vocab &vocab, const PreprocessSettings &s) {
    std::vector<UserSequence> out;
    out.reserve(users.size());
    for (const auto &u : users)
        out.push_back(encode_user(u, vocab, s));
    return out;
}

struct Preprocessed {
    std::vector<UserSequence> users;
    Vocab vocab;
};

/// Filters, builds the vocabulary over every surviving user and encodes.
/// Cross-validation builds one vocabulary per training split instead; see
/// filter_users / build_vocab / encode_users.
inline Preprocessed preprocess(const std::vector<RawUser> &users, const PreprocessSettings &s) {
    if (users.empty())
        throw ContractError("preprocess: empty user list");
    auto kept = filter_users(users, s);
    if (kept.empty())
        throw ContractError("preprocess: no user survives the post/user filters");
    auto vocab = build_vocab(kept, s.min_freq);
    return {encode_users(kept, vocab, s), std::move(vocab)};
}

/// Inverse of encoding up to UNK and truncation; timestamps are post indices.
inline RawUser detokenize(const UserSequence &seq, const Vocab &vocab) {
    RawUser u{seq.user_id, seq.label, {}};
    std::int64_t ts = 0;
    for (const auto &p : seq.posts) {
        std::string text;
        for (auto id : p.valid_ids()) {
            if (!text.empty())
                text.push_back(' ');
            text += vocab.token(id);
        }
        u.posts.push_back({std::move(text), ts++});
    }
    return u;
}

// ─── Cross-validation ───────────────────────────────────────────────────────

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Stratified k-fold partition of indices [0, labels.size()).
inline std::vector<Fold> kfold_split(const std::vector<int> &labels, std::size_t k,
                                     std::uint64_t seed) {
    if (k < 2)
        throw ContractError("kfold_split: k must be at least 2");
    if (labels.size() < k)
        throw ContractError("kfold_split: " + std::to_string(labels.size()) +
                            " users for " + std::to_string(k) + " folds");
    std::array<std::vector<std::size_t>, 2> by_label;
    for (std::size_t i = 0; i < labels.size(); ++i)
        by_label.at(static_cast<std::size_t>(labels[i])).push_back(i);
    if (by_label[0].empty() || by_label[1].empty())
        throw ContractError("kfold_split: both labels must be present");
    Rng rng(mix_seed(seed, 0x6b666f6c64ULL));
    std::vector<std::vector<std::size_t>> tests(k);
    std::size_t next = 0;
    for (auto &group : by_label) {
        shuffle(group, rng);
        for (auto idx : group)
            tests[next++ % k].push_back(idx);
    }
    std::vector<Fold> folds(k);
    for (std::size_t f = 0; f < k; ++f) {
        std::sort(tests[f].begin(), tests[f].end());
        folds[f].test = tests[f];
        for (std::size_t g = 0; g < k; ++g)
            if (g != f)
                folds[f].train.insert(folds[f].train.end(), tests[g].begin(), tests[g].end());
        std::sort(folds[f].train.begin(), folds[f].train.end());
    }
    return folds;
}

/// Moves a stratified `fraction` of `indices` into a held-out set.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
stratified_holdout(const std::vector<std::size_t> &indices, const std::vector<int> &labels,
                   double fraction, std::uint64_t seed) {
    std::array<std::vector<std::size_t>, 2> by_label;
    for (auto i : indices)
        by_label.at(static_cast<std::size_t>(labels.at(i))).push_back(i);
    Rng rng(mix_seed(seed, 0x686f6c646f7574ULL));
    std::vector<std::size_t> keep, held;
    for (auto &group : by_label) {
        shuffle(group, rng);
        const auto n_held = static_cast<std::size_t>(
            std::floor(fraction * static_cast<double>(group.size()) + 0.5));
        for (std::size_t j = 0; j < group.size(); ++j)
            (j < n_held ? held : keep).push_back(group[j]);
    }
    std::sort(keep.begin(), keep.end());
    std::sort(held.begin(), held.end());
    return {keep, held};
}

// ─── Synthetic corpus ───────────────────────────────────────────────────────

/// Two-topic corpus: benign users draw from vocabulary "ben*", bad users
/// from "bad*", each token falling back to the shared "sh*" fillers with
/// probability 1 - class_sep. Labels alternate, so classes are balanced.
inline std::vector<RawUser> gen_synthetic(std::size_t n_users, double class_sep,
                                          std::uint64_t seed) {
    if (n_users < 10)
        throw ContractError("gen_synthetic: need at least 10 users, got " +
                            std::to_string(n_users));
    if (!(class_sep >= 0.0 && class_sep <= 1.0))
        throw ContractError("gen_synthetic: class_sep must lie in [0, 1]");
    constexpr std::size_t kClassVocab = 50, kSharedVocab = 100;
    Rng rng(mix_seed(seed, 0x73796e7468ULL));
    std::vector<RawUser> users;
    users.reserve(n_users);
    for (std::size_t u = 0; u < n_users; ++u) {
        RawUser user;
        char id[32];
        std::snprintf(id, sizeof id, "user%05zu", u);
        user.user_id = id;
        user.label = static_cast<int>(u % 2);
        const char *prefix = user.label ? "bad" : "ben";
        const std::size_t n_posts = 8 + uniform_index(rng, 13);
        std::int64_t ts = 1'600'000'000 + static_cast<std::int64_t>(uniform_index(rng, 1'000'000));
        for (std::size_t p = 0; p < n_posts; ++p) {
            const std::size_t n_tok = 6 + uniform_index(rng, 25);
            std::string text;
            for (std::size_t t = 0; t < n_tok; ++t) {
                if (t)
                    text.push_back(' ');
                if (uniform01(rng) < class_sep)
                    text += prefix + std::to_string(uniform_index(rng, kClassVocab));
                else
                    text += "sh" + std::to_string(uniform_index(rng, kSharedVocab));
            }
            ts += 60 + static_cast<std::int64_t>(uniform_index(rng, 86'400));
            user.posts.push_back({std::move(text), ts});
        }
        users.push_back(std::move(user));
    }
    return users;
}

} // namespace robad
