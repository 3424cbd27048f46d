#include <catch_amalgamated.hpp>

#include <robad/model.hpp>

#include <cmath>

using namespace robad;
using Catch::Approx;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.tokens_per_post = 6;
    cfg.window = 4;
    cfg.emb_dim = 8;
    cfg.heads = 2;
    return cfg;
}

Post make_post(std::vector<std::int32_t> ids, std::size_t slots) {
    Post p{std::vector<std::int32_t>(slots, kPadId), Mask(slots, 0)};
    for (std::size_t i = 0; i < ids.size(); ++i) {
        p.ids[i] = ids[i];
        p.mask[i] = 1;
    }
    return p;
}

void zero(Tensor &t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); }

// Plain-loop layer norm with unit gain and zero bias.
std::vector<double> ln_row(const std::vector<double> &x) {
    double m = 0, v = 0;
    for (double a : x)
        m += a;
    m /= static_cast<double>(x.size());
    for (double a : x)
        v += (a - m) * (a - m);
    v /= static_cast<double>(x.size());
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = (x[i] - m) / std::sqrt(v + 1e-5);
    return y;
}

} // namespace

TEST_CASE("init is deterministic per seed", "[model]") {
    auto cfg = tiny_config();
    auto a = init_params(cfg, 4), b = init_params(cfg, 4), c = init_params(cfg, 5);
    CHECK(a.same_values(b));
    CHECK_FALSE(a.same_values(c));
}

TEST_CASE("init follows the Glorot bound, zero biases and unit gains", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 1);
    const double bound = std::sqrt(6.0 / (cfg.emb_dim + cfg.ffn_dim()));
    for (double v : p.encoder[0].ffn_w1.data())
        CHECK(std::abs(v) <= bound);
    for (double v : p.encoder[0].ffn_b1.data())
        CHECK(v == 0.0);
    for (double v : p.decoder[0].ln2_gain.data())
        CHECK(v == 1.0);
    for (double v : p.decoder[0].ln2_bias.data())
        CHECK(v == 0.0);
}

TEST_CASE("config validation", "[model]") {
    ModelConfig cfg = tiny_config();
    CHECK(cfg.head_dim() == 4);
    cfg.emb_dim = 9;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.enc_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(parse_variant("bogus"), ConfigError);
}

TEST_CASE("parameter count matches the hand formula for the default config", "[model]") {
    ModelConfig cfg; // defaults: emb 128, heads 2, one encoder and decoder layer
    cfg.vocab_size = 5000;
    const std::size_t V = 5000, d = 30, T = 20, E = 128, F = 4 * 128, L = 2;
    const std::size_t expected =
        V * E + d * E + T * E + L * (4 * E * E + 2 * E * F + F + E + 4 * E) + 2 * E + 2 * E * E;
    CHECK(init_params(cfg, 0).count() == expected);
}

TEST_CASE("encode_post returns one emb-sized vector", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 2);
    auto post = make_post({3, 4, 5}, cfg.tokens_per_post);
    auto h = encode_post(p, cfg, post.ids, post.mask);
    REQUIRE(h.shape() == Shape{cfg.emb_dim});
    auto again = encode_post(p, cfg, post.ids, post.mask);
    CHECK(std::equal(h.data().begin(), h.data().end(), again.data().begin()));
}

TEST_CASE("all-padding post is rejected", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 2);
    Post post{std::vector<std::int32_t>(cfg.tokens_per_post, kPadId), Mask(cfg.tokens_per_post, 0)};
    CHECK_THROWS_AS(encode_post(p, cfg, post.ids, post.mask), ContractError);
    auto bad = make_post({25}, cfg.tokens_per_post);
    CHECK_THROWS_AS(encode_post(p, cfg, bad.ids, bad.mask), IndexError);
}

TEST_CASE("zeroed attention and FFN weights reduce the encoder to two layer norms", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 3);
    auto &b = p.encoder[0];
    for (Tensor *t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ffn_w1, &b.ffn_w2})
        zero(*t);
    const std::vector<std::int32_t> ids{7, 2, 9, 7};
    auto post = make_post(ids, cfg.tokens_per_post);
    auto h = encode_post(p, cfg, post.ids, post.mask);

    const std::size_t E = cfg.emb_dim;
    std::vector<double> expected(E, 0.0);
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
        std::vector<double> x(E);
        for (std::size_t c = 0; c < E; ++c)
            x[c] = p.token_emb.at(static_cast<std::size_t>(ids[pos]), c) + p.token_pos.at(pos, c);
        auto y = ln_row(ln_row(x));
        for (std::size_t c = 0; c < E; ++c)
            expected[c] += y[c] / static_cast<double>(ids.size());
    }
    for (std::size_t c = 0; c < E; ++c)
        CHECK(h.at(c) == Approx(expected[c]).margin(1e-12));
}

TEST_CASE("extra padding leaves post embeddings unchanged", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 4);
    auto short_post = make_post({5, 6, 7}, 3);
    auto padded = make_post({5, 6, 7}, cfg.tokens_per_post);
    for (std::size_t i = 3; i < padded.ids.size(); ++i)
        padded.ids[i] = 11; // garbage under the mask
    auto a = encode_post(p, cfg, short_post.ids, short_post.mask);
    auto b = encode_post(p, cfg, padded.ids, padded.mask);
    for (std::size_t c = 0; c < cfg.emb_dim; ++c)
        CHECK(std::abs(a.at(c) - b.at(c)) <= 1e-10);
}

TEST_CASE("masked post slots leave the sequence embedding unchanged", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 5);
    Rng rng(1);
    std::vector<double> rows(4 * cfg.emb_dim);
    for (auto &v : rows)
        v = uniform(rng, -1, 1);
    auto full = Tensor::matrix(4, cfg.emb_dim, rows);
    auto two = slice_rows(full, 0, 2);
    auto a = encode_sequence(p, cfg, two, Mask{1, 1});
    auto b = encode_sequence(p, cfg, full, Mask{1, 1, 0, 0});
    for (std::size_t c = 0; c < cfg.emb_dim; ++c)
        CHECK(std::abs(a.at(c) - b.at(c)) <= 1e-10);
    CHECK_THROWS_AS(encode_sequence(p, cfg, full, Mask{0, 0, 0, 0}), ContractError);
}

TEST_CASE("decoder positions depend only on earlier posts", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 6);
    Rng rng(2);
    std::vector<double> rows(4 * cfg.emb_dim);
    for (auto &v : rows)
        v = uniform(rng, -1, 1);
    auto x = Tensor::matrix(4, cfg.emb_dim, rows);
    for (std::size_t c = 0; c < cfg.emb_dim; ++c)
        rows[3 * cfg.emb_dim + c] += 0.5;
    auto x2 = Tensor::matrix(4, cfg.emb_dim, rows);
    std::vector<Segment> seg{{0, 4}};
    auto y = detail::transformer_block(x, p.decoder[0], cfg, seg, true, {}, nullptr);
    auto y2 = detail::transformer_block(x2, p.decoder[0], cfg, seg, true, {}, nullptr);
    for (std::size_t i = 0; i < 3 * cfg.emb_dim; ++i)
        CHECK(y.data()[i] == y2.data()[i]);
    bool last_changed = false;
    for (std::size_t i = 3 * cfg.emb_dim; i < 4 * cfg.emb_dim; ++i)
        last_changed = last_changed || y.data()[i] != y2.data()[i];
    CHECK(last_changed);
}

TEST_CASE("every decoder layer has zero weight above the diagonal", "[model]") {
    auto cfg = tiny_config();
    cfg.dec_layers = 2;
    auto p = init_params(cfg, 7);
    UserSequence u{"u", 1, {}};
    for (int k = 0; k < 4; ++k)
        u.posts.push_back(make_post({2 + k, 3, 4 + k}, cfg.tokens_per_post));
    std::vector<AttentionTrace> trace;
    ForwardOptions opt;
    opt.decoder_trace = &trace;
    forward(p, cfg, u, opt);
    REQUIRE(trace.size() == 2);
    for (const auto &t : trace)
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const auto &w = t.at(0, h);
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = i + 1; j < 4; ++j)
                    CHECK(w[i * 4 + j] == 0.0);
        }
}

TEST_CASE("single-post sequence attends to itself with weight one", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 8);
    UserSequence u{"u", 0, {make_post({3, 4, 5}, cfg.tokens_per_post)}};
    std::vector<AttentionTrace> trace;
    ForwardOptions opt;
    opt.decoder_trace = &trace;
    forward(p, cfg, u, opt);
    REQUIRE(trace[0].lengths == std::vector<std::size_t>{1});
    CHECK(trace[0].at(0, 0)[0] == 1.0);
}

TEST_CASE("appending a post moves the readout to the new last position", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 9);
    Rng rng(3);
    std::vector<double> rows(3 * cfg.emb_dim);
    for (auto &v : rows)
        v = uniform(rng, -1, 1);
    auto x = Tensor::matrix(3, cfg.emb_dim, rows);
    auto two = encode_sequence(p, cfg, x, Mask{1, 1, 0});
    auto three = encode_sequence(p, cfg, x, Mask{1, 1, 1});
    // the readout of the shorter history equals position 2 of the longer one
    auto h = add(x, slice_rows(p.post_pos, 0, 3));
    std::vector<Segment> seg{{0, 3}};
    auto all = detail::transformer_block(h, p.decoder[0], cfg, seg, true, {}, nullptr);
    for (std::size_t c = 0; c < cfg.emb_dim; ++c) {
        CHECK(two.at(c) == Approx(all.at(1, c)).margin(1e-14));
        CHECK(three.at(c) == Approx(all.at(2, c)).margin(1e-14));
    }
}

TEST_CASE("classifier probabilities and the tie rule", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 10);
    Rng rng(4);
    std::vector<double> e(cfg.emb_dim);
    for (auto &v : e)
        v = uniform(rng, -1, 1);
    auto emb = Tensor::vector(e);
    auto probs = classify(p, emb);
    CHECK(probs.at(0, 0) + probs.at(0, 1) == Approx(1.0).margin(1e-12));
    const int label = predicted_label(probs.at(0, 0), probs.at(0, 1));
    auto scaled = p;
    scaled.classifier = scale(p.classifier, 3.5).detach();
    auto probs2 = classify(scaled, emb);
    CHECK(predicted_label(probs2.at(0, 0), probs2.at(0, 1)) == label);

    zero(p.classifier);
    auto half = classify(p, emb);
    CHECK(half.at(0, 0) == 0.5);
    CHECK(half.at(0, 1) == 0.5);
    CHECK(predicted_labels(half) == std::vector<int>{1});
}

TEST_CASE("projection head examples", "[model]") {
    ModelConfig cfg = tiny_config();
    cfg.emb_dim = 2;
    cfg.heads = 1;
    auto p = init_params(cfg, 11);
    p.proj1 = Tensor::matrix(2, 2, {1, 0, 0, 1});
    p.proj2 = Tensor::matrix(2, 2, {2, 0, 0, 2});
    auto z = project(p, Tensor::vector({1, -2}));
    CHECK(z.at(0, 0) == 2.0);
    CHECK(z.at(0, 1) == 0.0);

    p.proj2 = Tensor::matrix(2, 2, {1, 0, 0, 1});
    auto same = project(p, Tensor::vector({0.5, 3}));
    CHECK(same.at(0, 0) == 0.5);
    CHECK(same.at(0, 1) == 3.0);
    auto killed = project(p, Tensor::vector({-0.5, -3}));
    CHECK(killed.at(0, 0) == 0.0);
    CHECK(killed.at(0, 1) == 0.0);
}

TEST_CASE("full forward gives finite outputs", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 12);
    UserSequence u{"u", 1, {make_post({2, 3}, 6), make_post({4, 5, 6, 7}, 6)}};
    auto fr = forward(p, cfg, u);
    for (double v : fr.embedding.data())
        CHECK(std::isfinite(v));
    CHECK(fr.probs.at(0, 0) + fr.probs.at(0, 1) == Approx(1.0).margin(1e-12));
    REQUIRE(fr.z.shape() == Shape{1, cfg.emb_dim});
}

TEST_CASE("mean-pooling variant on identical posts returns the post embedding", "[model]") {
    auto cfg = tiny_config();
    cfg.variant = Variant::no_local_global;
    auto p = init_params(cfg, 13);
    auto post = make_post({3, 8, 5}, cfg.tokens_per_post);
    UserSequence u{"u", 0, {post, post, post}};
    auto seq = forward(p, cfg, u).embedding;
    auto single = encode_post(p, cfg, post.ids, post.mask);
    for (std::size_t c = 0; c < cfg.emb_dim; ++c)
        CHECK(seq.at(0, c) == Approx(single.at(c)).margin(1e-15));
}

TEST_CASE("post order matters for the full model but not for mean pooling", "[model]") {
    auto cfg = tiny_config();
    auto a = make_post({2, 3, 4}, 6), b = make_post({9, 10}, 6), c = make_post({5, 5, 6, 7}, 6);
    UserSequence fwd{"u", 0, {a, b, c}}, rev{"u", 0, {c, a, b}};
    auto full_p = init_params(cfg, 14);
    auto e1 = forward(full_p, cfg, fwd).embedding, e2 = forward(full_p, cfg, rev).embedding;
    double diff = 0;
    for (std::size_t i = 0; i < cfg.emb_dim; ++i)
        diff = std::max(diff, std::abs(e1.data()[i] - e2.data()[i]));
    CHECK(diff > 1e-6);

    cfg.variant = Variant::no_local_global;
    auto mp = init_params(cfg, 14);
    auto m1 = forward(mp, cfg, fwd).embedding, m2 = forward(mp, cfg, rev).embedding;
    for (std::size_t i = 0; i < cfg.emb_dim; ++i)
        CHECK(m1.data()[i] == Approx(m2.data()[i]).margin(1e-14));
}

TEST_CASE("batched forward equals per-user forward", "[model]") {
    auto cfg = tiny_config();
    auto p = init_params(cfg, 15);
    UserSequence u1{"a", 0, {make_post({2, 3}, 6)}};
    UserSequence u2{"b", 1, {make_post({4, 5, 6}, 6), make_post({7, 8}, 6)}};
    std::vector<const UserSequence *> both{&u1, &u2};
    auto batch = forward_batch(p, cfg, both);
    auto single = forward(p, cfg, u2);
    for (std::size_t c = 0; c < cfg.emb_dim; ++c)
        CHECK(batch.embedding.at(1, c) == Approx(single.embedding.at(0, c)).margin(1e-13));
}
