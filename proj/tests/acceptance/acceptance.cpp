// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.

#include "gradcheck.hpp"

#include <robad/robad.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

using namespace robad;
using Inputs = std::vector<Tensor>;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int id, const char *name, bool ok, const std::string &detail) {
    std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char *f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

Tensor probe(const Tensor &y) {
    std::vector<double> w(y.numel());
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = 0.25 + 0.13 * static_cast<double>(i % 5) - 0.07 * static_cast<double>(i % 3);
    return sum(mul(y, Tensor(y.shape(), w)));
}

/// Default experiment settings: emb 32, 2 heads, one encoder and one
/// decoder layer, at most 30 epochs with patience 5.
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.train.model.emb_dim = 32;
    cfg.train.model.heads = 2;
    cfg.train.model.enc_layers = 1;
    cfg.train.model.dec_layers = 1;
    cfg.train.epochs = 30;
    cfg.train.early_stop_patience = 5;
    return cfg;
}

// ─── 1 ──────────────────────────────────────────────────────────────────────

void gradient_suite() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    auto r = [&](Shape s, double lo = -1, double hi = 1) {
        return gradcheck::random_tensor(std::move(s), rng, lo, hi);
    };
    double worst = 0;
    std::size_t checked = 0, cases = 0;
    auto run = [&](const std::function<Tensor(const Inputs &)> &f, Inputs in,
                   std::size_t stride = 1) {
        auto res = gradcheck::check(f, std::move(in), 1e-5, stride);
        worst = std::max(worst, res.max_rel_error);
        checked += res.checked;
        ++cases;
    };
    auto away_from = [](Tensor t, double kink) {
        for (auto &v : t.mutable_data())
            if (std::abs(v - kink) < 0.05)
                v = kink + 0.2;
        return t;
    };

    auto a = r({3, 4}), b = r({4, 5}), c = r({3, 4});
    run([](const Inputs &x) { return probe(matmul(x[0], x[1])); }, {a, b});
    run([](const Inputs &x) { return probe(transpose(x[0])); }, {a});
    run([](const Inputs &x) { return probe(add(x[0], x[1])); }, {a, c});
    run([](const Inputs &x) { return probe(sub(x[0], x[1])); }, {a, c});
    run([](const Inputs &x) { return probe(mul(x[0], x[1])); }, {a, c});
    run([](const Inputs &x) { return probe(affine(x[0], 1.3, -0.2)); }, {a});
    run([](const Inputs &x) { return probe(add_row(x[0], x[1])); }, {a, r({4})});
    run([](const Inputs &x) { return sum(x[0]); }, {a});
    run([](const Inputs &x) { return mean(x[0]); }, {a});
    run([](const Inputs &x) { return probe(mean_axis(x[0], 0)); }, {a});
    run([](const Inputs &x) { return probe(mean_axis(x[0], 1)); }, {a});
    run([](const Inputs &x) { return probe(relu(x[0])); }, {away_from(r({3, 5}), 0.0)});
    run([](const Inputs &x) { return probe(log(x[0])); }, {r({3, 3}, 0.2, 2.0)});
    run([](const Inputs &x) { return probe(clamp(x[0], -0.5, 0.5)); },
        {away_from(away_from(r({3, 3}), 0.5), -0.5)});
    const Mask keep{1, 0, 1, 1, 1, 1, 0, 1, 0, 0, 1, 1};
    run([](const Inputs &x) { return probe(softmax_lastdim(x[0])); }, {a});
    run([&](const Inputs &x) { return probe(masked_softmax(x[0], keep)); }, {a});
    run([&](const Inputs &x) { return probe(masked_logsumexp(x[0], keep)); }, {a});
    run([](const Inputs &x) { return probe(layer_norm(x[0], x[1], x[2])); },
        {r({3, 5}), r({5}), r({5})});
    run([](const Inputs &x) { return cosine_sim(x[0], x[1]); }, {r({5}), r({5})});
    run([](const Inputs &x) { return probe(l2_normalize_rows(x[0])); }, {a});
    std::vector<std::size_t> ids{3, 0, 3, 1}, cols{3, 0, 2, 2, 1};
    std::vector<Segment> segs{{0, 2}, {2, 3}};
    auto t5 = r({5, 4});
    run([&](const Inputs &x) { return probe(embedding_rows(x[0], ids)); }, {t5});
    run([](const Inputs &x) { return probe(slice_cols(x[0], 1, 2)); }, {t5});
    run([](const Inputs &x) { return probe(slice_rows(x[0], 1, 3)); }, {t5});
    run([](const Inputs &x) { return probe(concat_rows(x[0], x[1])); }, {t5, r({2, 4})});
    run([&](const Inputs &x) { return probe(pick(x[0], cols)); }, {t5});
    run([&](const Inputs &x) { return probe(segment_mean(x[0], segs)); }, {t5});
    run([](const Inputs &x) { return probe(reshape(x[0], {4, 5})); }, {t5});
    run(
        [](const Inputs &x) {
            Rng d(7);
            return probe(dropout(x[0], 0.25, d));
        },
        {t5});
    for (bool causal : {false, true}) {
        AttentionOptions opt;
        opt.heads = 2;
        opt.causal = causal;
        run([&](const Inputs &x) {
            return probe(segmented_attention(x[0], x[1], x[2], segs, opt));
        },
            {t5, r({5, 4}), r({5, 4})});
    }
    run([](const Inputs &x) { return cross_entropy(softmax_lastdim(x[0]), {1, 0, 1}); },
        {r({3, 2})});
    run([](const Inputs &x) { return info_nce(x[0], x[1], 0.5); }, {r({3, 4}), r({3, 4})});

    // full objective on the tiny model
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.tokens_per_post = 4;
    cfg.window = 3;
    cfg.emb_dim = 8;
    cfg.heads = 2;
    auto params = init_params(cfg, 5);
    std::vector<UserSequence> users;
    for (int u = 0; u < 3; ++u) {
        UserSequence s{"u" + std::to_string(u), u % 2, {}};
        for (int p = 0; p <= u; ++p) {
            Post post{std::vector<std::int32_t>(4, kPadId), Mask(4, 0)};
            for (int i = 0; i < 2 + (u + p) % 3; ++i) {
                post.ids[static_cast<std::size_t>(i)] = 2 + (5 * u + 3 * p + i) % 18;
                post.mask[static_cast<std::size_t>(i)] = 1;
            }
            s.posts.push_back(post);
        }
        users.push_back(s);
    }
    std::vector<UserSequence> attacked;
    for (const auto &u : users)
        attacked.push_back(attack_user({AttackKind::foreign_post, 1, 2, 4}, u, users, 3, 4));
    std::vector<const UserSequence *> both;
    for (const auto &u : users)
        both.push_back(&u);
    for (const auto &u : attacked)
        both.push_back(&u);
    std::size_t model_checked = checked;
    run(
        [&](const Inputs &) {
            auto fr = forward_batch(params, cfg, both);
            return adversarial_objective(slice_rows(fr.probs, 0, 3), slice_rows(fr.probs, 3, 3),
                                         {1, 0, 1}, slice_rows(fr.z, 0, 3), slice_rows(fr.z, 3, 3),
                                         0.3, 1.0)
                .total;
        },
        params.list(), 3);
    model_checked = checked - model_checked;
    const double secs = seconds_since(t0);
    report(1, "gradient suite", worst < 1e-3 && secs < 60 && model_checked >= 50,
           std::to_string(cases) + " cases, " + std::to_string(checked) + " scalars (" +
               std::to_string(model_checked) + " model params), " +
               fmt("max rel error %.2e, %.1f s", worst, secs));
}

// ─── 2 ──────────────────────────────────────────────────────────────────────

void loss_oracles() {
    auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    auto same = Tensor::matrix(2, 2, {1, 1, 1, 1});
    const double l1 = info_nce(eye, eye).item(), l2 = info_nce(same, same).item();
    const double ce = cross_entropy(Tensor::matrix(1, 2, {0.5, 0.5}), {1}).item();
    const double e1 = std::abs(l1 - std::log(1 + 2 / std::exp(1.0)));
    const double e2 = std::abs(l2 - std::log(3.0));
    const double e3 = std::abs(ce - std::log(2.0));
    const bool endpoints = total_loss(0.8, 0.3, 0.0) == 0.8 && total_loss(0.8, 0.3, 1.0) == 0.3;
    report(2, "loss oracles", e1 <= 1e-9 && e2 <= 1e-9 && e3 <= 1e-12 && endpoints,
           fmt("infonce %.9f (ln(1+2/e)), %.9f (ln 3), ce %.12f (ln 2)", l1, l2, ce) +
               (endpoints ? ", total_loss endpoints exact" : ", total_loss endpoints WRONG"));
}

// ─── 3 ──────────────────────────────────────────────────────────────────────

void relative_drop_arithmetic() {
    const double d1 = relative_drop_pct(0.708, 0.700), d2 = relative_drop_pct(0.683, 0.661);
    report(3, "relative drop arithmetic",
           std::abs(d1 - 1.129) <= 1e-3 && std::abs(d2 - 3.221) <= 1e-3,
           fmt("%.4f%% (printed 1.129), %.4f%% (printed 3.221)", d1, d2));
}

// ─── 4 ──────────────────────────────────────────────────────────────────────

void synthetic_classification(const std::vector<RawUser> &corpus) {
    const auto t0 = Clock::now();
    auto cfg = tiny_config();
    cfg.attacks = {};
    const auto cv = cross_validate(cfg, corpus);
    const double secs = seconds_since(t0);
    report(4, "synthetic classification", cv.report.f1 >= 0.90 && secs <= 600,
           fmt("5-fold mean F1 %.4f (P %.4f, R %.4f), %.1f s", cv.report.f1, cv.report.precision,
               cv.report.recall, secs));
}

// ─── 5 and 6 ────────────────────────────────────────────────────────────────

void robustness_and_ablation(const std::vector<RawUser> &corpus) {
    constexpr int kSeeds = 5;
    const auto t0 = Clock::now();
    auto cfg = tiny_config();
    cfg.attacks = {AttackKind::foreign_post};
    // The mimicked attacker imitates the threat being evaluated.
    cfg.train.train_attack.kind = AttackKind::foreign_post;
    const std::string key = to_string(AttackKind::foreign_post);

    double drop_full = 0, drop_clean = 0;
    int full_not_worse = 0;
    double f1_sum[3] = {0, 0, 0};
    std::ostringstream per_seed;
    for (int s = 0; s < kSeeds; ++s) {
        cfg.train.seed = static_cast<std::uint64_t>(s);
        cfg.train.train_attack.seed = static_cast<std::uint64_t>(s);
        cfg.attack_seed = static_cast<std::uint64_t>(100 + s);
        const auto rows = ablate(cfg, corpus);
        const auto &full = rows[0].report, &clean = rows[2].report;
        drop_full += full.relative_drop_pct.at(key) / kSeeds;
        drop_clean += clean.relative_drop_pct.at(key) / kSeeds;
        full_not_worse += full.f1_after_attack.at(key) >= clean.f1_after_attack.at(key);
        for (int v = 0; v < 3; ++v)
            f1_sum[v] += rows[static_cast<std::size_t>(v)].report.f1 / kSeeds;
        per_seed << (s ? "; " : "")
                 << fmt("seed %.0f after %.3f vs %.3f", s, full.f1_after_attack.at(key),
                        clean.f1_after_attack.at(key));
        std::fprintf(stderr, "seed %d done after %.0f s\n", s, seconds_since(t0));
    }
    report(5, "robustness ordering", drop_full <= drop_clean && full_not_worse >= 4,
           fmt("mean drop full %.2f%% vs no_adversary_aware %.2f%%, full post-attack F1 not worse "
               "in %.0f/5 seeds",
               drop_full, drop_clean, full_not_worse) +
               " (" + per_seed.str() + ")");
    report(6, "ablation ordering", f1_sum[0] >= f1_sum[1] && f1_sum[0] >= f1_sum[2],
           fmt("mean F1 full %.4f, no_local_global %.4f, no_adversary_aware %.4f", f1_sum[0],
               f1_sum[1], f1_sum[2]) +
               fmt(", %.0f s", seconds_since(t0)));
}

// ─── 7 ──────────────────────────────────────────────────────────────────────

void determinism_and_formats(const std::vector<RawUser> &corpus) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "robad_acceptance";
    fs::create_directories(dir);

    auto cfg = tiny_config();
    cfg.train.epochs = 2;
    cfg.attacks = {AttackKind::copy_append, AttackKind::ngram_gen};
    const auto a = cross_validate(cfg, corpus).report.to_json().dump(2);
    const auto b = cross_validate(cfg, corpus).report.to_json().dump(2);
    const bool same_metrics = a == b;

    ModelConfig mc = cfg.train.model;
    mc.vocab_size = 300;
    const auto params = init_params(mc, 9);
    const auto ckpt = (dir / "roundtrip.ckpt").string();
    save_checkpoint(params, mc, ckpt);
    const auto loaded = load_checkpoint(ckpt, mc);
    double worst = 0;
    auto pa = params.list(), pb = loaded.list();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pa[i].numel(); ++j) {
            const double x = pa[i].data()[j], y = pb[i].data()[j];
            worst = std::max(worst, x == 0 ? std::abs(y) : std::abs(x - y) / std::abs(x));
        }

    const auto corpus_path = (dir / "corpus.jsonl").string();
    save_corpus(corpus_path, corpus);
    const bool corpus_ok = load_corpus(corpus_path) == corpus;
    fs::remove_all(dir);

    report(7, "determinism and formats",
           same_metrics && worst <= std::ldexp(1.0, -20) && corpus_ok,
           std::string(same_metrics ? "metrics identical" : "metrics DIFFER") +
               fmt(", checkpoint max rel error %.2e", worst) +
               (corpus_ok ? ", corpus round-trip lossless" : ", corpus round-trip LOSSY"));
}

// ─── 8 ──────────────────────────────────────────────────────────────────────

void masking_and_causality() {
    ModelConfig cfg;
    cfg.vocab_size = 40;
    cfg.tokens_per_post = 10;
    cfg.window = 20;
    cfg.emb_dim = 16;
    cfg.heads = 2;
    cfg.dec_layers = 2;
    const auto params = init_params(cfg, 17);

    // padding invariance: same tokens, extra masked slots holding junk ids
    double drift = 0;
    for (std::size_t len = 1; len <= 6; ++len) {
        std::vector<std::int32_t> ids, padded(cfg.tokens_per_post, 0);
        Mask m(len, 1), pm(cfg.tokens_per_post, 0);
        for (std::size_t i = 0; i < len; ++i) {
            ids.push_back(static_cast<std::int32_t>(2 + (7 * i + len) % 38));
            padded[i] = ids.back();
            pm[i] = 1;
        }
        for (std::size_t i = len; i < cfg.tokens_per_post; ++i)
            padded[i] = static_cast<std::int32_t>(3 + i);
        auto x = encode_post(params, cfg, ids, m), y = encode_post(params, cfg, padded, pm);
        for (std::size_t c = 0; c < cfg.emb_dim; ++c)
            drift = std::max(drift, std::abs(x.at(c) - y.at(c)));
    }

    // causal mask: every decoder layer and head
    UserSequence user{"u", 1, {}};
    for (int p = 0; p < 7; ++p) {
        Post post{std::vector<std::int32_t>(cfg.tokens_per_post, kPadId),
                  Mask(cfg.tokens_per_post, 0)};
        for (int i = 0; i < 3 + p % 4; ++i) {
            post.ids[static_cast<std::size_t>(i)] = 2 + (11 * p + 5 * i) % 38;
            post.mask[static_cast<std::size_t>(i)] = 1;
        }
        user.posts.push_back(post);
    }
    std::vector<AttentionTrace> trace;
    ForwardOptions opt;
    opt.decoder_trace = &trace;
    forward(params, cfg, user, opt);
    std::size_t above = 0, nonzero_above = 0;
    for (const auto &t : trace)
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const auto &w = t.at(0, h);
            const std::size_t n = t.lengths[0];
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i + 1; j < n; ++j) {
                    ++above;
                    nonzero_above += w[i * n + j] != 0.0;
                }
        }

    // window arithmetic
    bool window_ok = true;
    std::string lengths;
    for (std::size_t len : {5u, 19u, 20u}) {
        UserSequence u{"v", 0, {}};
        for (std::size_t p = 0; p < len; ++p) {
            Post post{std::vector<std::int32_t>(cfg.tokens_per_post, kPadId),
                      Mask(cfg.tokens_per_post, 0)};
            post.ids[0] = static_cast<std::int32_t>(2 + p);
            post.mask[0] = 1;
            u.posts.push_back(post);
        }
        auto out = apply_attack(u, {39}, cfg.window, cfg.tokens_per_post);
        const std::size_t expect = std::min<std::size_t>(len + 1, 20);
        const std::size_t dropped = len + 1 - expect;
        bool ok = out.posts.size() == expect && out.posts.back().valid_ids() ==
                                                    std::vector<std::int32_t>{39};
        for (std::size_t i = 0; ok && i + 1 < expect; ++i)
            ok = out.posts[i] == u.posts[i + dropped];
        window_ok = window_ok && ok;
        lengths += (lengths.empty() ? "" : ", ") + std::to_string(len) + "->" +
                   std::to_string(out.posts.size());
    }
    report(8, "masking and causality",
           drift <= 1e-10 && above > 0 && nonzero_above == 0 && window_ok,
           fmt("padding drift %.1e, %.0f/%.0f weights above the diagonal nonzero", drift,
               static_cast<double>(nonzero_above), static_cast<double>(above)) +
               ", window " + lengths);
}

} // namespace

int main() {
    const auto t0 = Clock::now();
    const auto corpus = gen_synthetic(200, 0.9, 7);
    gradient_suite();
    loss_oracles();
    relative_drop_arithmetic();
    synthetic_classification(corpus);
    robustness_and_ablation(corpus);
    determinism_and_formats(corpus);
    masking_and_causality();
    std::printf("%d of 8 criteria failed, %.0f s total\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
