#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "oracles.hpp"

#include "gist/mask.hpp"
#include "gist/model.hpp"
#include "gist/segmenter.hpp"
#include "gist/tokenizer.hpp"

using namespace gist;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::uint32_t vocab, std::uint32_t n_g, PosEncoding pe = PosEncoding::Rotary) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = vocab;
    c.n_g = n_g;
    c.max_seq_len = 128;
    c.pos_encoding = pe;
    c.init_std = 0.1;
    return c;
}

// Three closed sentences over a 60-id vocab: ids 0..56 regular, 57 ".", 58-59 gists.
TrainSequence three_sentences(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    AnnotatedSequence a;
    a.n_g = 2;
    std::uniform_int_distribution<TokenId> tok(0, 56);
    for (std::uint32_t s = 0; s < 3; ++s) {
        for (int i = 0; i < 4; ++i) {
            a.ids.push_back(tok(rng));
            a.roles.push_back(kRegular);
            a.sent_idx.push_back(s);
        }
        a.ids.push_back(57);
        a.roles.push_back(kRegular);
        a.sent_idx.push_back(s);
        for (Role k = 1; k <= 2; ++k) {
            a.ids.push_back(57 + k);
            a.roles.push_back(k);
            a.sent_idx.push_back(s);
        }
    }
    return {a, build_mask(a)};
}

AnnotatedSequence plain(std::vector<TokenId> ids) {
    AnnotatedSequence a;
    a.ids = std::move(ids);
    a.roles.assign(a.ids.size(), kRegular);
    a.sent_idx.assign(a.ids.size(), 0);
    a.open_tail = true;
    return a;
}

double max_rel_error(const ModelParams<double>& a, const ModelParams<double>& b, double floor) {
    std::vector<const std::vector<double>*> bt;
    b.visit([&](const std::string&, const std::vector<double>& t, const auto&) { bt.push_back(&t); });
    double worst = 0;
    std::size_t i = 0;
    a.visit([&](const std::string&, const std::vector<double>& t, const auto&) {
        const auto& u = *bt[i++];
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double den = std::max({std::abs(t[j]), std::abs(u[j]), floor});
            worst = std::max(worst, std::abs(t[j] - u[j]) / den);
        }
    });
    return worst;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace

TEST_CASE("analytic gradient matches central finite differences") {
    for (auto pe : {PosEncoding::Rotary, PosEncoding::Learned}) {
        auto p = init_params<double>(tiny_config(60, 2, pe), 7);
        // Unit-scale input rows keep the RMSNorm Jacobian well conditioned
        // for a step of 1e-3.
        for (auto& x : p.embedding) x *= 10;
        for (auto& x : p.pos_embedding) x *= 10;
        std::vector<TrainSequence> batch{three_sentences(1), three_sentences(2)};
        for (auto mode : {LossMode::All, LossMode::RegularOnly, LossMode::FinalGist}) {
            auto g = grad<double>(p, batch, mode);
            auto fd = testing::finite_difference_grad(
                p, [&](const ModelParams<double>& q) { return batch_loss<double>(q, batch, mode); }, 1e-3);
            CHECK(max_rel_error(g.grad, fd, 1e-3) < 1e-4);
        }
    }
}

TEST_CASE("causal forward matches the reference implementation") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<TokenId> tok(0, 59);
    for (auto pe : {PosEncoding::Rotary, PosEncoding::Learned}) {
        auto pd = init_params<double>(tiny_config(60, 0, pe), 11);
        auto pf = pd.cast<float>();
        std::vector<TokenId> ids(40);
        for (auto& t : ids) t = tok(rng);
        auto causal = [](std::size_t q, std::size_t k) { return k <= q; };

        auto outf = forward<float>(pf, ids, causal_mask(40));
        CHECK(max_abs_diff(outf.logits, testing::reference_logits(pf, ids, causal)) < 1e-6);
        auto outd = forward<double>(pd, ids, causal_mask(40));
        CHECK(max_abs_diff(outd.logits, testing::reference_logits(pd, ids, causal)) < 1e-12);

        // A one-sentence sequence under the sentence mask is the causal model.
        auto a = plain(ids);
        auto outm = forward<float>(pf, a, build_mask(a));
        CHECK(outm.logits == outf.logits);
    }
}

TEST_CASE("sentence-masked forward matches the reference with the predicate") {
    auto p = init_params<double>(tiny_config(60, 2), 5);
    auto ts = three_sentences(9);
    auto out = forward<double>(p, ts.seq, ts.mask);
    auto ref = testing::reference_logits(
        p, ts.seq.ids, [&](std::size_t q, std::size_t k) { return testing::mask_predicate(ts.seq, q, k); });
    CHECK(max_abs_diff(out.logits, ref) < 1e-12);
}

TEST_CASE("single position logits are the context-free head output") {
    auto p = init_params<float>(tiny_config(60, 0), 2);
    std::vector<TokenId> ids{17};
    auto out = forward<float>(p, ids, causal_mask(1));
    CHECK(out.length == 1);
    auto ref = testing::reference_logits(p, ids, [](std::size_t, std::size_t) { return true; });
    CHECK(max_abs_diff(out.logits, ref) < 1e-6);
}

TEST_CASE("logits do not depend on masked keys") {
    auto p = init_params<float>(tiny_config(60, 2), 4);
    auto ts = three_sentences(4);
    const auto& a = ts.seq;
    const std::uint32_t L = static_cast<std::uint32_t>(a.size());
    ForwardOptions<float> cap;
    cap.capture_kv = true;
    auto base = forward<float>(p, a, ts.mask, cap);

    // Replace the values of one position in every layer; only queries that
    // may attend to it can change.
    for (std::uint32_t k : {1u, 4u, 8u, 12u}) {
        KvOverride<float> ov;
        ov.positions = {k};
        ov.keys = base.keys;
        ov.values = base.values;
        for (auto& v : ov.values)
            for (std::uint32_t j = 0; j < p.config.d_model; ++j) v[k * p.config.d_model + j] += 3.0f;
        ForwardOptions<float> opts;
        opts.kv_override = &ov;
        auto out = forward<float>(p, a, ts.mask, opts);
        for (std::uint32_t q = 0; q < L; ++q) {
            bool reach = false;
            for (std::uint32_t j = 0; j <= q; ++j) reach = reach || (ts.mask.allowed(q, k) && j == k);
            // Later layers propagate through any position that saw k.
            for (std::uint32_t m = k; m <= q && !reach; ++m) reach = ts.mask.allowed(m, k) && ts.mask.allowed(q, m);
            if (reach) continue;
            auto r0 = base.row(q), r1 = out.row(q);
            CHECK(std::equal(r0.begin(), r0.end(), r1.begin()));
        }
    }
}

TEST_CASE("sentence-0 perturbation reaches later sentences only through gists") {
    auto p = init_params<float>(tiny_config(60, 2), 8);
    auto ts = three_sentences(12);
    const auto& a = ts.seq;
    const std::size_t d = p.config.d_model;
    ForwardOptions<float> cap;
    cap.capture_kv = true;
    auto base = forward<float>(p, a, ts.mask, cap);

    std::vector<float> delta(a.size() * d, 0.0f);
    for (std::size_t j = 0; j < d; ++j) delta[2 * d + j] = 0.5f;

    ForwardOptions<float> loose;
    loose.embedding_delta = &delta;
    auto moved = forward<float>(p, a, ts.mask, loose);

    KvOverride<float> ov;
    ov.positions = {5, 6};
    ov.keys = base.keys;
    ov.values = base.values;
    ForwardOptions<float> pinned = loose;
    pinned.kv_override = &ov;
    auto fixed = forward<float>(p, a, ts.mask, pinned);

    bool changed = false;
    for (std::uint32_t t = 0; t < a.size(); ++t) {
        if (a.sent_idx[t] < 1) continue;
        auto r0 = base.row(t), r1 = moved.row(t), r2 = fixed.row(t);
        changed = changed || !std::equal(r0.begin(), r0.end(), r1.begin());
        CHECK(std::equal(r0.begin(), r0.end(), r2.begin()));
    }
    CHECK(changed);
}

TEST_CASE("attention probabilities sum to one") {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n(0, 3);
    const std::uint32_t hd = 8;
    std::vector<float> q(hd), kv(10 * hd);
    for (auto& x : q) x = n(rng);
    for (auto& x : kv) x = n(rng);
    std::vector<const float*> rows;
    for (int i = 0; i < 10; ++i) rows.push_back(kv.data() + i * hd);
    std::vector<float> probs(10), ctx(hd);
    attend_head<float>(q.data(), rows, rows, 0, hd, probs.data(), ctx.data());
    float s = 0;
    for (auto p : probs) s += p;
    CHECK(std::abs(s - 1.0f) < 1e-5f);

    auto p = init_params<float>(tiny_config(60, 2), 3);
    auto ts = three_sentences(3);
    auto out = forward<float>(p, ts.seq, ts.mask);
    for (std::uint32_t t = 0; t < out.length; ++t) {
        auto r = out.row(t);
        const float mx = *std::max_element(r.begin(), r.end());
        double z = 0;
        for (auto x : r) z += std::exp(double(x - mx));
        double total = 0;
        for (auto x : r) total += std::exp(double(x - mx)) / z;
        CHECK(std::abs(total - 1.0) < 1e-5);
    }
}

TEST_CASE("loss modes and their errors") {
    auto p = ModelParams<float>::zeros(tiny_config(60, 2));
    auto ts = three_sentences(5);
    auto out = forward<float>(p, ts.seq, ts.mask);
    for (auto mode : {LossMode::All, LossMode::RegularOnly, LossMode::FinalGist}) {
        auto l = lm_loss(out, ts.seq, mode);
        CHECK(l.loss == doctest::Approx(std::log(60.0)).epsilon(1e-9));
    }
    // 21 positions: 20 predictions, 6 of them from gists, 3 of those final.
    CHECK(lm_loss(out, ts.seq, LossMode::All).count == 20);
    CHECK(lm_loss(out, ts.seq, LossMode::RegularOnly).count == 15);
    CHECK(lm_loss(out, ts.seq, LossMode::FinalGist).count == 17);

    auto one = prefix(ts.seq, 1);
    auto o1 = forward<float>(p, one, build_mask(one));
    CHECK_THROWS_WITH(lm_loss(o1, one, LossMode::All), "nothing to predict");
    CHECK(loss_mode_from_string("regular_only") == LossMode::RegularOnly);
    CHECK(to_string(LossMode::FinalGist) == "final_gist");
}

TEST_CASE("forward rejects bad input") {
    auto c = tiny_config(60, 0);
    c.max_seq_len = 8;
    auto p = init_params<float>(c, 1);
    std::vector<TokenId> long_ids(9, 1), ok{1, 2, 3}, bad{1, 60};
    CHECK_THROWS_AS(forward<float>(p, long_ids, causal_mask(9)), Error);
    CHECK_THROWS_AS(forward<float>(p, ok, causal_mask(4)), Error);
    CHECK_THROWS_AS(forward<float>(p, bad, causal_mask(2)), Error);
}

TEST_CASE("unused gist rows get no gradient through an untied model") {
    auto c = tiny_config(60, 2);
    c.tied_lm_head = false;
    auto p = init_params<double>(c, 6);
    // No punctuation, so no gist ever appears in the input.
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<TokenId> tok(0, 56);
    std::vector<TokenId> ids(30);
    for (auto& t : ids) t = tok(rng);
    auto a = plain(ids);
    std::vector<TrainSequence> batch{{a, build_mask(a)}};
    auto g = grad<double>(p, batch, LossMode::All);
    for (std::size_t i = c.gist_row_begin() * c.d_model; i < g.grad.embedding.size(); ++i)
        CHECK(g.grad.embedding[i] == 0.0);
}

TEST_CASE("gradient steps reduce the loss") {
    auto p = init_params<float>(tiny_config(60, 2), 10);
    std::vector<TrainSequence> batch;
    for (std::uint64_t s = 0; s < 10; ++s) batch.push_back(three_sentences(100 + s));
    const double before = batch_loss<float>(p, batch, LossMode::All);
    for (int step = 0; step < 50; ++step) {
        auto g = grad<float>(p, batch, LossMode::All);
        std::vector<std::vector<float>*> gt;
        g.grad.visit([&](const std::string&, std::vector<float>& t, const auto&) { gt.push_back(&t); });
        std::size_t i = 0;
        p.visit([&](const std::string&, std::vector<float>& t, const auto&) {
            auto& gv = *gt[i++];
            for (std::size_t j = 0; j < t.size(); ++j) t[j] -= 0.5f * gv[j];
        });
    }
    const double after = batch_loss<float>(p, batch, LossMode::All);
    MESSAGE("loss " << before << " -> " << after);
    CHECK(after < before - 0.5);
}

TEST_CASE("grad rejects an empty batch") {
    auto p = init_params<float>(tiny_config(60, 2), 1);
    std::vector<TrainSequence> none;
    CHECK_THROWS_AS(grad<float>(p, none, LossMode::All), Error);
}

TEST_CASE("mean-resizing") {
    SUBCASE("degenerate covariance collapses onto the shared row") {
        const std::size_t rows = 20, dim = 16;
        std::vector<float> e(rows * dim);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < dim; ++j) e[i * dim + j] = 0.25f * float(j) - 1.0f;
        auto out = extend_vocab_mean_resize(e, rows, dim, 8, 1e-6, 3);
        REQUIRE(out.size() == (rows + 8) * dim);
        for (std::size_t r = rows; r < rows + 8; ++r)
            for (std::size_t j = 0; j < dim; ++j) CHECK(std::abs(out[r * dim + j] - e[j]) < 5e-3);
        CHECK_THROWS_WITH(extend_vocab_mean_resize(e, rows, dim, 8, 0.0, 3), "covariance not PD; set eps>0");
    }
    SUBCASE("sample mean converges to the row mean") {
        const std::size_t rows = 50, dim = 8, n = 10000;
        std::mt19937_64 rng(4);
        std::normal_distribution<float> nd(0.0f, 1.0f);
        std::vector<float> e(rows * dim);
        for (auto& x : e) x = nd(rng);
        auto out = extend_vocab_mean_resize(e, rows, dim, n, 1e-6, 9);

        std::vector<double> mu(dim, 0), var(dim, 0), mean(dim, 0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < dim; ++j) mu[j] += e[i * dim + j] / double(rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < dim; ++j) var[j] += std::pow(e[i * dim + j] - mu[j], 2) / double(rows - 1);
        for (std::size_t i = rows; i < rows + n; ++i)
            for (std::size_t j = 0; j < dim; ++j) mean[j] += out[i * dim + j] / double(n);
        double trace = 0, dist2 = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            CHECK(std::abs(mean[j] - mu[j]) < 3 * std::sqrt((var[j] + 1e-6) / double(n)));
            trace += var[j] + 1e-6;
            dist2 += std::pow(mean[j] - mu[j], 2);
        }
        CHECK(std::sqrt(dist2) < 3 * std::sqrt(trace / double(n)));
        CHECK(std::equal(e.begin(), e.end(), out.begin()));
    }
    SUBCASE("extension keeps every base tensor and is seeded") {
        for (bool tied : {true, false}) {
            auto c = tiny_config(57, 0);
            c.tied_lm_head = tied;
            auto base = init_params<float>(c, 1);
            auto ext = extend_with_gists(base, 3, 1e-6, 7);
            CHECK(ext.config.vocab_size == 60);
            CHECK(ext.config.n_g == 3);
            CHECK(std::equal(base.embedding.begin(), base.embedding.end(), ext.embedding.begin()));
            CHECK(ext.layers[1].w2 == base.layers[1].w2);
            CHECK(extend_with_gists(base, 3, 1e-6, 7).embedding == ext.embedding);
            CHECK(extend_with_gists(base, 3, 1e-6, 8).embedding != ext.embedding);
            if (!tied) {
                CHECK(ext.lm_head.size() == 60 * 16);
                CHECK(!std::equal(ext.lm_head.begin() + 57 * 16, ext.lm_head.end(), ext.embedding.begin() + 57 * 16));
            }
        }
    }
    SUBCASE("preconditions") {
        std::vector<float> one(4, 1.0f);
        CHECK_THROWS_AS(extend_vocab_mean_resize(one, 1, 4, 1, 1e-6, 0), Error);
        std::vector<float> two(8, 1.0f);
        CHECK_THROWS_AS(extend_vocab_mean_resize(two, 2, 4, 1, -1.0, 0), Error);
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    const fs::path dir = fs::temp_directory_path() / "gist_test_ckpt";
    fs::remove_all(dir);
    for (auto pe : {PosEncoding::Rotary, PosEncoding::Learned}) {
        auto c = tiny_config(60, 2, pe);
        c.tied_lm_head = pe == PosEncoding::Rotary;
        auto p = init_params<float>(c, 21);
        CheckpointMeta meta;
        meta.extra = {{"config_hash", "abc"}};
        save_checkpoint(dir / "model", p, meta);
        CheckpointMeta back;
        auto q = load_checkpoint(dir, &back);
        CHECK(back.extra == meta.extra);
        CHECK(q.config.to_json() == c.to_json());
        std::vector<const std::vector<float>*> qt;
        q.visit([&](const std::string&, const std::vector<float>& t, const auto&) { qt.push_back(&t); });
        std::size_t i = 0;
        p.visit([&](const std::string&, const std::vector<float>& t, const auto&) { CHECK(t == *qt[i++]); });
        CHECK(checkpoint_stem(dir / "model.json") == dir / "model");
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), Error);
    fs::remove_all(dir);
}

TEST_CASE("config json round trip and validation") {
    auto c = tiny_config(60, 2, PosEncoding::Learned);
    CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
}
