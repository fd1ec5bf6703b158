#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "doctest.h"

#include "gist/synthetic.hpp"
#include "gist/trainer.hpp"

using namespace gist;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

StageConfig stage(StageName name, std::uint64_t tokens, std::uint32_t batch = 4, std::uint32_t seq = 64) {
    StageConfig s;
    s.name = name;
    s.token_budget = tokens;
    s.batch_size = batch;
    s.max_seq_len = seq;
    s.max_lr = 3e-3;
    s.min_lr = 3e-4;
    s.warmup_steps = 2;
    s.freeze = name == StageName::WarmupGist ? FreezeSet::AllButGistRows : FreezeSet::None;
    if (name == StageName::ColdDown) {
        s.schedule = Schedule::Linear;
        s.min_lr = 0;
    }
    return s;
}

struct Toy {
    Vocab base;
    Vocab vocab;
    std::vector<std::vector<TokenId>> docs;
};

Toy toy_corpus(std::uint32_t n_g, std::uint32_t documents = 40) {
    SyntheticCorpusConfig sc;
    sc.documents = documents;
    sc.episodes_per_document = 6;
    sc.words_per_sentence = 4;
    sc.lexicon_size = 8;
    sc.seed = 3;
    auto texts = generate_synthetic_corpus(sc);
    Toy t{build_vocab(texts, TokenizerScheme::Word), {}, {}};
    t.vocab = t.base.with_gists(n_g);
    for (const auto& s : texts) t.docs.push_back(t.base.encode(s));
    return t;
}

ModelConfig toy_model_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 64;
    return c;
}

TrainState toy_state(const Toy& t, std::uint32_t n_g, bool tied = true) {
    auto c = toy_model_config();
    c.vocab_size = static_cast<std::uint32_t>(t.base.size());
    c.tied_lm_head = tied;
    TrainState st;
    st.params = extend_with_gists(init_params<float>(c, 1), n_g, 1e-6, 2);
    st.seed = 9;
    return st;
}

StageData toy_data(const Toy& t, std::uint32_t n_g) {
    return {build_sequences(t.docs, t.vocab, n_g, 64), n_g, hex64(t.vocab.hash())};
}

PipelineConfig toy_pipeline(std::uint32_t n_g) {
    PipelineConfig pc;
    pc.seed = 5;
    pc.n_g = n_g;
    pc.scheme = TokenizerScheme::Word;
    pc.model = toy_model_config();
    pc.base = stage(StageName::Base, 30000);
    pc.stages = {stage(StageName::WarmupGist, 3000), stage(StageName::Finetune, 20000),
                 stage(StageName::ColdDown, 8000, 8)};
    return pc;
}

bool same_tensors(const ModelParams<float>& a, const ModelParams<float>& b) {
    std::vector<const std::vector<float>*> bt;
    b.visit([&](const std::string&, const std::vector<float>& t, const auto&) { bt.push_back(&t); });
    std::size_t i = 0;
    bool same = true;
    a.visit([&](const std::string&, const std::vector<float>& t, const auto&) { same = same && t == *bt[i++]; });
    return same;
}

}  // namespace

TEST_CASE("learning rate schedule") {
    StageConfig s;
    s.token_budget = 1000 * 64;
    s.batch_size = 1;
    s.max_seq_len = 64;
    s.max_lr = 1e-4;
    s.min_lr = 5e-5;
    s.warmup_steps = 100;
    REQUIRE(s.total_steps() == 1000);
    CHECK(lr_at(s, 0) == 0.0);
    CHECK(lr_at(s, 50) == doctest::Approx(5e-5));
    CHECK(lr_at(s, 100) == doctest::Approx(1e-4));
    // Decay spans steps 100..999; its midpoint is 549.5.
    CHECK((lr_at(s, 549) + lr_at(s, 550)) / 2 == doctest::Approx(7.5e-5).epsilon(1e-6));
    CHECK(lr_at(s, 999) == doctest::Approx(5e-5));

    // Stage 3 shape: linear to zero.
    s.schedule = Schedule::Linear;
    s.max_lr = 5e-5;
    s.min_lr = 0;
    s.warmup_steps = 100;
    CHECK(lr_at(s, 999) == 0.0);
    CHECK(lr_at(s, 100) == doctest::Approx(5e-5));
}

TEST_CASE("step count and validation") {
    StageConfig s = stage(StageName::Finetune, 1001, 2, 10);
    CHECK(s.total_steps() == 51);
    s.token_budget = 1000;
    CHECK(s.total_steps() == 50);
    s.token_budget = 0;
    CHECK(s.total_steps() == 0);

    s.freeze = FreezeSet::AllButGistRows;
    CHECK_THROWS_AS(s.validate(), Error);
    s.freeze = FreezeSet::None;
    s.min_lr = s.max_lr * 2;
    CHECK_THROWS_AS(s.validate(), Error);

    auto j = stage(StageName::WarmupGist, 10).to_json();
    j.erase("freeze");
    CHECK(StageConfig::from_json(j).freeze == FreezeSet::AllButGistRows);
    CHECK(StageConfig::from_json(j).to_json() == stage(StageName::WarmupGist, 10).to_json());
}

TEST_CASE("scaled table 5 stages pass validation") {
    // Token ratio 0.1 : 2 : 2, batches 64 : 128 : 512 divided by 64.
    const nlohmann::json cfg = {
        {"seed", 1},
        {"n_g", 2},
        {"model", {{"max_seq_len", 4096}}},
        {"stages",
         {{{"name", "warmup_gist"}, {"tokens", 100000}, {"batch_size", 1}, {"max_seq_len", 4096},
           {"max_lr", 1e-4}, {"min_lr", 5e-5}, {"warmup_steps", 100}, {"schedule", "cosine"},
           {"max_grad_norm", 1.0}, {"freeze", "all_but_gist_rows"}},
          {{"name", "finetune"}, {"tokens", 2000000}, {"batch_size", 2}, {"max_seq_len", 4096},
           {"max_lr", 1e-4}, {"min_lr", 5e-5}, {"warmup_steps", 1000}, {"schedule", "cosine"},
           {"max_grad_norm", 2.0}, {"freeze", "none"}},
          {{"name", "cold_down"}, {"tokens", 2000000}, {"batch_size", 8}, {"max_seq_len", 4096},
           {"max_lr", 5e-5}, {"min_lr", 0.0}, {"warmup_steps", 100}, {"schedule", "linear"},
           {"max_grad_norm", 2.0}, {"freeze", "none"}}}}};
    PipelineConfig pc;
    CHECK_NOTHROW(pc = PipelineConfig::from_json(cfg));
    REQUIRE(pc.stages.size() == 3);
    CHECK(pc.stages[0].adam.weight_decay == 0.1);
    CHECK(pc.stages[0].adam.beta2 == 0.95);
    CHECK(PipelineConfig::from_json(pc.to_json()).hash() == pc.hash());

    auto bad = cfg;
    std::swap(bad["stages"][0], bad["stages"][1]);
    CHECK_THROWS_AS(PipelineConfig::from_json(bad), Error);
}

TEST_CASE("stage-1 freeze leaves every non-gist coordinate untouched") {
    for (bool tied : {true, false}) {
        auto t = toy_corpus(2);
        auto st = toy_state(t, 2, tied);
        const auto before = st.params;
        auto s1 = stage(StageName::WarmupGist, 2 * 4 * 64);
        StageOptions so;
        so.expected_vocab_hash = hex64(t.vocab.hash());
        auto after = run_stage(st, s1, toy_data(t, 2), so);
        CHECK(after.log.size() == 2);
        CHECK(after.step == 2);

        const std::size_t gist_begin = std::size_t{before.config.gist_row_begin()} * before.config.d_model;
        std::vector<const std::vector<float>*> at;
        after.params.visit([&](const std::string&, const std::vector<float>& x, const auto&) { at.push_back(&x); });
        std::size_t i = 0;
        before.visit([&](const std::string& name, const std::vector<float>& x, const auto&) {
            const auto& y = *at[i++];
            if (name == "embedding" || name == "lm_head") {
                CHECK(std::equal(x.begin(), x.begin() + gist_begin, y.begin()));
                CHECK(!std::equal(x.begin() + gist_begin, x.end(), y.begin() + gist_begin));
            } else {
                CHECK(x == y);
            }
        });
    }
}

TEST_CASE("zero budget is a no-op") {
    auto t = toy_corpus(1);
    auto st = toy_state(t, 1);
    auto out = run_stage(st, stage(StageName::Finetune, 0), toy_data(t, 1));
    CHECK(out.step == 0);
    CHECK(out.log.empty());
    CHECK(same_tensors(out.params, st.params));
}

TEST_CASE("clipping bounds the recorded norm") {
    auto t = toy_corpus(1);
    auto s = stage(StageName::Finetune, 6 * 4 * 64);
    s.max_grad_norm = 0.05;
    auto out = run_stage(toy_state(t, 1), s, toy_data(t, 1));
    REQUIRE(out.log.size() == 6);
    bool clipped = false;
    for (const auto& r : out.log) {
        CHECK(r.grad_norm <= s.max_grad_norm + 1e-6);
        clipped = clipped || r.grad_norm_raw > s.max_grad_norm;
    }
    CHECK(clipped);
    for (std::size_t i = 1; i < out.log.size(); ++i) CHECK(out.log[i].tokens_seen > out.log[i - 1].tokens_seen);
}

TEST_CASE("stage input checks") {
    auto t = toy_corpus(2);
    auto st = toy_state(t, 2);
    StageOptions so;
    so.expected_vocab_hash = "0000000000000000";
    CHECK_THROWS_AS(run_stage(st, stage(StageName::Finetune, 256), toy_data(t, 2), so), Error);
    auto t1 = toy_corpus(1);
    CHECK_THROWS_AS(run_stage(st, stage(StageName::Finetune, 256), toy_data(t1, 1)), Error);
}

TEST_CASE("non-finite loss aborts with a snapshot") {
    auto t = toy_corpus(1);
    auto st = toy_state(t, 1);
    st.params.final_norm[0] = std::numeric_limits<float>::quiet_NaN();
    const fs::path dir = fs::temp_directory_path() / "gist_test_abort";
    fs::remove_all(dir);
    StageOptions so;
    so.snapshot_dir = dir;
    CHECK_THROWS_AS(run_stage(st, stage(StageName::Finetune, 256), toy_data(t, 1), so), Error);
    CheckpointMeta meta;
    load_checkpoint(dir / "model", &meta);
    CHECK(meta.extra.at("aborted_at_step") == 1);
    fs::remove_all(dir);
}

TEST_CASE("same seed gives the same log") {
    auto t = toy_corpus(2);
    auto s = stage(StageName::Finetune, 8 * 4 * 64);
    auto a = run_stage(toy_state(t, 2), s, toy_data(t, 2));
    auto b = run_stage(toy_state(t, 2), s, toy_data(t, 2));
    CHECK(metrics_csv(a.log) == metrics_csv(b.log));
    CHECK(same_tensors(a.params, b.params));
    CHECK(metrics_csv(a.log).starts_with("step,stage,lr,loss_all,loss_regular,grad_norm,tokens_seen\n1,finetune,"));
}

TEST_CASE("batch sampler") {
    BatchSampler s(10, 3, 7), s2(10, 3, 7);
    std::vector<std::size_t> seen;
    for (std::uint64_t step = 0; step < 10; ++step) {
        auto b = s.batch(step);
        CHECK(b == s2.batch(step));
        seen.insert(seen.end(), b.begin(), b.end());
    }
    // Three full epochs, each a permutation of the pool.
    for (int e = 0; e < 3; ++e) {
        std::set<std::size_t> epoch(seen.begin() + e * 10, seen.begin() + e * 10 + 10);
        CHECK(epoch.size() == 10);
    }
    CHECK(BatchSampler(10, 3, 8).batch(0) != BatchSampler(10, 3, 7).batch(0));
    CHECK_THROWS_AS(BatchSampler(0, 1, 1), Error);
}

TEST_CASE("training windows") {
    auto t = toy_corpus(2, 4);
    for (const auto& a : build_sequences(t.docs, t.vocab, 2, 64)) {
        CHECK(a.size() <= 64);
        CHECK(a.sent_idx.front() == 0);
        CHECK_NOTHROW(validate(a, t.vocab));
    }
    std::size_t total = 0;
    for (const auto& a : build_sequences(t.docs, t.base, 0, 64)) {
        CHECK(count_tokens(a).n_gist == 0);
        CHECK(a.sentence_count() == 1);
        total += a.size();
    }
    std::size_t raw = 0;
    for (const auto& d : t.docs) raw += d.size();
    CHECK(total == raw);
}

TEST_CASE("pipeline descends, checkpoints every boundary and resumes exactly") {
    auto t = toy_corpus(2, 700);
    std::size_t tokens = 0;
    for (const auto& d : t.docs) tokens += d.size();
    MESSAGE("corpus tokens: " << tokens);
    CHECK(tokens >= 50000);

    const auto pc = toy_pipeline(2);
    const fs::path root = fs::temp_directory_path() / "gist_test_pipeline";
    fs::remove_all(root);
    auto full = run_pipeline(pc, t.base, t.docs, std::nullopt, root / "full");

    auto last_loss = [&](const std::string& name) {
        double v = 0;
        for (const auto& r : full.log)
            if (r.stage == name) v = r.loss_all;
        return v;
    };
    MESSAGE("final losses: warmup " << last_loss("warmup_gist") << ", finetune " << last_loss("finetune"));
    CHECK(last_loss("finetune") < last_loss("warmup_gist"));

    for (const char* d : {"base", "stage0_init", "stage1_warmup_gist", "stage2_finetune", "stage3_cold_down", "final"}) {
        CHECK(fs::exists(root / "full" / d / "model.json"));
        CheckpointMeta meta;
        load_checkpoint(root / "full" / d / "model", &meta);
        CHECK(meta.extra.at("config_hash") == full.config_hash);
    }

    // Interrupted after the finetune stage, then resumed.
    PipelineOptions stop;
    stop.stop_after = 2;
    run_pipeline(pc, t.base, t.docs, std::nullopt, root / "split", stop);
    CHECK(!fs::exists(root / "split" / "final"));
    PipelineOptions resume;
    resume.resume = true;
    auto resumed = run_pipeline(pc, t.base, t.docs, std::nullopt, root / "split", resume);
    CHECK(slurp(root / "split" / "metrics.csv") == slurp(root / "full" / "metrics.csv"));
    CHECK(slurp(root / "split" / "final" / "model.bin") == slurp(root / "full" / "final" / "model.bin"));

    auto other = pc;
    other.seed = 6;
    CHECK_THROWS_WITH_AS(run_pipeline(other, t.base, t.docs, std::nullopt, root / "split", resume),
                         doctest::Contains("config hash mismatch on resume"), Error);
    fs::remove_all(root);
}

TEST_CASE("all-zero budgets return the extended model") {
    auto t = toy_corpus(1, 10);
    auto pc = toy_pipeline(4);
    pc.base.reset();
    for (auto& s : pc.stages) s.token_budget = 0;
    auto c = toy_model_config();
    c.vocab_size = static_cast<std::uint32_t>(t.base.size());
    auto base = init_params<float>(c, 3);
    const fs::path root = fs::temp_directory_path() / "gist_test_zero";
    fs::remove_all(root);
    auto r = run_pipeline(pc, t.base, t.docs, base, root);
    CHECK(r.log.empty());
    CHECK(r.params.config.n_g == 4);
    CHECK(same_tensors(r.params, load_checkpoint(root / "stage0_init" / "model")));
    CHECK(slurp(root / "final" / "model.bin") == slurp(root / "stage0_init" / "model.bin"));
    CHECK(std::equal(base.embedding.begin(), base.embedding.end(), r.params.embedding.begin()));
    fs::remove_all(root);
}
