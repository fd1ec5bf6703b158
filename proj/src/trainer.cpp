#include "gist/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace gist {

namespace fs = std::filesystem;

std::string_view to_string(StageName s) {
    switch (s) {
        case StageName::Base: return "base";
        case StageName::WarmupGist: return "warmup_gist";
        case StageName::Finetune: return "finetune";
        case StageName::ColdDown: return "cold_down";
    }
    return "finetune";
}

StageName stage_name_from_string(std::string_view s) {
    if (s == "base") return StageName::Base;
    if (s == "warmup_gist") return StageName::WarmupGist;
    if (s == "finetune") return StageName::Finetune;
    if (s == "cold_down") return StageName::ColdDown;
    throw Error("unknown stage name: " + std::string(s));
}

// ---------------------------------------------------------------- StageConfig

std::uint64_t StageConfig::total_steps() const {
    const std::uint64_t per_step = std::uint64_t{batch_size} * max_seq_len;
    return (token_budget + per_step - 1) / per_step;
}

void StageConfig::validate() const {
    if (batch_size == 0 || max_seq_len == 0) throw Error("batch_size and max_seq_len must be positive");
    if (!(max_lr >= min_lr && min_lr >= 0)) throw Error("learning rates must satisfy max_lr >= min_lr >= 0");
    if (freeze == FreezeSet::AllButGistRows && name != StageName::WarmupGist)
        throw Error("freeze=all_but_gist_rows is only valid for the warmup_gist stage");
    if (!(max_grad_norm > 0)) throw Error("max_grad_norm must be positive");
    if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1 || adam.eps <= 0)
        throw Error("invalid AdamW hyperparameters");
}

nlohmann::json StageConfig::to_json() const {
    return {{"name", to_string(name)},
            {"tokens", token_budget},
            {"batch_size", batch_size},
            {"max_seq_len", max_seq_len},
            {"max_lr", max_lr},
            {"min_lr", min_lr},
            {"warmup_steps", warmup_steps},
            {"schedule", schedule == Schedule::Cosine ? "cosine" : "linear"},
            {"max_grad_norm", max_grad_norm},
            {"freeze", freeze == FreezeSet::None ? "none" : "all_but_gist_rows"},
            {"adamw",
             {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}, {"weight_decay", adam.weight_decay}}}};
}

StageConfig StageConfig::from_json(const nlohmann::json& j) {
    StageConfig c;
    c.name = stage_name_from_string(j.at("name").get<std::string>());
    c.token_budget = j.at("tokens").get<std::uint64_t>();
    c.batch_size = j.at("batch_size").get<std::uint32_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::uint32_t>();
    c.max_lr = j.at("max_lr").get<double>();
    c.min_lr = j.at("min_lr").get<double>();
    c.warmup_steps = j.value("warmup_steps", 0u);
    const auto sched = j.value("schedule", std::string("cosine"));
    if (sched == "cosine")
        c.schedule = Schedule::Cosine;
    else if (sched == "linear")
        c.schedule = Schedule::Linear;
    else
        throw Error("unknown schedule: " + sched);
    c.max_grad_norm = j.value("max_grad_norm", 1.0);
    const auto freeze = j.value("freeze", c.name == StageName::WarmupGist ? std::string("all_but_gist_rows")
                                                                          : std::string("none"));
    if (freeze == "none")
        c.freeze = FreezeSet::None;
    else if (freeze == "all_but_gist_rows")
        c.freeze = FreezeSet::AllButGistRows;
    else
        throw Error("unknown freeze set: " + freeze);
    if (j.contains("adamw")) {
        const auto& a = j.at("adamw");
        c.adam.beta1 = a.value("beta1", c.adam.beta1);
        c.adam.beta2 = a.value("beta2", c.adam.beta2);
        c.adam.eps = a.value("eps", c.adam.eps);
        c.adam.weight_decay = a.value("weight_decay", c.adam.weight_decay);
    }
    c.validate();
    return c;
}

double lr_at(const StageConfig& cfg, std::uint64_t step) {
    if (step < cfg.warmup_steps) return cfg.max_lr * static_cast<double>(step) / cfg.warmup_steps;
    const std::uint64_t total = cfg.total_steps();
    const double span = total > cfg.warmup_steps + 1 ? static_cast<double>(total - 1 - cfg.warmup_steps) : 0.0;
    const double progress = span > 0 ? std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span) : 1.0;
    if (cfg.schedule == Schedule::Linear) return cfg.max_lr + (cfg.min_lr - cfg.max_lr) * progress;
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- metrics

std::string metric_csv_line(const MetricRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%s,%.9g,%.9g,%.9g,%.9g,%llu", static_cast<unsigned long long>(r.step),
                  r.stage.c_str(), r.lr, r.loss_all, r.loss_regular, r.grad_norm,
                  static_cast<unsigned long long>(r.tokens_seen));
    return buf;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out(kMetricsHeader);
    out += '\n';
    for (const auto& r : rows) out += metric_csv_line(r) + '\n';
    return out;
}

namespace {

std::vector<MetricRow> read_metrics_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("missing metrics file: " + path.string());
    std::vector<MetricRow> rows;
    std::string line;
    std::getline(in, line);
    if (line != kMetricsHeader) throw Error("unexpected metrics header in " + path.string());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[7];
        for (auto& x : f) std::getline(ss, x, ',');
        MetricRow r;
        r.step = std::stoull(f[0]);
        r.stage = f[1];
        r.lr = std::stod(f[2]);
        r.loss_all = std::stod(f[3]);
        r.loss_regular = std::stod(f[4]);
        r.grad_norm = std::stod(f[5]);
        r.tokens_seen = std::stoull(f[6]);
        rows.push_back(r);
    }
    return rows;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out) throw Error("cannot write " + path.string());
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    // splitmix64 finalizer
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

struct TensorRef {
    std::string name;
    std::vector<float>* param;
    std::vector<float>* grad;
    std::size_t cols;
    bool decay;
    // trainable rows [row_begin, row_end); full tensor when not frozen
    std::size_t row_begin, row_end;
};

}  // namespace

// ---------------------------------------------------------------- sampler

BatchSampler::BatchSampler(std::size_t pool, std::uint32_t batch, std::uint64_t seed)
    : pool_(pool), batch_(batch), seed_(seed) {
    if (pool == 0) throw Error("empty training pool");
}

void BatchSampler::ensure_epoch(std::uint64_t epoch) {
    if (epoch == epoch_) return;
    perm_.resize(pool_);
    for (std::size_t i = 0; i < pool_; ++i) perm_[i] = i;
    std::mt19937_64 rng(mix_seed(seed_, epoch));
    // Fisher-Yates with explicit draws so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = pool_; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(perm_[i - 1], perm_[j]);
    }
    epoch_ = epoch;
}

std::vector<std::size_t> BatchSampler::batch(std::uint64_t step) {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    for (std::uint64_t i = 0; i < batch_; ++i) {
        const std::uint64_t flat = step * batch_ + i;
        ensure_epoch(flat / pool_);
        out.push_back(perm_[flat % pool_]);
    }
    return out;
}

std::vector<AnnotatedSequence> build_sequences(const std::vector<std::vector<TokenId>>& docs, const Vocab& vocab,
                                               std::uint32_t n_g, std::size_t max_len) {
    std::vector<AnnotatedSequence> out;
    for (const auto& d : docs) {
        if (d.empty()) continue;
        if (n_g == 0) {
            for (std::size_t i = 0; i < d.size(); i += max_len) {
                AnnotatedSequence a;
                const std::size_t n = std::min(max_len, d.size() - i);
                a.ids.assign(d.begin() + i, d.begin() + i + n);
                a.roles.assign(n, kRegular);
                a.sent_idx.assign(n, 0);
                a.open_tail = true;
                out.push_back(std::move(a));
            }
            continue;
        }
        auto windows = split_at_sentences(segment(d, vocab, n_g), max_len);
        for (auto& w : windows) out.push_back(std::move(w));
    }
    return out;
}

// ---------------------------------------------------------------- run_stage

TrainState run_stage(TrainState state, const StageConfig& cfg, const StageData& data, const StageOptions& opts) {
    cfg.validate();
    if (!opts.expected_vocab_hash.empty() && data.vocab_hash != opts.expected_vocab_hash)
        throw Error("vocab hash mismatch: data " + data.vocab_hash + " vs model " + opts.expected_vocab_hash);
    if (data.n_g != state.params.config.n_g)
        throw Error("stage data was segmented with n_g=" + std::to_string(data.n_g) + " but the model has n_g=" +
                    std::to_string(state.params.config.n_g));
    const std::uint64_t steps = cfg.total_steps();
    if (steps == 0) return state;

    const auto& seqs = data.sequences;
    for (const auto& s : seqs)
        if (s.size() > cfg.max_seq_len) throw Error("training sequence exceeds the stage max_seq_len");
    BatchSampler sampler(seqs.size(), cfg.batch_size, mix_seed(state.seed, 1000 + opts.stage_index));

    auto& P = state.params;
    const ModelConfig& mc = P.config;
    auto m = ModelParams<float>::zeros(mc);
    auto v = ModelParams<float>::zeros(mc);

    const bool frozen = cfg.freeze == FreezeSet::AllButGistRows;
    if (frozen && mc.n_g == 0) throw Error("cannot train gist rows of a model without gists");

    std::vector<std::vector<float>*> pm, mm, vm;
    std::vector<TensorRef> refs;
    P.visit([&](const std::string& name, std::vector<float>& t, const std::vector<std::size_t>& shape) {
        const std::size_t cols = shape.size() == 2 ? shape[1] : t.size();
        const std::size_t rows = t.size() / cols;
        std::size_t rb = 0, re = rows;
        if (frozen) {
            if (name == "embedding" || name == "lm_head") {
                rb = mc.gist_row_begin();
                re = mc.vocab_size;
            } else {
                rb = re = 0;
            }
        }
        refs.push_back({name, &t, nullptr, cols, !name.ends_with("norm"), rb, re});
    });
    m.visit([&](const std::string&, std::vector<float>& t, const auto&) { mm.push_back(&t); });
    v.visit([&](const std::string&, std::vector<float>& t, const auto&) { vm.push_back(&t); });

    std::vector<TrainSequence> batch;
    for (std::uint64_t s = 0; s < steps; ++s) {
        batch.clear();
        std::uint64_t batch_tokens = 0;
        for (auto idx : sampler.batch(s)) {
            batch.push_back({seqs[idx], build_mask(seqs[idx])});
            batch_tokens += seqs[idx].size();
        }

        GradResult<float> g;
        try {
            g = grad<float>(P, batch, opts.loss_mode);
            if (!std::isfinite(g.loss)) throw Error("non-finite loss");
        } catch (const Error& e) {
            if (opts.snapshot_dir) {
                CheckpointMeta meta;
                meta.extra = {{"aborted_at_step", state.step + 1}, {"reason", e.what()}};
                save_checkpoint(*opts.snapshot_dir / "model", P, meta);
            }
            throw Error(std::string("training aborted at step ") + std::to_string(state.step + 1) + ": " + e.what());
        }

        std::vector<std::vector<float>*> gm;
        g.grad.visit([&](const std::string&, std::vector<float>& t, const auto&) { gm.push_back(&t); });

        // Global norm over trainable coordinates.
        double sq = 0;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            const auto& r = refs[i];
            const auto& gt = *gm[i];
            for (std::size_t k = r.row_begin * r.cols; k < r.row_end * r.cols; ++k)
                sq += static_cast<double>(gt[k]) * gt[k];
        }
        const double norm = std::sqrt(sq);
        const double clip = norm > cfg.max_grad_norm ? cfg.max_grad_norm / norm : 1.0;

        const double lr = lr_at(cfg, s);
        const double t = static_cast<double>(s + 1);
        const double bc1 = 1.0 - std::pow(cfg.adam.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg.adam.beta2, t);
        const float b1 = static_cast<float>(cfg.adam.beta1), b2 = static_cast<float>(cfg.adam.beta2);
        for (std::size_t i = 0; i < refs.size(); ++i) {
            const auto& r = refs[i];
            auto& pt = *r.param;
            auto& gt = *gm[i];
            auto& mt = *mm[i];
            auto& vt = *vm[i];
            const float wd = r.decay ? static_cast<float>(cfg.adam.weight_decay) : 0.0f;
            for (std::size_t k = r.row_begin * r.cols; k < r.row_end * r.cols; ++k) {
                const float gk = static_cast<float>(gt[k] * clip);
                mt[k] = b1 * mt[k] + (1 - b1) * gk;
                vt[k] = b2 * vt[k] + (1 - b2) * gk * gk;
                const double mh = mt[k] / bc1;
                const double vh = vt[k] / bc2;
                pt[k] = static_cast<float>(pt[k] - lr * (mh / (std::sqrt(vh) + cfg.adam.eps) + wd * pt[k]));
            }
        }

        ++state.step;
        state.tokens_seen += batch_tokens;
        MetricRow row;
        row.step = state.step;
        row.stage = std::string(to_string(cfg.name));
        row.lr = lr;
        row.loss_all = g.mode_loss[static_cast<std::size_t>(LossMode::All)];
        row.loss_regular = g.mode_loss[static_cast<std::size_t>(LossMode::RegularOnly)];
        row.loss_final_gist = g.mode_loss[static_cast<std::size_t>(LossMode::FinalGist)];
        row.grad_norm_raw = norm;
        row.grad_norm = norm * clip;
        row.tokens_seen = state.tokens_seen;
        state.log.push_back(row);
        if (opts.on_step) opts.on_step(row);
    }
    return state;
}

// ---------------------------------------------------------------- pipeline

void PipelineConfig::validate() const {
    if (n_g < 1) throw Error("n_g must be at least 1");
    if (base && base->name != StageName::Base) throw Error("the base stage must be named \"base\"");
    static constexpr StageName order[] = {StageName::WarmupGist, StageName::Finetune, StageName::ColdDown};
    std::size_t next = 0;
    for (const auto& s : stages) {
        s.validate();
        while (next < 3 && order[next] != s.name) ++next;
        if (next == 3) throw Error("stages must be ordered warmup_gist, finetune, cold_down");
        ++next;
        if (s.max_seq_len > model.max_seq_len) throw Error("stage max_seq_len exceeds the model max_seq_len");
    }
    if (base && base->max_seq_len > model.max_seq_len) throw Error("base max_seq_len exceeds the model max_seq_len");
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : stages) st.push_back(s.to_json());
    auto mc = model.to_json();
    mc.erase("vocab_size");
    mc.erase("n_g");
    return {{"schema", 1},
            {"seed", seed},
            {"n_g", n_g},
            {"tokenizer", to_string(scheme)},
            {"model", mc},
            {"base", base ? base->to_json() : nlohmann::json(nullptr)},
            {"stages", st},
            {"mean_resize_eps", mean_resize_eps},
            {"loss_mode", to_string(loss_mode)}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.seed = j.value("seed", std::uint64_t{0});
    c.n_g = j.value("n_g", 1u);
    c.scheme = scheme_from_string(j.value("tokenizer", std::string("byte")));
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("base") && !j.at("base").is_null()) c.base = StageConfig::from_json(j.at("base"));
    for (const auto& s : j.value("stages", nlohmann::json::array())) c.stages.push_back(StageConfig::from_json(s));
    c.mean_resize_eps = j.value("mean_resize_eps", 1e-6);
    c.loss_mode = loss_mode_from_string(j.value("loss_mode", std::string("all")));
    c.validate();
    return c;
}

std::string PipelineConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

namespace {

std::string boundary_dir(std::size_t i, const StageConfig& s) {
    return "stage" + std::to_string(i) + "_" + std::string(to_string(s.name));
}

struct Boundary {
    fs::path dir;
    std::size_t completed;  // gist stages completed
};

CheckpointMeta boundary_meta(const std::string& hash, const Vocab& vocab, std::size_t completed,
                             const TrainState& st, std::string_view stage) {
    CheckpointMeta meta;
    meta.extra = {{"config_hash", hash},
                  {"vocab", vocab.to_json()},
                  {"vocab_hash", hex64(vocab.hash())},
                  {"stages_completed", completed},
                  {"stage", stage},
                  {"step", st.step},
                  {"tokens_seen", st.tokens_seen},
                  {"seed_lineage", {{"seed", st.seed}, {"init_seed", mix_seed(st.seed, 1)},
                                    {"mean_resize_seed", mix_seed(st.seed, 2)}}}};
    return meta;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const Vocab& base_vocab,
                            const std::vector<std::vector<TokenId>>& raw_docs,
                            const std::optional<ModelParams<float>>& base_params, const fs::path& out_dir,
                            const PipelineOptions& opts) {
    cfg.validate();
    if (base_vocab.gist_count() != 0) throw Error("pipeline expects a vocab without gist ids");
    const std::string hash = cfg.hash();
    const Vocab vocab = base_vocab.with_gists(cfg.n_g);
    const std::string vocab_hash = hex64(vocab.hash());
    fs::create_directories(out_dir);

    TrainState st;
    st.seed = cfg.seed;
    std::vector<MetricRow> log;
    std::size_t completed = 0;
    bool have_state = false;

    auto load_boundary = [&](const fs::path& dir) {
        CheckpointMeta meta;
        auto p = load_checkpoint(dir / "model", &meta);
        if (meta.extra.value("config_hash", "") != hash)
            throw Error("config hash mismatch on resume: checkpoint " + meta.extra.value("config_hash", "?") +
                        " vs config " + hash);
        st.params = std::move(p);
        st.step = meta.extra.at("step").get<std::uint64_t>();
        st.tokens_seen = meta.extra.at("tokens_seen").get<std::uint64_t>();
        return meta;
    };

    // Rows of already-finished runs, in order.
    auto prior_rows = [&](std::size_t upto) {
        std::vector<MetricRow> rows;
        if (cfg.base && !base_params) {
            auto r = read_metrics_csv(out_dir / "base" / "metrics.csv");
            rows.insert(rows.end(), r.begin(), r.end());
        }
        for (std::size_t i = 0; i < upto; ++i) {
            auto r = read_metrics_csv(out_dir / boundary_dir(i + 1, cfg.stages[i]) / "metrics.csv");
            rows.insert(rows.end(), r.begin(), r.end());
        }
        return rows;
    };

    if (opts.resume) {
        for (std::size_t i = cfg.stages.size(); i-- > 0 && !have_state;) {
            const auto dir = out_dir / boundary_dir(i + 1, cfg.stages[i]);
            if (!fs::exists(dir / "model.json")) continue;
            load_boundary(dir);
            completed = i + 1;
            have_state = true;
        }
        if (!have_state && fs::exists(out_dir / "stage0_init" / "model.json")) {
            load_boundary(out_dir / "stage0_init");
            have_state = true;
        }
        if (have_state) log = prior_rows(completed);
    }

    if (!have_state) {
        ModelParams<float> base;
        if (base_params) {
            base = *base_params;
            if (base.config.vocab_size != base_vocab.size() || base.config.n_g != 0)
                throw Error("base checkpoint does not match the base vocab");
        } else {
            ModelConfig mc = cfg.model;
            mc.vocab_size = static_cast<std::uint32_t>(base_vocab.size());
            mc.n_g = 0;
            base = init_params<float>(mc, mix_seed(cfg.seed, 1));
            if (cfg.base) {
                TrainState bs;
                bs.params = std::move(base);
                bs.seed = cfg.seed;
                StageData data{build_sequences(raw_docs, base_vocab, 0, cfg.base->max_seq_len), 0,
                               hex64(base_vocab.hash())};
                StageOptions so;
                so.stage_index = 0;
                so.loss_mode = LossMode::All;
                so.on_step = opts.on_step;
                bs = run_stage(std::move(bs), *cfg.base, data, so);
                fs::create_directories(out_dir / "base");
                CheckpointMeta meta = boundary_meta(hash, base_vocab, 0, bs, "base");
                save_checkpoint(out_dir / "base" / "model", bs.params, meta);
                write_file(out_dir / "base" / "metrics.csv", metrics_csv(bs.log));
                st.step = bs.step;
                st.tokens_seen = bs.tokens_seen;
                log = bs.log;
                base = std::move(bs.params);
            }
        }
        st.params = extend_with_gists(base, cfg.n_g, cfg.mean_resize_eps, mix_seed(cfg.seed, 2));
        save_checkpoint(out_dir / "stage0_init" / "model", st.params,
                        boundary_meta(hash, vocab, 0, st, "init"));
    }

    for (std::size_t i = completed; i < cfg.stages.size(); ++i) {
        if (opts.stop_after && i >= *opts.stop_after) break;
        const auto& sc = cfg.stages[i];
        StageData data{build_sequences(raw_docs, vocab, cfg.n_g, sc.max_seq_len), cfg.n_g, vocab_hash};
        StageOptions so;
        so.expected_vocab_hash = vocab_hash;
        so.stage_index = static_cast<std::uint32_t>(i + 1);
        so.loss_mode = cfg.loss_mode;
        so.snapshot_dir = out_dir / "abort_snapshot";
        so.on_step = opts.on_step;
        const std::size_t before = st.log.size();
        st = run_stage(std::move(st), sc, data, so);
        std::vector<MetricRow> rows(st.log.begin() + static_cast<std::ptrdiff_t>(before), st.log.end());
        const auto dir = out_dir / boundary_dir(i + 1, sc);
        save_checkpoint(dir / "model", st.params, boundary_meta(hash, vocab, i + 1, st, to_string(sc.name)));
        write_file(dir / "metrics.csv", metrics_csv(rows));
        log.insert(log.end(), rows.begin(), rows.end());
        completed = i + 1;
    }

    if (completed == cfg.stages.size()) {
        save_checkpoint(out_dir / "final" / "model", st.params,
                        boundary_meta(hash, vocab, completed, st, "final"));
        write_file(out_dir / "metrics.csv", metrics_csv(log));
    }
    return {std::move(st.params), vocab, std::move(log), hash};
}

}  // namespace gist
