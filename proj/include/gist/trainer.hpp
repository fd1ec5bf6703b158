#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gist/model.hpp"
#include "gist/segmenter.hpp"
#include "gist/tokenizer.hpp"

namespace gist {

// "base" is the optional full-causal pretraining run that produces the base
// checkpoint; the three gist stages follow it.
enum class StageName { Base, WarmupGist, Finetune, ColdDown };
enum class Schedule { Cosine, Linear };
enum class FreezeSet { None, AllButGistRows };

std::string_view to_string(StageName s);
StageName stage_name_from_string(std::string_view s);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

struct StageConfig {
    StageName name = StageName::Finetune;
    std::uint64_t token_budget = 0;
    std::uint32_t batch_size = 1;
    std::uint32_t max_seq_len = 256;
    double max_lr = 1e-4;
    double min_lr = 5e-5;
    std::uint32_t warmup_steps = 0;
    Schedule schedule = Schedule::Cosine;
    double max_grad_norm = 1.0;
    FreezeSet freeze = FreezeSet::None;
    AdamWConfig adam;

    // ceil(token_budget / (batch_size * max_seq_len))
    std::uint64_t total_steps() const;
    void validate() const;
    nlohmann::json to_json() const;
    static StageConfig from_json(const nlohmann::json& j);
};

// Linear warmup from 0 to max_lr over warmup_steps, then cosine or linear
// decay reaching min_lr at the final step.
double lr_at(const StageConfig& cfg, std::uint64_t step);

struct MetricRow {
    std::uint64_t step = 0;  // global, 1-based
    std::string stage;
    double lr = 0;
    double loss_all = 0;
    double loss_regular = 0;
    double loss_final_gist = 0;
    double grad_norm_raw = 0;
    double grad_norm = 0;  // after clipping
    std::uint64_t tokens_seen = 0;
};

inline constexpr std::string_view kMetricsHeader = "step,stage,lr,loss_all,loss_regular,grad_norm,tokens_seen";
std::string metrics_csv(const std::vector<MetricRow>& rows);
std::string metric_csv_line(const MetricRow& r);

struct TrainState {
    ModelParams<float> params;
    std::uint64_t step = 0;
    std::uint64_t tokens_seen = 0;
    std::uint64_t seed = 0;
    std::vector<MetricRow> log;
};

// Training sequences for one stage, tagged with the segmentation they came
// from so a stage can refuse data prepared for another vocab.
struct StageData {
    std::vector<AnnotatedSequence> sequences;
    std::uint32_t n_g = 0;
    std::string vocab_hash;
};

struct StageOptions {
    std::string expected_vocab_hash;  // empty skips the check
    std::uint32_t stage_index = 0;    // mixes into the batch order
    LossMode loss_mode = LossMode::All;
    std::optional<std::filesystem::path> snapshot_dir;  // written on abort
    std::function<void(const MetricRow&)> on_step;
};

// Runs exactly cfg.total_steps() AdamW steps with global-norm clipping. Under
// FreezeSet::AllButGistRows only the gist rows of the embedding (and of an
// untied head) are updated; every other coordinate is left bit-identical.
TrainState run_stage(TrainState state, const StageConfig& cfg, const StageData& data,
                     const StageOptions& opts = {});

// Deterministic batch order: epochs of seeded permutations over the pool.
class BatchSampler {
public:
    BatchSampler(std::size_t pool, std::uint32_t batch, std::uint64_t seed);
    std::vector<std::size_t> batch(std::uint64_t step);

private:
    void ensure_epoch(std::uint64_t epoch);
    std::size_t pool_;
    std::uint32_t batch_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = ~std::uint64_t{0};
    std::vector<std::size_t> perm_;
};

// Documents segmented with n_g and split at sentence boundaries into windows
// of at most max_len positions. n_g = 0 yields plain causal windows (one
// sentence per window, no gists).
std::vector<AnnotatedSequence> build_sequences(const std::vector<std::vector<TokenId>>& docs,
                                               const Vocab& vocab, std::uint32_t n_g, std::size_t max_len);

struct PipelineConfig {
    std::uint64_t seed = 0;
    std::uint32_t n_g = 1;
    TokenizerScheme scheme = TokenizerScheme::Byte;
    ModelConfig model;  // vocab_size / n_g are filled in from the vocab
    std::optional<StageConfig> base;  // pretrain the base model from scratch
    std::vector<StageConfig> stages;
    double mean_resize_eps = 1e-6;
    LossMode loss_mode = LossMode::All;

    void validate() const;
    nlohmann::json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& j);
    std::string hash() const;
};

struct PipelineResult {
    ModelParams<float> params;
    Vocab vocab;  // with gist ids
    std::vector<MetricRow> log;
    std::string config_hash;
};

struct PipelineOptions {
    bool resume = false;
    std::function<void(const MetricRow&)> on_step;
    // Stop after this many gist stages have completed (for tests that
    // simulate an interrupted run).
    std::optional<std::size_t> stop_after;
};

// Layout under out_dir:
//   base/model.{json,bin}            when cfg.base is set (or the given base)
//   stage0_init/model.{json,bin}     after vocab extension
//   stage<i>_<name>/model.{json,bin} + metrics.csv after each stage
//   final/model.{json,bin}, metrics.csv
// Every manifest stores the config hash; resume refuses a mismatch.
PipelineResult run_pipeline(const PipelineConfig& cfg, const Vocab& base_vocab,
                            const std::vector<std::vector<TokenId>>& raw_docs,
                            const std::optional<ModelParams<float>>& base_params,
                            const std::filesystem::path& out_dir, const PipelineOptions& opts = {});

}  // namespace gist
