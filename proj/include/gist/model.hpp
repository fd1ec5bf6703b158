#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gist/common.hpp"
#include "gist/mask.hpp"
#include "gist/segmenter.hpp"
#include "gist/tokenizer.hpp"

namespace gist {

enum class PosEncoding { Rotary, Learned };

struct ModelConfig {
    std::uint32_t d_model = 32;
    std::uint32_t n_layers = 2;
    std::uint32_t n_heads = 4;
    std::uint32_t d_ff = 128;
    std::uint32_t vocab_size = 0;  // includes the n_g gist ids
    std::uint32_t n_g = 0;
    std::uint32_t max_seq_len = 256;
    PosEncoding pos_encoding = PosEncoding::Rotary;
    bool tied_lm_head = true;
    double rope_base = 10000.0;
    double init_std = 0.02;

    std::uint32_t head_dim() const { return d_model / n_heads; }
    std::uint32_t gist_row_begin() const { return vocab_size - n_g; }
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct LayerParams {
    std::vector<T> attn_norm;  // d
    std::vector<T> wq, wk, wv, wo;  // d x d, row = output feature
    std::vector<T> mlp_norm;  // d
    std::vector<T> w1;  // d_ff x d
    std::vector<T> w2;  // d x d_ff
};

// All learnable tensors. Matrices are row-major with one row per output
// feature; the embedding has one row per token id and doubles as the LM head
// when tied. Gist rows are [gist_row_begin(), vocab_size).
template <typename T>
struct ModelParams {
    ModelConfig config;
    std::vector<T> embedding;      // V x d
    std::vector<T> lm_head;        // V x d, untied only
    std::vector<T> pos_embedding;  // max_seq_len x d, learned positions only
    std::vector<LayerParams<T>> layers;
    std::vector<T> final_norm;     // d

    // Zero-filled tensors of the right shapes.
    static ModelParams zeros(const ModelConfig& c);

    // f(name, tensor, shape) over every tensor, in a fixed order.
    template <typename F>
    void visit(F&& f);
    template <typename F>
    void visit(F&& f) const;

    std::size_t parameter_count() const;

    template <typename U>
    ModelParams<U> cast() const;
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed);

// Returns E_base extended by n_g rows drawn i.i.d. from N(mu, Sigma + eps I),
// where mu and Sigma are the row mean and (unbiased) covariance of E_base.
std::vector<float> extend_vocab_mean_resize(std::span<const float> e_base, std::size_t rows,
                                            std::size_t dim, std::size_t n_g, double eps,
                                            std::uint64_t seed);

// Applies mean-resizing to the embedding (and, when untied, independently to
// the head) and updates vocab_size / n_g.
ModelParams<float> extend_with_gists(const ModelParams<float>& base, std::uint32_t n_g, double eps,
                                     std::uint64_t seed);

// Keys/values substituted at given positions in every layer, after the
// positional rotation. Used to hold cache entries fixed in probes.
template <typename T>
struct KvOverride {
    std::vector<std::uint32_t> positions;
    std::vector<std::vector<T>> keys;    // per layer, L x d
    std::vector<std::vector<T>> values;  // per layer, L x d
};

template <typename T>
struct ForwardOptions {
    const std::vector<T>* embedding_delta = nullptr;  // L x d, added to the input rows
    const KvOverride<T>* kv_override = nullptr;
    bool capture_kv = false;
};

template <typename T>
struct ForwardOutput {
    std::uint32_t length = 0;
    std::uint32_t vocab = 0;
    std::vector<T> logits;  // L x V
    std::vector<std::vector<T>> keys;    // per layer L x d, when captured
    std::vector<std::vector<T>> values;

    std::span<const T> row(std::uint32_t t) const {
        return {logits.data() + std::size_t{t} * vocab, vocab};
    }
};

template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& p, std::span<const TokenId> ids, const SentenceMask& m,
                         const ForwardOptions<T>& opts = {});

template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& p, const AnnotatedSequence& a, const SentenceMask& m,
                         const ForwardOptions<T>& opts = {}) {
    return forward(p, std::span<const TokenId>(a.ids), m, opts);
}

enum class LossMode { All, RegularOnly, FinalGist };

std::string_view to_string(LossMode m);
LossMode loss_mode_from_string(std::string_view s);

// Whether position t (predicting t + 1) contributes under the mode.
bool contributes(const AnnotatedSequence& a, std::size_t t, LossMode mode);

struct LossResult {
    double loss = 0.0;  // mean over contributing positions
    std::size_t count = 0;
    std::vector<double> per_position;  // L - 1 entries, next-token cross-entropy
    std::vector<std::uint8_t> contributing;
};

template <typename T>
LossResult lm_loss(const ForwardOutput<T>& out, const AnnotatedSequence& a, LossMode mode);

struct TrainSequence {
    AnnotatedSequence seq;
    SentenceMask mask;
};

template <typename T>
struct GradResult {
    ModelParams<T> grad;
    double loss = 0.0;  // mean over all contributing positions of the batch
    std::size_t count = 0;
    // Batch-mean loss under each LossMode (indexed by the enum), measured on
    // the same forward pass.
    std::array<double, 3> mode_loss{};
};

// Exact gradient of the batch-mean loss (token-weighted across sequences).
template <typename T>
GradResult<T> grad(const ModelParams<T>& p, std::span<const TrainSequence> batch, LossMode mode);

// Loss only, same weighting as grad().
template <typename T>
double batch_loss(const ModelParams<T>& p, std::span<const TrainSequence> batch, LossMode mode);

// Per-position helpers shared with the incremental decoder.

// y[t] = W x[t] for each of rows input rows; W is out x in, row-major. The
// summation order is fixed, so one row fed alone rounds exactly as it does
// inside a batch.
template <typename T>
void linear_rows(const T* x, std::size_t rows, const std::vector<T>& w, std::size_t out, std::size_t in, T* y);

template <typename T>
void rms_norm(std::span<const T> x, std::span<const T> gain, std::span<T> out);

template <typename T>
void apply_rope(std::span<T> row, std::uint32_t position, std::uint32_t n_heads, double base);

// Single-head attention. keys/values point at full d_model rows; the head
// occupies [offset, offset + head_dim). Writes keys.size() probabilities and
// the weighted value sum (head_dim entries) into ctx.
template <typename T>
void attend_head(const T* q, std::span<const T* const> keys, std::span<const T* const> values,
                 std::uint32_t offset, std::uint32_t head_dim, T* probs, T* ctx);

// Checkpoint: <stem>.json manifest and <stem>.bin little-endian f32 blob.
struct CheckpointMeta {
    nlohmann::json extra = nlohmann::json::object();  // vocab, config hash, lineage...
};

void save_checkpoint(const std::filesystem::path& stem, const ModelParams<float>& p,
                     const CheckpointMeta& meta);
ModelParams<float> load_checkpoint(const std::filesystem::path& stem, CheckpointMeta* meta = nullptr);

// Resolves "x", "x.json" or a directory containing model.json to the stem.
std::filesystem::path checkpoint_stem(const std::filesystem::path& p);

// ---- implementation of the visitor templates ----

template <typename T>
template <typename F>
void ModelParams<T>::visit(F&& f) {
    const std::size_t d = config.d_model, v = config.vocab_size, ff = config.d_ff;
    f(std::string("embedding"), embedding, std::vector<std::size_t>{v, d});
    if (!config.tied_lm_head) f(std::string("lm_head"), lm_head, std::vector<std::size_t>{v, d});
    if (config.pos_encoding == PosEncoding::Learned)
        f(std::string("pos_embedding"), pos_embedding, std::vector<std::size_t>{config.max_seq_len, d});
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& L = layers[l];
        const std::string pre = "layers." + std::to_string(l) + ".";
        f(pre + "attn_norm", L.attn_norm, std::vector<std::size_t>{d});
        f(pre + "wq", L.wq, std::vector<std::size_t>{d, d});
        f(pre + "wk", L.wk, std::vector<std::size_t>{d, d});
        f(pre + "wv", L.wv, std::vector<std::size_t>{d, d});
        f(pre + "wo", L.wo, std::vector<std::size_t>{d, d});
        f(pre + "mlp_norm", L.mlp_norm, std::vector<std::size_t>{d});
        f(pre + "w1", L.w1, std::vector<std::size_t>{ff, d});
        f(pre + "w2", L.w2, std::vector<std::size_t>{d, ff});
    }
    f(std::string("final_norm"), final_norm, std::vector<std::size_t>{d});
}

template <typename T>
template <typename F>
void ModelParams<T>::visit(F&& f) const {
    const_cast<ModelParams<T>*>(this)->visit(
        [&](const std::string& name, std::vector<T>& t, const std::vector<std::size_t>& shape) {
            f(name, static_cast<const std::vector<T>&>(t), shape);
        });
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(config);
    std::vector<const std::vector<T>*> src;
    visit([&](const std::string&, const std::vector<T>& t, const auto&) { src.push_back(&t); });
    std::size_t i = 0;
    out.visit([&](const std::string&, std::vector<U>& t, const auto&) {
        const auto& s = *src[i++];
        for (std::size_t j = 0; j < s.size(); ++j) t[j] = static_cast<U>(s[j]);
    });
    return out;
}

}  // namespace gist
