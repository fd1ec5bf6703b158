#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"

#include "gist/model.hpp"
#include "gist/segmenter.hpp"
#include "gist/tokenizer.hpp"

namespace gist {

struct CacheCounters {
    std::size_t positions = 0;  // every position fed through the model
    std::size_t retained_entries = 0;
    std::size_t live_entries = 0;
    std::size_t peak_entries = 0;
    std::size_t evicted_entries = 0;

    // positions / peak_entries; 1 when nothing has been processed.
    double ratio() const;
    nlohmann::json to_json() const;
    friend bool operator==(const CacheCounters&, const CacheCounters&) = default;
};

struct KvEntry {
    std::uint32_t position = 0;
    TokenId id = 0;
    Role role = kRegular;
    std::uint32_t sentence = 0;
};

// Keys and values per layer in two regions: the retained gist entries of all
// closed sentences, and the entries of the open sentence. Closing a sentence
// drops its regular entries.
class GistKvCache {
public:
    GistKvCache() = default;
    GistKvCache(std::uint32_t n_layers, std::uint32_t d_model);

    std::uint32_t n_layers() const { return n_layers_; }
    std::uint32_t d_model() const { return d_; }

    struct Region {
        std::vector<KvEntry> entries;
        std::vector<std::vector<float>> keys;    // per layer, entries x d
        std::vector<std::vector<float>> values;
    };
    const Region& retained() const { return retained_; }
    const Region& current() const { return current_; }
    const CacheCounters& counters() const { return counters_; }

    // Rows per layer; gist entries go to the retained region, regular
    // entries to the current one.
    void append(const KvEntry& e, std::span<const float* const> keys, std::span<const float* const> values);
    // Evicts the current region.
    void close_sentence();

    // Throws Error if the region invariants do not hold.
    void check() const;

private:
    Region& region_for(const KvEntry& e) { return e.role == kRegular ? current_ : retained_; }

    std::uint32_t n_layers_ = 0;
    std::uint32_t d_ = 0;
    Region retained_;
    Region current_;
    CacheCounters counters_;
};

// Counters an incremental decoder reaches after feeding `a` one position at a
// time: a sentence is evicted once its gist run completes, and the peak is
// taken just before that eviction.
CacheCounters simulate_cache(const AnnotatedSequence& a);

struct PrefillResult {
    GistKvCache cache;
    std::vector<float> logits;  // last position
};

// One masked forward over the prompt; keeps all gist entries and the open
// tail. The prompt must not end inside a gist run.
PrefillResult prefill(const ModelParams<float>& p, const AnnotatedSequence& a);

struct SamplerConfig {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

class DecodeSession {
public:
    DecodeSession(const ModelParams<float>& params, const Vocab& vocab, SamplerConfig sampler = {});

    // Replaces any previous state.
    void prefill(const AnnotatedSequence& prompt);

    // Samples the next token from the current logits and feeds it. A
    // punctuation token is followed by the forced gist run and eviction.
    TokenId step();

    // Logits the next step() samples from (gist ids not yet suppressed).
    std::span<const float> logits() const { return logits_; }
    const std::vector<TokenId>& emitted() const { return emitted_; }
    // Prompt plus everything fed since, gists included.
    const AnnotatedSequence& sequence() const { return seq_; }
    const GistKvCache& cache() const { return cache_; }
    CacheCounters report() const { return cache_.counters(); }

private:
    void feed(TokenId id, Role role);
    TokenId sample();

    const ModelParams<float>& p_;
    const Vocab& vocab_;
    SamplerConfig sampler_;
    std::mt19937_64 rng_;
    GistKvCache cache_;
    AnnotatedSequence seq_;
    std::vector<TokenId> emitted_;
    std::vector<float> logits_;
};

}  // namespace gist
