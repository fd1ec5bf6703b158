#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gist/kv_cache.hpp"
#include "gist/model.hpp"
#include "gist/segmenter.hpp"
#include "gist/tokenizer.hpp"

namespace gist {

// R_c = n_regular / n_gist, kept as the exact pair of counts.
struct CompressionRate {
    std::uint64_t n_regular = 0;
    std::uint64_t n_gist = 0;

    double value() const { return static_cast<double>(n_regular) / static_cast<double>(n_gist); }
    // Rounded to two decimals, e.g. "82.96".
    std::string fixed2() const;
    // Exact rational comparison a/b == c/d.
    friend bool same_rate(const CompressionRate& a, const CompressionRate& b) {
        return static_cast<unsigned __int128>(a.n_regular) * b.n_gist ==
               static_cast<unsigned __int128>(b.n_regular) * a.n_gist;
    }
};

CompressionRate compression_rate(const AnnotatedSequence& a);
CompressionRate compression_rate(std::span<const AnnotatedSequence> docs);

struct HalvingRow {
    std::uint32_t n_g = 0;
    CompressionRate rate;
    std::optional<bool> halves_previous;  // set when n_g / 2 is also in the list
};

struct HalvingCheck {
    std::vector<HalvingRow> rows;
    bool pass = true;
};

// Segments each document under every n_g and checks R_c(2k) == R_c(k) / 2
// exactly wherever both k and 2k are listed. Any gist ids of vocab are
// replaced by max(n_gs) fresh ones.
HalvingCheck halving_property_check(const std::vector<std::vector<TokenId>>& raw, const Vocab& vocab,
                                    std::span<const std::uint32_t> n_gs);

struct PerplexityPoint {
    std::uint32_t prefix = 0;  // processed positions, gists included
    std::size_t documents = 0;
    std::array<double, 3> ppl{};      // indexed by LossMode; NaN without positions
    std::array<std::size_t, 3> count{};
};

struct PerplexityCurve {
    std::vector<LossMode> modes;
    std::vector<PerplexityPoint> points;
    std::vector<std::string> warnings;
};

// For each prefix length P, exp(mean loss) over the contributing positions of
// the first P positions of every document at least P long.
PerplexityCurve perplexity_curve(const ModelParams<float>& p, std::span<const AnnotatedSequence> docs,
                                 std::span<const std::uint32_t> prefixes, std::span<const LossMode> modes);

// prefix,documents,<mode>... one row per point.
std::string curve_csv(const PerplexityCurve& c);

struct CompressionEntry {
    std::uint32_t n_g = 0;
    CompressionRate rate;
    std::optional<bool> halves_previous;
    CacheCounters cache;  // summed over documents
};

struct EvalReport {
    std::string config_hash;
    nlohmann::json checkpoint;  // n_g, vocab_hash, parameters
    std::vector<CompressionEntry> compression;
    bool halving_pass = true;
    PerplexityCurve perplexity;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

struct EvalRequest {
    std::vector<std::uint32_t> n_gs;
    std::vector<std::uint32_t> prefixes;
    std::vector<LossMode> modes{LossMode::All, LossMode::RegularOnly, LossMode::FinalGist};
};

// vocab is the checkpoint's (gist ids included); raw documents hold no gists.
EvalReport eval_report(const ModelParams<float>& p, const Vocab& vocab, const std::string& config_hash,
                       const std::vector<std::vector<TokenId>>& raw, const EvalRequest& req);

}  // namespace gist
