#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gist/segmenter.hpp"

namespace gist {

struct Range {
    std::uint32_t begin = 0;
    std::uint32_t end = 0;  // exclusive
    std::uint32_t size() const { return end - begin; }
    friend bool operator==(const Range&, const Range&) = default;
};

// Rectangle of allowed (query, key) pairs.
struct MaskBlock {
    Range q;
    Range k;
};

// Sentence attention: query q may read key k iff
//   k <= q && (sent_idx(k) == sent_idx(q) || role(k) is a gist).
class SentenceMask {
public:
    SentenceMask() = default;
    SentenceMask(std::uint32_t n, std::vector<std::uint8_t> allowed, std::vector<MaskBlock> blocks);

    std::uint32_t size() const { return n_; }
    bool allowed(std::uint32_t q, std::uint32_t k) const { return allowed_[std::size_t{q} * n_ + k] != 0; }
    const std::vector<MaskBlock>& blocks() const { return blocks_; }

    // Allowed key positions for query q, ascending.
    std::vector<std::uint32_t> keys_for(std::uint32_t q) const;
    std::size_t allowed_count() const;

private:
    std::uint32_t n_ = 0;
    std::vector<std::uint8_t> allowed_;
    std::vector<MaskBlock> blocks_;
};

SentenceMask build_mask(const AnnotatedSequence& a);
SentenceMask causal_mask(std::uint32_t n);

// |allowed| / (n (n + 1) / 2)
double mask_density(const SentenceMask& m);

enum class RenderFormat { Ascii, Pgm };

inline constexpr std::uint32_t kMaxRenderSize = 4096;

// ASCII: one row per query, '#' allowed and '.' masked, rows joined by '\n'.
// PGM: binary P5, 255 for allowed.
std::string render_mask(const SentenceMask& m, RenderFormat format);

struct SentenceBlockRow {
    std::uint32_t sentence = 0;
    Range positions;
    std::uint32_t n_gist = 0;
    std::uint32_t visible_prior_gists = 0;
    std::size_t allowed_pairs = 0;
};

std::vector<SentenceBlockRow> sentence_block_table(const AnnotatedSequence& a, const SentenceMask& m);

}  // namespace gist
