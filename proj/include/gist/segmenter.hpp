#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gist/common.hpp"
#include "gist/tokenizer.hpp"

namespace gist {

// Per-position role: 0 for a regular token, k in [1, n_g] for the k-th gist of
// a run.
using Role = std::uint8_t;
inline constexpr Role kRegular = 0;

// Token ids after gist insertion, with role and sentence index per position.
// A gist run carries the sentence index of the sentence it closes.
struct AnnotatedSequence {
    std::vector<TokenId> ids;
    std::vector<Role> roles;
    std::vector<std::uint32_t> sent_idx;
    std::uint32_t n_g = 0;
    bool open_tail = false;

    std::size_t size() const { return ids.size(); }
    bool is_gist(std::size_t i) const { return roles[i] != kRegular; }
    std::uint32_t sentence_count() const { return ids.empty() ? 0 : sent_idx.back() + 1; }
    std::uint32_t closed_sentences() const { return sentence_count() - (open_tail ? 1 : 0); }
};

// Inserts gist ids g1..g_{n_g} after every sentence-ending punctuation token.
AnnotatedSequence segment(std::span<const TokenId> raw, const Vocab& vocab, std::uint32_t n_g);

std::vector<TokenId> strip_gists(const AnnotatedSequence& a);

struct TokenCounts {
    std::size_t n_regular = 0;
    std::size_t n_gist = 0;
    friend bool operator==(const TokenCounts&, const TokenCounts&) = default;
};

TokenCounts count_tokens(const AnnotatedSequence& a);

// Throws Error describing the first violated structural invariant.
void validate(const AnnotatedSequence& a, const Vocab& vocab);

// Splits a document into windows of at most max_len positions, cutting only at
// sentence boundaries. A sentence longer than max_len is truncated to its first
// max_len positions. Sentence indices are renumbered from zero per window.
std::vector<AnnotatedSequence> split_at_sentences(const AnnotatedSequence& doc,
                                                  std::size_t max_len);

// Sub-sequence [0, len) with open_tail recomputed.
AnnotatedSequence prefix(const AnnotatedSequence& a, std::size_t len);

// Shard file: magic "GISTSHD1", u64 LE header length, JSON header
// {"schema","n_g","vocab_hash","doc_offsets"[,"config_hash"]}, then packed little-endian
// (u32 id, u8 role, u32 sent_idx) triples.
struct Shard {
    std::uint32_t n_g = 0;
    std::string vocab_hash;
    std::string config_hash;  // optional
    std::vector<AnnotatedSequence> documents;
};

void write_shard(const std::filesystem::path& path, const Shard& shard);
Shard read_shard(const std::filesystem::path& path);

}  // namespace gist
