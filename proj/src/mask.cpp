#include "gist/mask.hpp"

#include <algorithm>

namespace gist {

SentenceMask::SentenceMask(std::uint32_t n, std::vector<std::uint8_t> allowed,
                           std::vector<MaskBlock> blocks)
    : n_(n), allowed_(std::move(allowed)), blocks_(std::move(blocks)) {
    if (allowed_.size() != std::size_t{n} * n) throw Error("mask storage does not match size");
}

std::vector<std::uint32_t> SentenceMask::keys_for(std::uint32_t q) const {
    std::vector<std::uint32_t> keys;
    const std::uint8_t* row = allowed_.data() + std::size_t{q} * n_;
    for (std::uint32_t k = 0; k <= q; ++k)
        if (row[k]) keys.push_back(k);
    return keys;
}

std::size_t SentenceMask::allowed_count() const {
    return static_cast<std::size_t>(std::count(allowed_.begin(), allowed_.end(), std::uint8_t{1}));
}

SentenceMask build_mask(const AnnotatedSequence& a) {
    const auto n = static_cast<std::uint32_t>(a.size());
    std::vector<MaskBlock> blocks;

    // Sentence spans and their gist runs.
    struct Span {
        Range all;
        Range run;
    };
    std::vector<Span> spans;
    for (std::uint32_t i = 0; i < n;) {
        std::uint32_t j = i;
        while (j < n && a.sent_idx[j] == a.sent_idx[i]) ++j;
        std::uint32_t r = j;
        while (r > i && a.is_gist(r - 1)) --r;
        spans.push_back({{i, j}, {r, j}});
        i = j;
    }

    // Own-sentence causal triangle as one row strip per query, then each gist
    // run as a rectangle seen by every later sentence.
    for (const auto& s : spans)
        for (std::uint32_t q = s.all.begin; q < s.all.end; ++q)
            blocks.push_back({{q, q + 1}, {s.all.begin, q + 1}});
    for (std::size_t i = 0; i + 1 < spans.size(); ++i)
        if (spans[i].run.size() > 0)
            blocks.push_back({{spans[i + 1].all.begin, n}, spans[i].run});

    std::vector<std::uint8_t> allowed(std::size_t{n} * n, 0);
    for (const auto& b : blocks)
        for (std::uint32_t q = b.q.begin; q < b.q.end; ++q)
            std::fill(allowed.begin() + std::size_t{q} * n + b.k.begin,
                      allowed.begin() + std::size_t{q} * n + b.k.end, std::uint8_t{1});
    return SentenceMask(n, std::move(allowed), std::move(blocks));
}

SentenceMask causal_mask(std::uint32_t n) {
    std::vector<MaskBlock> blocks;
    std::vector<std::uint8_t> allowed(std::size_t{n} * n, 0);
    for (std::uint32_t q = 0; q < n; ++q) {
        blocks.push_back({{q, q + 1}, {0, q + 1}});
        std::fill(allowed.begin() + std::size_t{q} * n, allowed.begin() + std::size_t{q} * n + q + 1,
                  std::uint8_t{1});
    }
    return SentenceMask(n, std::move(allowed), std::move(blocks));
}

double mask_density(const SentenceMask& m) {
    if (m.size() == 0) throw Error("mask density undefined for n = 0");
    const double n = m.size();
    return static_cast<double>(m.allowed_count()) / (n * (n + 1) / 2);
}

std::string render_mask(const SentenceMask& m, RenderFormat format) {
    const auto n = m.size();
    if (n > kMaxRenderSize) throw Error("mask too large to render (n > 4096)");
    std::string out;
    if (format == RenderFormat::Ascii) {
        out.reserve(std::size_t{n} * (n + 1));
        for (std::uint32_t q = 0; q < n; ++q) {
            if (q) out.push_back('\n');
            for (std::uint32_t k = 0; k < n; ++k) out.push_back(m.allowed(q, k) ? '#' : '.');
        }
        return out;
    }
    out = "P5\n" + std::to_string(n) + " " + std::to_string(n) + "\n255\n";
    for (std::uint32_t q = 0; q < n; ++q)
        for (std::uint32_t k = 0; k < n; ++k) out.push_back(m.allowed(q, k) ? char(255) : char(0));
    return out;
}

std::vector<SentenceBlockRow> sentence_block_table(const AnnotatedSequence& a, const SentenceMask& m) {
    std::vector<SentenceBlockRow> rows;
    std::uint32_t gists_before = 0;
    const auto n = static_cast<std::uint32_t>(a.size());
    for (std::uint32_t i = 0; i < n;) {
        std::uint32_t j = i;
        std::uint32_t ng = 0;
        while (j < n && a.sent_idx[j] == a.sent_idx[i]) ng += a.is_gist(j++);
        SentenceBlockRow r{a.sent_idx[i], {i, j}, ng, gists_before, 0};
        for (std::uint32_t q = i; q < j; ++q)
            for (std::uint32_t k = 0; k <= q; ++k) r.allowed_pairs += m.allowed(q, k);
        rows.push_back(r);
        gists_before += ng;
        i = j;
    }
    return rows;
}

}  // namespace gist
