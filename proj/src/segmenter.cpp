#include "gist/segmenter.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace gist {

static_assert(std::endian::native == std::endian::little, "shard IO assumes a little-endian host");

AnnotatedSequence segment(std::span<const TokenId> raw, const Vocab& vocab, std::uint32_t n_g) {
    if (n_g < 1) throw Error("n_g must be at least 1");
    if (vocab.gist_count() < n_g) throw Error("vocab has fewer gist ids than n_g");

    AnnotatedSequence a;
    a.n_g = n_g;
    std::size_t n_punct = 0;
    for (TokenId id : raw) {
        if (vocab.is_gist(id)) throw Error("gist id in raw input");
        n_punct += vocab.is_punct(id);
    }
    const std::size_t len = raw.size() + n_g * n_punct;
    a.ids.reserve(len);
    a.roles.reserve(len);
    a.sent_idx.reserve(len);

    std::uint32_t sentence = 0;
    for (TokenId id : raw) {
        a.ids.push_back(id);
        a.roles.push_back(kRegular);
        a.sent_idx.push_back(sentence);
        if (!vocab.is_punct(id)) continue;
        for (std::uint32_t k = 1; k <= n_g; ++k) {
            a.ids.push_back(vocab.gist_id(k));
            a.roles.push_back(static_cast<Role>(k));
            a.sent_idx.push_back(sentence);
        }
        ++sentence;
    }
    a.open_tail = !raw.empty() && !vocab.is_punct(raw.back());
    return a;
}

std::vector<TokenId> strip_gists(const AnnotatedSequence& a) {
    std::vector<TokenId> out;
    out.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!a.is_gist(i)) out.push_back(a.ids[i]);
    return out;
}

TokenCounts count_tokens(const AnnotatedSequence& a) {
    TokenCounts c;
    for (Role r : a.roles) (r == kRegular ? c.n_regular : c.n_gist)++;
    return c;
}

void validate(const AnnotatedSequence& a, const Vocab& vocab) {
    const std::size_t n = a.size();
    if (a.roles.size() != n || a.sent_idx.size() != n) throw Error("annotation length mismatch");
    if (n == 0) {
        if (a.open_tail) throw Error("empty sequence cannot have an open tail");
        return;
    }
    if (a.sent_idx[0] != 0) throw Error("first sentence index must be 0");
    for (std::size_t i = 0; i < n; ++i) {
        const Role r = a.roles[i];
        if (r > a.n_g) throw Error("gist role exceeds n_g");
        if (r == kRegular) {
            if (vocab.is_gist(a.ids[i])) throw Error("regular position carries a gist id");
        } else {
            if (a.ids[i] != vocab.gist_id(r)) throw Error("gist role does not match id");
            const bool run_ok = r == 1 ? (i > 0 && a.roles[i - 1] == kRegular && vocab.is_punct(a.ids[i - 1]))
                                       : (i > 0 && a.roles[i - 1] == r - 1);
            if (!run_ok) throw Error("malformed gist run at position " + std::to_string(i));
        }
        if (i > 0) {
            const bool after_run_end = a.roles[i - 1] == a.n_g;
            const auto expect = a.sent_idx[i - 1] + (after_run_end ? 1 : 0);
            if (a.sent_idx[i] != expect) throw Error("sentence index out of sequence at " + std::to_string(i));
        }
        if (r == kRegular && vocab.is_punct(a.ids[i]) &&
            (i + 1 >= n || a.roles[i + 1] != 1))
            throw Error("punctuation not followed by a gist run at " + std::to_string(i));
    }
    const bool tail_open = a.roles.back() != a.n_g;
    if (tail_open != a.open_tail) throw Error("open_tail flag inconsistent");
}

AnnotatedSequence prefix(const AnnotatedSequence& a, std::size_t len) {
    len = std::min(len, a.size());
    AnnotatedSequence p;
    p.n_g = a.n_g;
    p.ids.assign(a.ids.begin(), a.ids.begin() + len);
    p.roles.assign(a.roles.begin(), a.roles.begin() + len);
    p.sent_idx.assign(a.sent_idx.begin(), a.sent_idx.begin() + len);
    p.open_tail = len > 0 && p.roles.back() != a.n_g;
    return p;
}

std::vector<AnnotatedSequence> split_at_sentences(const AnnotatedSequence& doc, std::size_t max_len) {
    if (max_len == 0) throw Error("max_len must be positive");
    std::vector<AnnotatedSequence> out;
    AnnotatedSequence cur;
    cur.n_g = doc.n_g;
    auto flush = [&] {
        if (cur.ids.empty()) return;
        cur.open_tail = cur.roles.back() != doc.n_g;
        out.push_back(std::move(cur));
        cur = AnnotatedSequence{};
        cur.n_g = doc.n_g;
    };
    std::size_t i = 0;
    while (i < doc.size()) {
        std::size_t j = i;
        while (j < doc.size() && doc.sent_idx[j] == doc.sent_idx[i]) ++j;
        std::size_t len = j - i;
        if (cur.size() + len > max_len) flush();
        len = std::min(len, max_len);
        const std::uint32_t s = cur.ids.empty() ? 0 : cur.sent_idx.back() + 1;
        for (std::size_t k = i; k < i + len; ++k) {
            cur.ids.push_back(doc.ids[k]);
            cur.roles.push_back(doc.roles[k]);
            cur.sent_idx.push_back(s);
        }
        i = j;
    }
    flush();
    return out;
}

namespace {

constexpr std::array<char, 8> kShardMagic = {'G', 'I', 'S', 'T', 'S', 'H', 'D', '1'};
constexpr std::size_t kTripleBytes = 9;

}  // namespace

void write_shard(const std::filesystem::path& path, const Shard& shard) {
    std::vector<std::uint64_t> offsets{0};
    for (const auto& d : shard.documents) offsets.push_back(offsets.back() + d.size());
    nlohmann::json header = {{"schema", 1},
                             {"n_g", shard.n_g},
                             {"vocab_hash", shard.vocab_hash},
                             {"doc_offsets", offsets}};
    if (!shard.config_hash.empty()) header["config_hash"] = shard.config_hash;
    const std::string h = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write shard: " + path.string());
    out.write(kShardMagic.data(), kShardMagic.size());
    const std::uint64_t hlen = h.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    std::vector<char> buf;
    for (const auto& d : shard.documents) {
        buf.resize(d.size() * kTripleBytes);
        char* p = buf.data();
        for (std::size_t i = 0; i < d.size(); ++i, p += kTripleBytes) {
            std::memcpy(p, &d.ids[i], 4);
            p[4] = static_cast<char>(d.roles[i]);
            std::memcpy(p + 5, &d.sent_idx[i], 4);
        }
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw Error("short write on shard: " + path.string());
}

Shard read_shard(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open shard: " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (magic != kShardMagic) throw Error("not a shard file: " + path.string());
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    std::string h(hlen, '\0');
    in.read(h.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw Error("truncated shard header");
    auto header = nlohmann::json::parse(h);
    Shard s;
    s.n_g = header.at("n_g").get<std::uint32_t>();
    s.vocab_hash = header.at("vocab_hash").get<std::string>();
    s.config_hash = header.value("config_hash", std::string());
    auto offsets = header.at("doc_offsets").get<std::vector<std::uint64_t>>();
    std::vector<char> buf;
    for (std::size_t d = 0; d + 1 < offsets.size(); ++d) {
        const std::size_t n = offsets[d + 1] - offsets[d];
        buf.resize(n * kTripleBytes);
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!in) throw Error("truncated shard body");
        AnnotatedSequence a;
        a.n_g = s.n_g;
        a.ids.resize(n);
        a.roles.resize(n);
        a.sent_idx.resize(n);
        const char* p = buf.data();
        for (std::size_t i = 0; i < n; ++i, p += kTripleBytes) {
            std::memcpy(&a.ids[i], p, 4);
            a.roles[i] = static_cast<Role>(p[4]);
            std::memcpy(&a.sent_idx[i], p + 5, 4);
        }
        a.open_tail = n > 0 && a.roles.back() != s.n_g;
        s.documents.push_back(std::move(a));
    }
    return s;
}

}  // namespace gist
