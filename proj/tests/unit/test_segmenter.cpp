#include <filesystem>
#include <random>

#include "doctest.h"

#include "gist/segmenter.hpp"
#include "gist/tokenizer.hpp"

using namespace gist;
namespace fs = std::filesystem;

namespace {

const std::string kExample = "The sun was shining brightly. Birds were singing in the forest.";

Vocab word_vocab(const std::string& text, std::size_t n_g) {
    return build_vocab(std::vector<std::string>{text}, TokenizerScheme::Word).with_gists(n_g);
}

}  // namespace

TEST_CASE("processing example") {
    auto v = word_vocab(kExample, 2);
    auto raw = v.encode(kExample);
    REQUIRE(raw.size() == 13);
    auto a = segment(raw, v, 2);
    REQUIRE(a.size() == 17);
    std::string shown;
    for (auto id : a.ids) shown += v.surface(id);
    CHECK(shown == "The sun was shining brightly.<g1><g2> Birds were singing in the forest.<g1><g2>");
    CHECK(a.roles[6] == 1);
    CHECK(a.roles[7] == 2);
    CHECK(a.sent_idx[7] == 0);
    CHECK(a.sent_idx[8] == 1);
    CHECK(!a.open_tail);
    CHECK(a.closed_sentences() == 2);
    CHECK(strip_gists(a) == raw);
    CHECK(count_tokens(a) == TokenCounts{13, 4});
    CHECK_NOTHROW(validate(a, v));
}

TEST_CASE("edge cases") {
    auto v = build_vocab(std::vector<std::string>{"a b c Hi!!"}, TokenizerScheme::Byte).with_gists(4);
    SUBCASE("empty") {
        auto a = segment({}, v, 2);
        CHECK(a.size() == 0);
        CHECK(!a.open_tail);
        CHECK(strip_gists(a).empty());
        CHECK(count_tokens(a) == TokenCounts{0, 0});
    }
    SUBCASE("no punctuation") {
        auto a = segment(v.encode("a b c"), v, 4);
        CHECK(count_tokens(a).n_gist == 0);
        CHECK(a.open_tail);
        for (auto s : a.sent_idx) CHECK(s == 0);
    }
    SUBCASE("consecutive punctuation") {
        auto a = segment(v.encode("Hi!!"), v, 1);
        CHECK(a.size() == 6);
        CHECK(count_tokens(a).n_gist == 2);
        CHECK(a.sent_idx == std::vector<std::uint32_t>{0, 0, 0, 0, 1, 1});
        CHECK(!a.open_tail);
    }
    SUBCASE("errors") {
        CHECK_THROWS_WITH(segment(v.encode("a."), v, 0), "n_g must be at least 1");
        CHECK_THROWS_WITH(segment(v.encode("a."), v, 5), "vocab has fewer gist ids than n_g");
        std::vector<TokenId> bad{'a', v.gist_id(1)};
        CHECK_THROWS_WITH(segment(bad, v, 1), "gist id in raw input");
    }
}

TEST_CASE("random round trips and structural invariants") {
    auto v = build_vocab(std::vector<std::string>{"x"}, TokenizerScheme::Byte).with_gists(8);
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> len(0, 200), byte(0, 255), pick(0, 9);
    for (int i = 0; i < 500; ++i) {
        std::vector<TokenId> raw(static_cast<std::size_t>(len(rng)));
        std::size_t puncts = 0;
        for (auto& t : raw) {
            t = pick(rng) == 0 ? TokenId('.') : static_cast<TokenId>(byte(rng));
            puncts += v.is_punct(t);
        }
        for (std::uint32_t n_g : {1u, 2u, 4u, 8u}) {
            auto a = segment(raw, v, n_g);
            REQUIRE(strip_gists(a) == raw);
            REQUIRE(a.size() == raw.size() + n_g * puncts);
            REQUIRE(count_tokens(a).n_gist == n_g * puncts);
            REQUIRE(count_tokens(a).n_gist == n_g * count_tokens(segment(raw, v, 1)).n_gist);
            REQUIRE(a.open_tail == (!raw.empty() && !v.is_punct(raw.back())));
            REQUIRE_NOTHROW(validate(a, v));
        }
    }
}

TEST_CASE("validate catches broken sequences") {
    auto v = build_vocab(std::vector<std::string>{"ab."}, TokenizerScheme::Byte).with_gists(2);
    auto good = segment(v.encode("ab.ab"), v, 2);
    auto a = good;
    a.sent_idx[5] = 0;
    CHECK_THROWS_AS(validate(a, v), Error);
    a = good;
    a.roles[3] = 2;
    CHECK_THROWS_AS(validate(a, v), Error);
    a = good;
    a.ids[0] = v.gist_id(1);
    CHECK_THROWS_AS(validate(a, v), Error);
}

TEST_CASE("sentence windows") {
    auto v = build_vocab(std::vector<std::string>{"ab. cde. f"}, TokenizerScheme::Byte).with_gists(1);
    auto doc = segment(v.encode("ab. cde. fg"), v, 1);
    // Sentences (with gists): "ab.g" 4, " cde.g" 6, " fg" 3.
    auto w = split_at_sentences(doc, 10);
    REQUIRE(w.size() == 2);
    CHECK(w[0].size() == 10);
    CHECK(w[1].size() == 3);
    CHECK(w[1].sent_idx.front() == 0);
    CHECK(w[1].open_tail);
    CHECK(!w[0].open_tail);

    auto t = split_at_sentences(doc, 5);
    REQUIRE(t.size() == 3);
    CHECK(t[1].size() == 5);  // truncated sentence
    for (const auto& x : t) CHECK(x.size() <= 5);

    auto p = prefix(doc, 3);
    CHECK(p.size() == 3);
    CHECK(p.open_tail);
    CHECK(!prefix(doc, 4).open_tail);
}

TEST_CASE("shard round trip") {
    auto v = build_vocab(std::vector<std::string>{"Hi. Go!"}, TokenizerScheme::Byte).with_gists(2);
    Shard s;
    s.n_g = 2;
    s.vocab_hash = hex64(v.hash());
    s.documents = {segment(v.encode("Hi. Go!"), v, 2), segment(v.encode("tail"), v, 2), segment({}, v, 2)};
    const fs::path path = fs::temp_directory_path() / "gist_test.shard";
    write_shard(path, s);
    auto r = read_shard(path);
    CHECK(r.n_g == 2);
    CHECK(r.vocab_hash == s.vocab_hash);
    REQUIRE(r.documents.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(r.documents[i].ids == s.documents[i].ids);
        CHECK(r.documents[i].roles == s.documents[i].roles);
        CHECK(r.documents[i].sent_idx == s.documents[i].sent_idx);
        CHECK(r.documents[i].open_tail == s.documents[i].open_tail);
    }
    CHECK(fs::file_size(path) > 9 * 15);
    fs::remove(path);
    CHECK_THROWS_AS(read_shard(path), Error);
}
