#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "gist/common.hpp"

namespace gist {

enum class TokenizerScheme { Byte, Word };

std::string_view to_string(TokenizerScheme s);
TokenizerScheme scheme_from_string(std::string_view s);

struct SpecialIds {
    TokenId bos = 0;
    TokenId eos = 0;
    TokenId pad = 0;
    std::optional<TokenId> unk;  // word scheme only
};

// Immutable token vocabulary. Ids are dense in [0, size()). Gist ids, once
// reserved with with_gists(), occupy the top gist_count() ids.
class Vocab {
public:
    TokenizerScheme scheme() const { return scheme_; }
    std::size_t size() const { return surfaces_.size(); }
    std::size_t base_size() const { return gist_first_; }

    const SpecialIds& special() const { return special_; }
    TokenId gist_first() const { return gist_first_; }
    std::size_t gist_count() const { return gist_count_; }
    TokenId gist_id(std::size_t k) const;  // k in [1, gist_count()]
    bool is_gist(TokenId id) const {
        return id >= gist_first_ && id < gist_first_ + gist_count_;
    }

    const std::vector<TokenId>& punct_ids() const { return punct_ids_; }
    bool is_punct(TokenId id) const;

    const std::string& surface(TokenId id) const { return surfaces_.at(id); }
    std::optional<TokenId> find(std::string_view surface) const;

    // Copy of this vocab with n_g gist tokens "<g1>".."<gN>" appended on top of
    // the base ids. Any previously reserved gists are replaced.
    Vocab with_gists(std::size_t n_g) const;

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

    nlohmann::json to_json() const;
    static Vocab from_json(const nlohmann::json& j);
    std::uint64_t hash() const;

    friend Vocab build_vocab(std::span<const std::string> texts, TokenizerScheme scheme);

private:
    void index();

    TokenizerScheme scheme_ = TokenizerScheme::Byte;
    std::vector<std::string> surfaces_;
    std::unordered_map<std::string, TokenId> lookup_;
    SpecialIds special_;
    TokenId gist_first_ = 0;
    std::size_t gist_count_ = 0;
    std::vector<TokenId> punct_ids_;
};

// Byte scheme: one id per byte value (256) plus <bos>, <eos>, <pad>.
// Word scheme: pieces from split_words() over all texts, sorted, plus specials
// and <unk>. Sentence-ending punctuation is always present in either scheme.
Vocab build_vocab(std::span<const std::string> texts, TokenizerScheme scheme);

// Word-scheme pre-tokenizer. A single space preceding a word is glued to it so
// that concatenating the pieces reproduces the input exactly. Every ASCII
// punctuation character is a piece of its own; other whitespace runs are
// standalone pieces.
std::vector<std::string> split_words(std::string_view text);

// Appends "." to every line of the form "label: <token>" that does not already
// end with it.
std::string add_label_period(std::string_view template_text);

struct Corpus {
    std::vector<std::vector<TokenId>> documents;
    std::vector<std::filesystem::path> sources;
    std::size_t total_token_count = 0;
};

// Reads every *.txt under dir (non-recursive), sorted by path.
std::vector<std::pair<std::filesystem::path, std::string>> read_text_dir(
    const std::filesystem::path& dir);

Corpus encode_corpus(const Vocab& vocab,
                     const std::vector<std::pair<std::filesystem::path, std::string>>& docs);

}  // namespace gist
