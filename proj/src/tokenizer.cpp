#include "gist/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace gist {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace {

constexpr std::string_view kSentenceEnders[] = {".", "!", "?"};

bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }
bool is_ascii_space(unsigned char c) { return c < 128 && std::isspace(c); }

// Byte surfaces must be valid UTF-8 for JSON, so non-printable bytes use the
// <0xHH> spelling.
std::string byte_surface(unsigned b) {
    if (b >= 0x20 && b < 0x7f) return std::string(1, static_cast<char>(b));
    char buf[8];
    std::snprintf(buf, sizeof buf, "<0x%02X>", b);
    return buf;
}

}  // namespace

std::string_view to_string(TokenizerScheme s) {
    return s == TokenizerScheme::Byte ? "byte" : "word";
}

TokenizerScheme scheme_from_string(std::string_view s) {
    if (s == "byte") return TokenizerScheme::Byte;
    if (s == "word") return TokenizerScheme::Word;
    throw Error("unknown tokenizer scheme: " + std::string(s));
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto is_word_char = [](unsigned char c) {
        return !is_ascii_space(c) && !is_ascii_punct(c);
    };
    while (i < n) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (is_ascii_punct(c)) {
            out.emplace_back(1, text[i]);
            ++i;
        } else if (c == ' ' && i + 1 < n && is_word_char(static_cast<unsigned char>(text[i + 1]))) {
            std::size_t j = i + 1;
            while (j < n && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
            out.emplace_back(text.substr(i, j - i));
            i = j;
        } else if (is_ascii_space(c)) {
            std::size_t j = i;
            // stop before a space that would prefix the next word
            while (j < n && is_ascii_space(static_cast<unsigned char>(text[j]))) {
                if (text[j] == ' ' && j > i && j + 1 < n &&
                    is_word_char(static_cast<unsigned char>(text[j + 1])))
                    break;
                ++j;
            }
            out.emplace_back(text.substr(i, j - i));
            i = j;
        } else {
            std::size_t j = i;
            while (j < n && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
            out.emplace_back(text.substr(i, j - i));
            i = j;
        }
    }
    return out;
}

void Vocab::index() {
    lookup_.clear();
    for (TokenId id = 0; id < surfaces_.size(); ++id) lookup_.emplace(surfaces_[id], id);
    punct_ids_.clear();
    for (auto p : kSentenceEnders) {
        auto it = lookup_.find(std::string(p));
        if (it != lookup_.end() && !is_gist(it->second)) punct_ids_.push_back(it->second);
    }
    std::sort(punct_ids_.begin(), punct_ids_.end());
}

Vocab build_vocab(std::span<const std::string> texts, TokenizerScheme scheme) {
    bool any = std::any_of(texts.begin(), texts.end(), [](const auto& t) { return !t.empty(); });
    if (!any) throw Error("empty corpus");

    Vocab v;
    v.scheme_ = scheme;
    if (scheme == TokenizerScheme::Byte) {
        for (unsigned b = 0; b < 256; ++b) v.surfaces_.push_back(byte_surface(b));
        v.special_.bos = 256;
        v.special_.eos = 257;
        v.special_.pad = 258;
        v.surfaces_.insert(v.surfaces_.end(), {"<bos>", "<eos>", "<pad>"});
    } else {
        v.surfaces_ = {"<bos>", "<eos>", "<pad>", "<unk>"};
        v.special_ = {0, 1, 2, TokenId{3}};
        std::set<std::string> pieces(std::begin(kSentenceEnders), std::end(kSentenceEnders));
        for (const auto& t : texts)
            for (auto& p : split_words(t)) pieces.insert(std::move(p));
        for (const auto& s : {"<bos>", "<eos>", "<pad>", "<unk>"}) pieces.erase(s);
        v.surfaces_.insert(v.surfaces_.end(), pieces.begin(), pieces.end());
    }
    v.gist_first_ = static_cast<TokenId>(v.surfaces_.size());
    v.gist_count_ = 0;
    v.index();
    return v;
}

TokenId Vocab::gist_id(std::size_t k) const {
    if (k < 1 || k > gist_count_) throw Error("gist index out of range");
    return gist_first_ + static_cast<TokenId>(k - 1);
}

bool Vocab::is_punct(TokenId id) const {
    return std::binary_search(punct_ids_.begin(), punct_ids_.end(), id);
}

std::optional<TokenId> Vocab::find(std::string_view surface) const {
    auto it = lookup_.find(std::string(surface));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

Vocab Vocab::with_gists(std::size_t n_g) const {
    Vocab v = *this;
    v.surfaces_.resize(gist_first_);
    for (std::size_t k = 1; k <= n_g; ++k) v.surfaces_.push_back("<g" + std::to_string(k) + ">");
    v.gist_count_ = n_g;
    v.index();
    return v;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    if (scheme_ == TokenizerScheme::Byte) {
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(c);
        return ids;
    }
    for (const auto& piece : split_words(text)) {
        auto it = lookup_.find(piece);
        ids.push_back(it != lookup_.end() && !is_gist(it->second) ? it->second : *special_.unk);
    }
    return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id >= surfaces_.size()) throw Error("token id out of range: " + std::to_string(id));
        if (scheme_ == TokenizerScheme::Byte && id < 256)
            out.push_back(static_cast<char>(id));
        else
            out += surfaces_[id];
    }
    return out;
}

nlohmann::json Vocab::to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (TokenId id = 0; id < surfaces_.size(); ++id) entries.push_back({surfaces_[id], id});
    nlohmann::json special = {{"bos", special_.bos}, {"eos", special_.eos}, {"pad", special_.pad}};
    if (special_.unk) special["unk"] = *special_.unk;
    return {{"schema", 1},
            {"scheme", to_string(scheme_)},
            {"entries", std::move(entries)},
            {"special", std::move(special)},
            {"gist", {gist_first_, gist_count_}},
            {"punct", punct_ids_}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
    Vocab v;
    v.scheme_ = scheme_from_string(j.at("scheme").get<std::string>());
    const auto& entries = j.at("entries");
    v.surfaces_.resize(entries.size());
    for (const auto& e : entries) {
        auto id = e.at(1).get<TokenId>();
        if (id >= v.surfaces_.size()) throw Error("vocab ids are not dense");
        v.surfaces_[id] = e.at(0).get<std::string>();
    }
    const auto& sp = j.at("special");
    v.special_.bos = sp.at("bos").get<TokenId>();
    v.special_.eos = sp.at("eos").get<TokenId>();
    v.special_.pad = sp.at("pad").get<TokenId>();
    if (sp.contains("unk")) v.special_.unk = sp.at("unk").get<TokenId>();
    v.gist_first_ = j.at("gist").at(0).get<TokenId>();
    v.gist_count_ = j.at("gist").at(1).get<std::size_t>();
    if (v.gist_first_ + v.gist_count_ != v.surfaces_.size())
        throw Error("gist ids must occupy the top of the vocab");
    v.index();
    return v;
}

std::uint64_t Vocab::hash() const { return fnv1a64(to_json().dump()); }

std::string add_label_period(std::string_view text) {
    std::string out;
    out.reserve(text.size() + 16);
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        bool has_nl = nl != std::string_view::npos;
        std::string_view line = text.substr(pos, has_nl ? nl - pos : std::string_view::npos);
        out += line;
        // "label: <token>" with a single non-space token after the colon
        constexpr std::string_view prefix = "label: ";
        if (line.starts_with(prefix)) {
            auto rest = line.substr(prefix.size());
            bool single_token = !rest.empty() &&
                std::none_of(rest.begin(), rest.end(),
                             [](unsigned char c) { return std::isspace(c); });
            if (single_token && !rest.ends_with('.')) out += '.';
        }
        if (!has_nl) break;
        out += '\n';
        pos = nl + 1;
    }
    return out;
}

std::vector<std::pair<std::filesystem::path, std::string>> read_text_dir(
    const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw Error("corpus directory not found: " + dir.string());
    std::vector<fs::path> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".txt") paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    std::vector<std::pair<fs::path, std::string>> docs;
    for (const auto& p : paths) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        docs.emplace_back(p, ss.str());
    }
    return docs;
}

Corpus encode_corpus(const Vocab& vocab,
                     const std::vector<std::pair<std::filesystem::path, std::string>>& docs) {
    Corpus c;
    for (const auto& [path, text] : docs) {
        c.documents.push_back(vocab.encode(text));
        c.sources.push_back(path);
        c.total_token_count += c.documents.back().size();
    }
    return c;
}

}  // namespace gist
