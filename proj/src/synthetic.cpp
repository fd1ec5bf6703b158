#include "gist/synthetic.hpp"

#include <random>

#include "gist/common.hpp"

namespace gist {

std::vector<std::string> synthetic_lexicon(std::uint32_t size) {
    static constexpr char kOnset[] = "bdfgklmnprstvz";
    static constexpr char kVowel[] = "aeiou";
    std::vector<std::string> words;
    for (std::size_t i = 0; words.size() < size; ++i) {
        const std::size_t o = i % 14, v = (i / 14) % 5, c = (i / 70) % 14;
        if (i >= 14 * 5 * 14) throw Error("lexicon size too large");
        words.push_back(std::string{kOnset[o], kVowel[v], kOnset[c]});
    }
    return words;
}

std::vector<std::string> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
    const auto lex = synthetic_lexicon(cfg.lexicon_size);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::string> docs;
    std::vector<std::size_t> picks(cfg.words_per_sentence);
    for (std::uint32_t d = 0; d < cfg.documents; ++d) {
        std::string text;
        for (std::uint32_t e = 0; e < cfg.episodes_per_document; ++e) {
            for (auto& p : picks) p = static_cast<std::size_t>(rng() % lex.size());
            for (const char* lead : {"say", "so"}) {
                if (!text.empty()) text += ' ';
                text += lead;
                for (auto p : picks) text += ' ' + lex[p];
                text += '.';
            }
        }
        docs.push_back(std::move(text));
    }
    return docs;
}

}  // namespace gist
