#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gist {

// Recall corpus: each document is a run of episodes, and an episode is a
// sentence of random lexicon words followed by a sentence repeating them.
//
//   "say kel mon ... . so kel mon ... . say ..."
//
// The repeat is only predictable from the earlier sentence, which under
// sentence attention is reachable through its gist tokens alone.
struct SyntheticCorpusConfig {
    std::uint32_t documents = 100;
    std::uint32_t episodes_per_document = 10;
    std::uint32_t words_per_sentence = 8;
    std::uint32_t lexicon_size = 24;
    std::uint64_t seed = 0;
};

std::vector<std::string> synthetic_lexicon(std::uint32_t size);
std::vector<std::string> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg);

}  // namespace gist
