#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gist {

using TokenId = std::uint32_t;

// All recoverable failures in the library are reported with this type so the
// CLI can map them to a runtime-failure exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// FNV-1a, 64 bit. Used for vocab and config fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v);

}  // namespace gist
