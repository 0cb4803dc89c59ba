#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "ctta/model.hpp"

namespace ctta {

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

struct Checkpoint {
    Model model;
    std::string method;  // pretraining method tag
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
};

// Binary container: magic, format version, JSON header (architecture, method,
// seed, config hash, array lengths), then little-endian float64 bodies in
// canonical order. Serialization is byte-deterministic.
std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ctta
