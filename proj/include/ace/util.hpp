#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ace {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws std::invalid_argument on characters outside the standard alphabet or bad padding.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// 64-bit FNV-1a. Stable across platforms; used for vocabulary buckets and config hashes.
std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t v);

/// Derives an independent stream seed from a base seed and a list of integer keys (splitmix64 mixing).
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys);

using Rng = std::mt19937_64;

/// Standard normal draw via Box-Muller on raw engine output, so the stream is identical across
/// standard library implementations.
double normal_draw(Rng& rng);
/// Uniform double in [0,1).
double uniform_draw(Rng& rng);
/// Uniform integer in [0, n).
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

}  // namespace ace
