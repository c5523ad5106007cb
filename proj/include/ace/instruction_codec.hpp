#pragma once

// Text side of the model input: a hash-bucket vocabulary with reserved indicator tokens,
// and a frozen embedding table that stands in for a pretrained text encoder. The table rows
// of the reserved "{imageK}" tokens double as the image indicator embeddings.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace ace {

inline constexpr int kDefaultVocabSize = 4096;
inline constexpr int kDefaultMaxTextTokens = 120;
inline constexpr std::uint64_t kDefaultHashSeed = 0x5eed'ace0'0000'0001ULL;

struct VocabularyConfig {
    int size = kDefaultVocabSize;
    int max_text_tokens = kDefaultMaxTextTokens;
    int max_image_number = 9;
    std::uint64_t hash_seed = kDefaultHashSeed;
};

/// Reserved ids: 0 "<pad>", 1 "<unk>", 2 "{image}", 3.. "{image1}".."{imageN}", then "{target}".
class Vocabulary {
public:
    explicit Vocabulary(VocabularyConfig config = {});

    const VocabularyConfig& config() const { return config_; }
    int size() const { return config_.size; }
    int pad_id() const { return 0; }
    int unk_id() const { return 1; }
    int generic_image_id() const { return 2; }
    /// Reserved id of "{imageK}", 1 <= k <= max_image_number.
    int indicator_id(int k) const;
    int target_id() const { return 3 + config_.max_image_number; }
    int reserved_count() const { return 4 + config_.max_image_number; }
    const std::vector<std::string>& reserved_tokens() const { return reserved_; }

    /// Id for one already-split token.
    int token_id(std::string_view token) const;
    /// Lowercases, splits on whitespace and punctuation, keeps "{...}" reserved tokens whole,
    /// and truncates to max_text_tokens at the tail.
    std::vector<int> tokenize(std::string_view text) const;

    /// Manifest: one "key = value" per line plus the reserved token list.
    std::string manifest() const;
    static Vocabulary from_manifest(std::string_view text);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.config_.size == b.config_.size && a.config_.max_text_tokens == b.config_.max_text_tokens &&
               a.config_.max_image_number == b.config_.max_image_number &&
               a.config_.hash_seed == b.config_.hash_seed;
    }

private:
    VocabularyConfig config_;
    std::vector<std::string> reserved_;
};

/// Splits into lowercase word tokens; exposed for tests.
std::vector<std::string> split_words(std::string_view text);

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// Frozen token embedding table (vocab x width). Rows are seeded N(0, 1/width) draws, so
/// each row has roughly unit norm. The pad row is all zeros.
template <typename S>
class TextEncoder {
public:
    TextEncoder(const Vocabulary& vocab, int width, std::uint64_t seed);
    TextEncoder(const Vocabulary& vocab, RowMatrix<S> table);

    const Vocabulary& vocabulary() const { return vocab_; }
    int width() const { return static_cast<int>(table_.cols()); }
    const RowMatrix<S>& table() const { return table_; }

    /// One row per id. An empty sequence encodes as a single pad row so every frame has
    /// at least one key in cross-attention. Throws std::out_of_range on bad ids.
    RowMatrix<S> encode(const std::vector<int>& ids) const;
    /// Row of "{imageK}".
    RowVector<S> indicator_embedding(int k) const;
    RowVector<S> target_embedding() const;

private:
    Vocabulary vocab_;
    RowMatrix<S> table_;
};

extern template class TextEncoder<float>;
extern template class TextEncoder<double>;

}  // namespace ace
