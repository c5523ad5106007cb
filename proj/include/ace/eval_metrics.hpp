#pragma once

// Evaluation kernels: pixel distances, embedding similarities, the face effective score and
// OCR-style text metrics. Embedders are pluggable; the toy ones need no pretrained weights.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ace/image.hpp"

namespace ace::eval {

struct PixelDistances {
    double l1 = 0.0;  // mean |a - b|
    double l2 = 0.0;  // mean (a - b)^2
};

/// Throws std::invalid_argument on shape mismatch.
PixelDistances pixel_distances(const Image& a, const Image& b);

using Embedding = std::vector<double>;

double cosine_similarity(std::span<const double> a, std::span<const double> b);

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string name() const = 0;
    /// Unit-norm outputs; image and text embeddings share one space.
    virtual Embedding embed_image(const Image& image) const = 0;
    virtual Embedding embed_text(std::string_view text) const = 0;
};

/// Images: 4x4 average pool of the centered RGB values (48 dims). Text: 48 hashed word
/// buckets. Both carry one constant extra component so no input embeds to zero.
class ToyEmbedder final : public Embedder {
public:
    static constexpr int kGrid = 4;
    static constexpr int kDims = kGrid * kGrid * 3 + 1;

    std::string name() const override { return "toy"; }
    Embedding embed_image(const Image& image) const override;
    Embedding embed_text(std::string_view text) const override;
};

double embedding_similarity(const Image& a, const Image& b, const Embedder& embedder);

/// Cosine between the image edit direction and the caption edit direction; nullopt when either
/// direction is zero.
std::optional<double> direction_similarity(const Image& src, const Image& out, std::string_view src_text,
                                           std::string_view out_text, const Embedder& embedder);
std::optional<double> direction_similarity(std::span<const double> image_delta, std::span<const double> text_delta);

struct EffectiveScore {
    double mean_score = 0.0;
    double threshold = 0.0;
    double es = 0.0;  // fraction of scores strictly above threshold
};

/// Threshold = mean - std of the reference distribution. Throws on empty input.
EffectiveScore face_similarity_es(std::span<const double> scores, double mean, double std);

/// Byte-level edit distance.
int levenshtein(std::string_view a, std::string_view b);

struct TextScores {
    double sentence_accuracy = 0.0;
    double ned = 0.0;  // 1 - lev / max length; higher is better
};

/// Line by line; missing lines count as empty. Empty against empty scores 1.
TextScores text_metrics(std::string_view predicted, std::string_view reference);

struct SampleMetrics {
    std::string sample;
    std::string category;
    double l1 = 0.0;
    double l2 = 0.0;
    double image_similarity = 0.0;
    std::optional<double> direction_similarity;
};

struct MetricReport {
    std::vector<SampleMetrics> rows;

    /// Arithmetic means; undefined direction values are skipped.
    SampleMetrics mean(const std::string& category = {}) const;
    std::vector<std::string> categories() const;
    /// Columns: sample,category,l1,l2,image_similarity,direction_similarity. Per-category
    /// "mean" rows follow the samples, then the overall mean row.
    std::string to_csv() const;
};

struct EvalInputs {
    std::filesystem::path pred_dir;
    std::filesystem::path ref_dir;
    std::optional<std::filesystem::path> src_dir;       // enables direction similarity
    std::optional<std::filesystem::path> captions;      // "<sample>\t<source caption>\t<edited caption>" lines
};

/// Pairs prediction/reference images by file stem. The category is the stem up to its last '-'.
MetricReport evaluate_dirs(const EvalInputs& inputs, const Embedder& embedder);

}  // namespace ace::eval
