#pragma once

// Visual side of the model input. The latent codec is a lossless space-to-depth rearrangement
// (factor f), masks are max-pooled to latent resolution, and latent+mask stacks are cut into
// p x p patches that become 1-D token sequences.

#include <stdexcept>
#include <vector>

#include "ace/image.hpp"
#include "ace/instruction_codec.hpp"

namespace ace {

inline constexpr int kDefaultCodecFactor = 2;
inline constexpr int kDefaultPatchSize = 2;
inline constexpr int kDefaultVisualCap = 1024;
inline constexpr int kExtendedVisualCap = 4096;

class CodecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class VisualCapError : public CodecError {
public:
    using CodecError::CodecError;
};

/// Latent grid: h x w x (C * f * f), channel index c * f * f + dy * f + dx.
Image encode_latent(const Image& image, int factor = kDefaultCodecFactor);
Image decode_latent(const Image& latent, int factor = kDefaultCodecFactor);

/// Each latent cell is the max over its f x f block.
Image downsample_mask(const Image& mask, int factor = kDefaultCodecFactor);

/// Channel concatenation (latent channels first, then mask channels).
Image concat_channels(const Image& a, const Image& b);

struct VisualTokens {
    RowMatrix<float> values;  // token count x (channels * patch * patch)
    int grid_rows = 0;        // patches per column
    int grid_cols = 0;        // patches per row
    int patch = 0;
    int channels = 0;         // channels of the stack that was patchified

    int count() const { return static_cast<int>(values.rows()); }
    int row_of(int token) const { return token / grid_cols; }
    int col_of(int token) const { return token % grid_cols; }
};

/// Row-major patch order; each token is laid out channel-major as [c][py][px].
VisualTokens patchify(const Image& stack, int patch = kDefaultPatchSize);
Image unpatchify(const VisualTokens& tokens);

/// Throws VisualCapError when `total_tokens` exceeds `cap`.
void check_visual_cap(long total_tokens, long cap);

/// Tokens per frame for an H x W image.
int tokens_per_frame(int height, int width, int factor = kDefaultCodecFactor, int patch = kDefaultPatchSize);

}  // namespace ace
