#pragma once

#include <vector>

#include "ace/condition_unit.hpp"
#include "ace/instruction_codec.hpp"
#include "ace/visual_codec.hpp"

namespace ace {

struct ContextOptions {
    int codec_factor = kDefaultCodecFactor;
    int patch = kDefaultPatchSize;
    int visual_cap = kDefaultVisualCap;
    int max_image_number = kDefaultMaxImageNumber;
};

/// One frame of the long-context visual sequence.
struct ContextFrame {
    int unit = 0;         // m: index of the CU inside the LCU
    int frame = 0;        // n: index of the frame inside its CU
    int indicator = 0;    // global indicator id; 0 marks the target placeholder
    int frame_coord = 0;  // frame axis of the 3-D rotary position
    bool is_target = false;
    VisualTokens tokens;  // latent channels rescaled to [-1,1], then the mask channel
};

struct TokenIndex {
    int unit = 0;
    int frame = 0;
    int patch = 0;
};

/// Token sequences for one request: per-unit text ids (indicators globalized) and the
/// concatenated visual frames, the last of which is the target placeholder.
struct TokenizedContext {
    std::vector<std::vector<int>> unit_text;
    std::vector<ContextFrame> frames;

    int total_tokens() const;
    int target_index() const;  // index into frames of the single target frame
    const ContextFrame& target() const { return frames[static_cast<std::size_t>(target_index())]; }
    /// (m, n, p) for every visual token in sequence order.
    std::vector<TokenIndex> token_table() const;
    /// Number of non-target frames.
    int condition_frame_count() const;
};

/// Maps pixel values [0,1] to the model's [-1,1] latent range and back.
inline float to_model_range(float v) { return 2.0f * v - 1.0f; }
inline float from_model_range(float v) { return 0.5f * (v + 1.0f); }

/// Grayscale frames are replicated to 3 channels.
Image as_rgb(const Image& img);

/// Tokenizes an LCU and appends an all-ones-mask target placeholder of size
/// target_height x target_width to the current unit. The target latent channels are zero.
TokenizedContext tokenize_context(const LongContextConditionUnit& lcu, const Vocabulary& vocab,
                                  int target_height, int target_width, const ContextOptions& options = {});

/// Drops the current unit's instruction (classifier-free guidance's unconditional branch).
TokenizedContext without_current_instruction(TokenizedContext ctx);

}  // namespace ace
