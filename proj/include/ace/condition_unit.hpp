#pragma once

// Condition Unit (CU) and Long-context Condition Unit (LCU): the request structure every
// other module consumes. A CU pairs one instruction with an ordered list of image-mask
// frames; an LCU is the current CU plus a bounded window of historical CUs, oldest first.
//
// Instructions reference frames with CU-local indicator tokens: "{image1}" is the first
// frame of the CU that carries the instruction, "{image}" is an alias for "{image1}".
// Global ids (1..F over the whole LCU) are assigned by indicator_assignment() and
// substituted by globalize_instruction().

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ace/image.hpp"

namespace ace {

inline constexpr int kDefaultMaxImageNumber = 9;

enum class FrameRole { source, reference, generated, target_placeholder };

/// The eight task families plus free-form requests.
enum class TaskType {
    text_guided,
    low_level_analysis,
    controllable_generation,
    semantic_editing,
    element_editing,
    repainting,
    layer_editing,
    reference_generation,
    free_form,
};

std::string_view to_string(FrameRole role);
std::string_view to_string(TaskType type);
FrameRole frame_role_from_string(std::string_view s);
TaskType task_type_from_string(std::string_view s);

class CuError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FrameCapError : public CuError {
public:
    using CuError::CuError;
};

class WireFormatError : public CuError {
public:
    using CuError::CuError;
};

struct VisualFrame {
    Image image;  // channels in {1,3}
    Image mask;   // single channel, same height/width as image
    FrameRole role = FrameRole::source;

    friend bool operator==(const VisualFrame&, const VisualFrame&) = default;
};

/// Builds a frame; a missing mask becomes all-ones.
VisualFrame make_frame(Image image, std::optional<Image> mask = std::nullopt, FrameRole role = FrameRole::source);

struct ConditionUnit {
    std::string instruction;
    std::vector<VisualFrame> frames;
    TaskType kind = TaskType::free_form;

    friend bool operator==(const ConditionUnit&, const ConditionUnit&) = default;
};

struct FrameInput {
    Image image;
    std::optional<Image> mask;
    FrameRole role = FrameRole::source;
};

ConditionUnit build_cu(std::string instruction, std::vector<FrameInput> frames, TaskType kind,
                       int max_image_number = kDefaultMaxImageNumber);

struct LongContextConditionUnit {
    std::vector<ConditionUnit> units;  // oldest first; back() is the current request
    int history_window = 0;

    const ConditionUnit& current() const { return units.back(); }
    std::size_t frame_count() const;

    friend bool operator==(const LongContextConditionUnit&, const LongContextConditionUnit&) = default;
};

/// Keeps the most recent `history_window` units of `history` followed by `current`.
LongContextConditionUnit build_lcu(const std::vector<ConditionUnit>& history, ConditionUnit current,
                                   int history_window, int max_image_number = kDefaultMaxImageNumber);

struct IndicatorEntry {
    std::size_t unit = 0;
    std::size_t frame = 0;
    int id = 0;  // 1-based global id
};

class IndicatorAssignment {
public:
    explicit IndicatorAssignment(std::vector<IndicatorEntry> entries) : entries_(std::move(entries)) {}

    const std::vector<IndicatorEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    /// Throws CuError if (unit, frame) has no entry.
    int id_of(std::size_t unit, std::size_t frame) const;

private:
    std::vector<IndicatorEntry> entries_;
};

/// A supervised pair: the request context and the image it should produce.
struct Sample {
    LongContextConditionUnit lcu;
    Image target;
    std::string kind;
};

/// Global ids 1..F in (unit, frame) traversal order.
IndicatorAssignment indicator_assignment(const LongContextConditionUnit& lcu);

/// "{imageK}" for K >= 1.
std::string indicator_token(int id);
/// Parses "{image}" (returns 0) or "{imageK}" (returns K); nullopt if `token` is not an indicator.
std::optional<int> parse_indicator_token(std::string_view token);

/// Rewrites the CU-local indicator tokens of unit `unit` into global tokens.
/// Throws CuError when the instruction references a frame the unit does not have.
std::string globalize_instruction(const LongContextConditionUnit& lcu, std::size_t unit);

/// Structured-text (JSON) wire format; pixel payloads are base64 little-endian float32.
std::string serialize_lcu(const LongContextConditionUnit& lcu);
/// Throws WireFormatError on malformed input or version mismatch.
LongContextConditionUnit parse_lcu(std::string_view text);

inline constexpr int kLcuWireVersion = 1;

}  // namespace ace
