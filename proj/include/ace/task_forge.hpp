#pragma once

// Procedural toy tasks on small RGB canvases. Scenes are flat-colored squares, circles and
// triangles over a flat background, drawn from an 8-color palette (the RGB cube corners),
// so every ground truth is a closed-form function of the inputs.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ace/condition_unit.hpp"

namespace ace::forge {

enum class TaskKind {
    text_guided,
    low_level_edge,
    controllable,
    semantic_invert,
    semantic_palette,
    element_add,
    element_remove,
    repaint,
    layer_extract,
    layer_complete,
    reference_generation,
    copy_source,
    chain_repeat,
};

std::string_view to_string(TaskKind kind);
/// Throws std::invalid_argument on unknown names.
TaskKind task_kind_from_string(std::string_view name);
const std::vector<TaskKind>& all_task_kinds();
TaskType task_type_of(TaskKind kind);

enum class ShapeKind { square, circle, triangle };
std::string_view to_string(ShapeKind kind);

using Color = std::array<float, 3>;
inline constexpr int kPaletteSize = 8;
Color palette_color(int index);
std::string_view palette_name(int index);

struct Shape {
    ShapeKind kind = ShapeKind::square;
    int color = 0;  // palette index
    int x = 0;      // top-left of the bounding box
    int y = 0;
    int size = 1;

    bool covers(int px, int py) const;
};

struct Scene {
    int background = 0;
    std::vector<Shape> shapes;  // painted in order
};

Image render(const Scene& scene, int canvas);
/// Paints a shape over an existing image.
Image paint(const Image& image, const Shape& shape);

/// 1 - x per value.
Image invert(const Image& image);
/// (r, g, b) -> (g, b, r) per pixel.
Image rotate_palette(const Image& image);
/// White where a non-background pixel has a 4-neighbor outside the canvas or of another
/// color; black elsewhere.
Image edge_map(const Image& image, const Color& background);

struct ForgeOptions {
    int canvas = 16;
    int history_window = 1;  // chains keep this many history units
};

/// One sample of `kind`; deterministic in (kind, seed, options).
Sample generate(TaskKind kind, std::uint64_t seed, const ForgeOptions& options = {});

/// Kinds that take one image and can be chained.
bool chainable(TaskKind kind);

struct ChainSpec {
    std::vector<TaskKind> steps;  // applied in order; step j edits step j-1's result
    int history_window = 1;
};

/// History unit j holds [input_j, result_j] (result as a generated frame); the current unit
/// holds the last input and the target is the last result. Throws std::invalid_argument for
/// chains shorter than 2 or non-chainable steps.
Sample generate_chain(const ChainSpec& spec, std::uint64_t seed, const ForgeOptions& options = {});

/// History-dependent chain: a first edit E in {invert, rotate palette} is shown in history,
/// then "repeat the previous edit". Without history both candidates are consistent.
struct RepeatChain {
    Sample sample;
    TaskKind edit = TaskKind::semantic_invert;
    Image alternative;  // the result of the other edit
};

RepeatChain generate_repeat_chain(std::uint64_t seed, int history_window, const ForgeOptions& options = {});

/// Both targets a model without history could justify for a repeat chain, in edit order
/// {invert, rotate palette}.
std::array<Image, 2> repeat_candidates(const Image& current_input);

/// Sample `index` of a data mix. Entries are task kind names, "chain" (two random chainable
/// edits) or "repeat" (a repeat chain); entries are visited round-robin. Throws
/// std::invalid_argument for an empty mix or an unknown entry.
Sample mixed_sample(const std::vector<std::string>& tasks, std::uint64_t seed, std::uint64_t index,
                    const ForgeOptions& options = {});

}  // namespace ace::forge
