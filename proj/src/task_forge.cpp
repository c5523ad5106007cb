#include "ace/task_forge.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "ace/util.hpp"

namespace ace::forge {

namespace {

constexpr std::string_view kKindNames[] = {
    "text_guided",    "low_level_edge", "controllable",        "semantic_invert", "semantic_palette",
    "element_add",    "element_remove", "repaint",             "layer_extract",   "layer_complete",
    "reference_generation", "copy_source", "chain_repeat",
};

constexpr std::string_view kColorNames[kPaletteSize] = {"black", "red",  "green",   "blue",
                                                        "yellow", "cyan", "magenta", "white"};
constexpr Color kColors[kPaletteSize] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                                         {1, 1, 0}, {0, 1, 1}, {1, 0, 1}, {1, 1, 1}};
constexpr int kWhite = 7;

int pick(Rng& rng, int n) { return static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(n))); }
int pick_range(Rng& rng, int lo, int hi) { return lo + pick(rng, hi - lo + 1); }

int pick_color_except(Rng& rng, std::initializer_list<int> excluded) {
    std::vector<int> options;
    for (int c = 0; c < kPaletteSize; ++c) {
        if (std::find(excluded.begin(), excluded.end(), c) == excluded.end()) options.push_back(c);
    }
    return options[static_cast<std::size_t>(pick(rng, static_cast<int>(options.size())))];
}

std::string describe(const Shape& s) {
    return std::string(kColorNames[s.color]) + " " + std::string(to_string(s.kind));
}

Shape random_shape(Rng& rng, int canvas, int background, bool allow_white) {
    Shape s;
    s.kind = static_cast<ShapeKind>(pick(rng, 3));
    s.color = allow_white ? pick_color_except(rng, {background}) : pick_color_except(rng, {background, kWhite});
    s.size = pick_range(rng, std::min(4, canvas), std::min(7, canvas));
    s.x = pick(rng, canvas - s.size + 1);
    s.y = pick(rng, canvas - s.size + 1);
    return s;
}

// Shapes carry distinct (kind, color) pairs so instructions naming one are unambiguous.
Scene random_scene(Rng& rng, int canvas, int min_shapes, int max_shapes, bool allow_white = true) {
    Scene scene;
    scene.background = pick(rng, kPaletteSize);
    const int n = pick_range(rng, min_shapes, max_shapes);
    while (static_cast<int>(scene.shapes.size()) < n) {
        Shape s = random_shape(rng, canvas, scene.background, allow_white);
        const bool clash = std::any_of(scene.shapes.begin(), scene.shapes.end(),
                                       [&](const Shape& o) { return o.kind == s.kind && o.color == s.color; });
        if (!clash) scene.shapes.push_back(s);
    }
    return scene;
}

Shape centered(ShapeKind kind, int color, int size, int canvas) {
    return Shape{kind, color, (canvas - size) / 2, (canvas - size) / 2, size};
}

Image fill(int canvas, const Color& c) {
    Image img(canvas, canvas, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = c[i % 3];
    return img;
}

ConditionUnit unit(std::string instruction, std::vector<FrameInput> frames, TaskKind kind) {
    return build_cu(std::move(instruction), std::move(frames), task_type_of(kind));
}

Sample single(TaskKind kind, std::string instruction, std::vector<FrameInput> frames, Image target) {
    Sample s;
    s.lcu = build_lcu({}, unit(std::move(instruction), std::move(frames), kind), 0);
    s.target = std::move(target);
    s.kind = std::string(to_string(kind));
    return s;
}

struct Edit {
    std::string instruction;
    Image result;
    std::optional<Image> mask;
};

Edit apply_edit(TaskKind kind, const Image& input, Rng& rng) {
    const int canvas = input.height;
    switch (kind) {
        case TaskKind::semantic_invert:
            return {"invert the colors of {image1}", invert(input), std::nullopt};
        case TaskKind::semantic_palette:
            return {"rotate the palette of {image1}", rotate_palette(input), std::nullopt};
        case TaskKind::element_add: {
            static constexpr std::string_view places[] = {"top left", "top right", "bottom left", "bottom right",
                                                          "center"};
            const int where = pick(rng, 5);
            Shape s;
            s.kind = static_cast<ShapeKind>(pick(rng, 3));
            s.color = pick(rng, kPaletteSize);
            s.size = std::max(1, canvas * 5 / 16);
            const int lo = canvas / 8, hi = canvas - canvas / 8 - s.size;
            s.x = where == 4 ? (canvas - s.size) / 2 : (where % 2 == 0 ? lo : hi);
            s.y = where == 4 ? (canvas - s.size) / 2 : (where < 2 ? lo : hi);
            return {"add a " + describe(s) + " to the " + std::string(places[where]) + " of {image1}", paint(input, s),
                    std::nullopt};
        }
        case TaskKind::repaint: {
            const int color = pick(rng, kPaletteSize);
            const int w = pick_range(rng, 3, std::max(3, canvas / 2)), h = pick_range(rng, 3, std::max(3, canvas / 2));
            const int x0 = pick(rng, canvas - w + 1), y0 = pick(rng, canvas - h + 1);
            Image mask(canvas, canvas, 1, 0.0f);
            Image out = input;
            for (int y = y0; y < y0 + h; ++y) {
                for (int x = x0; x < x0 + w; ++x) {
                    mask.at(y, x, 0) = 1.0f;
                    for (int c = 0; c < 3; ++c) out.at(y, x, c) = kColors[color][static_cast<std::size_t>(c)];
                }
            }
            return {"repaint the masked area of {image1} " + std::string(kColorNames[color]), std::move(out),
                    std::move(mask)};
        }
        default:
            throw std::invalid_argument("task kind '" + std::string(to_string(kind)) + "' cannot be chained");
    }
}

}  // namespace

std::string_view to_string(TaskKind kind) { return kKindNames[static_cast<int>(kind)]; }

TaskKind task_kind_from_string(std::string_view name) {
    for (std::size_t i = 0; i < std::size(kKindNames); ++i) {
        if (kKindNames[i] == name) return static_cast<TaskKind>(i);
    }
    throw std::invalid_argument("unknown task kind '" + std::string(name) + "'");
}

const std::vector<TaskKind>& all_task_kinds() {
    static const std::vector<TaskKind> kinds = [] {
        std::vector<TaskKind> v;
        for (std::size_t i = 0; i < std::size(kKindNames); ++i) v.push_back(static_cast<TaskKind>(i));
        return v;
    }();
    return kinds;
}

TaskType task_type_of(TaskKind kind) {
    switch (kind) {
        case TaskKind::text_guided: return TaskType::text_guided;
        case TaskKind::low_level_edge: return TaskType::low_level_analysis;
        case TaskKind::controllable: return TaskType::controllable_generation;
        case TaskKind::semantic_invert:
        case TaskKind::semantic_palette:
        case TaskKind::chain_repeat: return TaskType::semantic_editing;
        case TaskKind::element_add:
        case TaskKind::element_remove: return TaskType::element_editing;
        case TaskKind::repaint: return TaskType::repainting;
        case TaskKind::layer_extract:
        case TaskKind::layer_complete: return TaskType::layer_editing;
        case TaskKind::reference_generation: return TaskType::reference_generation;
        case TaskKind::copy_source: return TaskType::free_form;
    }
    return TaskType::free_form;
}

std::string_view to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::square: return "square";
        case ShapeKind::circle: return "circle";
        case ShapeKind::triangle: return "triangle";
    }
    return "square";
}

Color palette_color(int index) {
    if (index < 0 || index >= kPaletteSize) throw std::out_of_range("palette index");
    return kColors[index];
}

std::string_view palette_name(int index) {
    if (index < 0 || index >= kPaletteSize) throw std::out_of_range("palette index");
    return kColorNames[index];
}

bool Shape::covers(int px, int py) const {
    const int u = px - x, v = py - y;
    if (u < 0 || v < 0 || u >= size || v >= size) return false;
    const double c = (size - 1) / 2.0;
    switch (kind) {
        case ShapeKind::square: return true;
        case ShapeKind::circle: {
            const double r = size / 2.0;
            return (u - c) * (u - c) + (v - c) * (v - c) <= r * r - 0.25;
        }
        case ShapeKind::triangle: return 2.0 * std::abs(u - c) <= v + 0.5;
    }
    return false;
}

Image paint(const Image& image, const Shape& shape) {
    if (image.channels != 3) throw std::invalid_argument("paint expects an RGB image");
    Image out = image;
    const Color& col = kColors[shape.color];
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            if (!shape.covers(x, y)) continue;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = col[static_cast<std::size_t>(c)];
        }
    }
    return out;
}

Image render(const Scene& scene, int canvas) {
    Image img = fill(canvas, kColors[scene.background]);
    for (const auto& s : scene.shapes) img = paint(img, s);
    return img;
}

Image invert(const Image& image) {
    Image out = image;
    for (auto& v : out.data) v = 1.0f - v;
    return out;
}

Image rotate_palette(const Image& image) {
    if (image.channels != 3) throw std::invalid_argument("rotate_palette expects an RGB image");
    Image out = image;
    for (std::size_t i = 0; i < out.data.size(); i += 3) {
        out.data[i] = image.data[i + 1];
        out.data[i + 1] = image.data[i + 2];
        out.data[i + 2] = image.data[i];
    }
    return out;
}

Image edge_map(const Image& image, const Color& background) {
    if (image.channels != 3) throw std::invalid_argument("edge_map expects an RGB image");
    auto same = [&](int y0, int x0, int y1, int x1) {
        for (int c = 0; c < 3; ++c) {
            if (image.at(y0, x0, c) != image.at(y1, x1, c)) return false;
        }
        return true;
    };
    Image out(image.height, image.width, 3, 0.0f);
    constexpr int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            bool is_bg = true;
            for (int c = 0; c < 3; ++c) is_bg = is_bg && image.at(y, x, c) == background[static_cast<std::size_t>(c)];
            if (is_bg) continue;
            bool hot = false;
            for (int k = 0; k < 4 && !hot; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                hot = ny < 0 || nx < 0 || ny >= image.height || nx >= image.width || !same(y, x, ny, nx);
            }
            if (hot) {
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = 1.0f;
            }
        }
    }
    return out;
}

bool chainable(TaskKind kind) {
    return kind == TaskKind::semantic_invert || kind == TaskKind::semantic_palette || kind == TaskKind::element_add ||
           kind == TaskKind::repaint;
}

Sample generate(TaskKind kind, std::uint64_t seed, const ForgeOptions& options) {
    const int canvas = options.canvas;
    if (canvas < 8) throw std::invalid_argument("canvas must be at least 8 pixels");
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(kind) + 1}));
    const auto src = [](Image img, FrameRole role = FrameRole::source) {
        return FrameInput{std::move(img), std::nullopt, role};
    };

    switch (kind) {
        case TaskKind::text_guided: {
            const int bg = pick(rng, kPaletteSize);
            const bool large = pick(rng, 2) == 1;
            const Shape s = centered(static_cast<ShapeKind>(pick(rng, 3)), pick_color_except(rng, {bg}),
                                     large ? canvas * 9 / 16 : canvas * 5 / 16, canvas);
            return single(kind,
                          std::string("draw a ") + (large ? "large " : "small ") + describe(s) + " on a " +
                              std::string(kColorNames[bg]) + " background",
                          {}, render(Scene{bg, {s}}, canvas));
        }
        case TaskKind::low_level_edge:
        case TaskKind::controllable: {
            // Both directions come from the same scene so the pair is shared across the two kinds.
            Rng scene_rng(derive_seed(seed, {0xed6e}));
            const Scene scene = random_scene(scene_rng, canvas, 1, 1);
            const Image img = render(scene, canvas);
            const Image edges = edge_map(img, kColors[scene.background]);
            if (kind == TaskKind::low_level_edge) return single(kind, "extract the edge map of {image1}", {src(img)}, edges);
            return single(kind,
                          "render a " + describe(scene.shapes.front()) + " on a " +
                              std::string(kColorNames[scene.background]) + " background following the edges of {image1}",
                          {src(edges)}, img);
        }
        case TaskKind::semantic_invert:
        case TaskKind::semantic_palette:
        case TaskKind::element_add:
        case TaskKind::repaint: {
            const Image img = render(random_scene(rng, canvas, 1, 3), canvas);
            Edit e = apply_edit(kind, img, rng);
            return single(kind, std::move(e.instruction), {FrameInput{img, std::move(e.mask), FrameRole::source}},
                          std::move(e.result));
        }
        case TaskKind::element_remove: {
            Scene scene = random_scene(rng, canvas, 2, 3);
            const auto idx = static_cast<std::size_t>(pick(rng, static_cast<int>(scene.shapes.size())));
            const Shape gone = scene.shapes[idx];
            const Image img = render(scene, canvas);
            scene.shapes.erase(scene.shapes.begin() + static_cast<std::ptrdiff_t>(idx));
            return single(kind, "remove the " + describe(gone) + " from {image1}", {src(img)}, render(scene, canvas));
        }
        case TaskKind::layer_extract: {
            const Scene scene = random_scene(rng, canvas, 2, 3, false);
            const Shape& s = scene.shapes[static_cast<std::size_t>(pick(rng, static_cast<int>(scene.shapes.size())))];
            return single(kind, "extract the " + describe(s) + " from {image1} onto a white background",
                          {src(render(scene, canvas))}, render(Scene{kWhite, {s}}, canvas));
        }
        case TaskKind::layer_complete: {
            const Scene scene = random_scene(rng, canvas, 1, 3);
            return single(kind, "remove every object from {image1} and fill in the background",
                          {src(render(scene, canvas))}, render(Scene{scene.background, {}}, canvas));
        }
        case TaskKind::reference_generation: {
            const int refs = pick_range(rng, 2, 3);
            const int bg = pick(rng, kPaletteSize);
            Shape common{static_cast<ShapeKind>(pick(rng, 3)), pick_color_except(rng, {bg}), 0, 0, canvas * 5 / 16};
            std::vector<FrameInput> frames;
            for (int r = 0; r < refs; ++r) {
                Scene scene;
                scene.background = pick_color_except(rng, {common.color});
                Shape here = common;
                here.x = pick(rng, canvas - here.size + 1);
                here.y = pick(rng, canvas - here.size + 1);
                Shape other;
                do {
                    other = random_shape(rng, canvas, scene.background, true);
                } while (other.kind == common.kind && other.color == common.color);
                // The common object is painted last so it stays whole.
                scene.shapes = {other, here};
                frames.push_back(src(render(scene, canvas), FrameRole::reference));
            }
            std::string refs_text = refs == 2 ? "{image1} and {image2}" : "{image1}, {image2} and {image3}";
            return single(kind,
                          "draw the object shared by " + refs_text + " in the center of a " +
                              std::string(kColorNames[bg]) + " canvas",
                          std::move(frames), render(Scene{bg, {centered(common.kind, common.color, common.size, canvas)}}, canvas));
        }
        case TaskKind::copy_source: {
            const Image a = render(random_scene(rng, canvas, 1, 3), canvas);
            Image b;
            do {
                b = render(random_scene(rng, canvas, 1, 3), canvas);
            } while (b == a);
            const int k = pick_range(rng, 1, 2);
            std::vector<FrameInput> frames{src(a, k == 1 ? FrameRole::source : FrameRole::reference),
                                           src(b, k == 2 ? FrameRole::source : FrameRole::reference)};
            return single(kind, "copy " + indicator_token(k), std::move(frames), k == 1 ? a : b);
        }
        case TaskKind::chain_repeat:
            return generate_repeat_chain(seed, options.history_window, options).sample;
    }
    throw std::invalid_argument("unknown task kind");
}

Sample generate_chain(const ChainSpec& spec, std::uint64_t seed, const ForgeOptions& options) {
    if (spec.steps.size() < 2) throw std::invalid_argument("a chain needs at least two steps");
    for (auto k : spec.steps) {
        if (!chainable(k)) throw std::invalid_argument("task kind '" + std::string(to_string(k)) + "' cannot be chained");
    }
    Rng rng(derive_seed(seed, {0xc4a1, spec.steps.size()}));
    Image current = render(random_scene(rng, options.canvas, 1, 3), options.canvas);
    std::vector<ConditionUnit> history;
    for (std::size_t j = 0; j + 1 < spec.steps.size(); ++j) {
        Edit e = apply_edit(spec.steps[j], current, rng);
        history.push_back(unit(e.instruction,
                               {FrameInput{current, std::move(e.mask), FrameRole::source},
                                FrameInput{e.result, std::nullopt, FrameRole::generated}},
                               spec.steps[j]));
        current = std::move(e.result);
    }
    Edit last = apply_edit(spec.steps.back(), current, rng);
    Sample s;
    s.lcu = build_lcu(history,
                      unit(last.instruction, {FrameInput{current, std::move(last.mask), FrameRole::source}},
                           spec.steps.back()),
                      spec.history_window);
    s.target = std::move(last.result);
    s.kind = "chain";
    for (auto k : spec.steps) s.kind += ":" + std::string(to_string(k));
    return s;
}

std::array<Image, 2> repeat_candidates(const Image& current_input) {
    return {invert(current_input), rotate_palette(current_input)};
}

RepeatChain generate_repeat_chain(std::uint64_t seed, int history_window, const ForgeOptions& options) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(TaskKind::chain_repeat) + 1}));
    const Image a = render(random_scene(rng, options.canvas, 1, 3), options.canvas);
    const bool use_invert = pick(rng, 2) == 0;
    RepeatChain out;
    out.edit = use_invert ? TaskKind::semantic_invert : TaskKind::semantic_palette;
    Edit first = apply_edit(out.edit, a, rng);
    const auto candidates = repeat_candidates(first.result);

    ConditionUnit past = unit(first.instruction,
                              {FrameInput{a, std::nullopt, FrameRole::source},
                               FrameInput{first.result, std::nullopt, FrameRole::generated}},
                              out.edit);
    ConditionUnit now = unit("repeat the previous edit on {image1}",
                             {FrameInput{first.result, std::nullopt, FrameRole::source}}, TaskKind::chain_repeat);
    out.sample.lcu = build_lcu({past}, std::move(now), history_window);
    out.sample.target = candidates[use_invert ? 0 : 1];
    out.sample.kind = std::string(to_string(TaskKind::chain_repeat));
    out.alternative = candidates[use_invert ? 1 : 0];
    return out;
}

Sample mixed_sample(const std::vector<std::string>& tasks, std::uint64_t seed, std::uint64_t index,
                    const ForgeOptions& options) {
    if (tasks.empty()) throw std::invalid_argument("empty task mix");
    const std::string& entry = tasks[index % tasks.size()];
    const std::uint64_t s = derive_seed(seed, {index});
    if (entry == "repeat") return generate_repeat_chain(s, options.history_window, options).sample;
    if (entry == "chain") {
        static const TaskKind kinds[] = {TaskKind::semantic_invert, TaskKind::semantic_palette, TaskKind::element_add,
                                         TaskKind::repaint};
        Rng rng(derive_seed(s, {0xc4a1}));
        ChainSpec spec;
        for (int j = 0; j < 2; ++j) spec.steps.push_back(kinds[uniform_index(rng, 4)]);
        spec.history_window = options.history_window;
        return generate_chain(spec, s, options);
    }
    return generate(task_kind_from_string(entry), s, options);
}

}  // namespace ace::forge
