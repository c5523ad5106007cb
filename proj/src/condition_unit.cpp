#include "ace/condition_unit.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>

#include <nlohmann/json.hpp>

#include "ace/util.hpp"

namespace ace {

namespace {

constexpr std::array<std::string_view, 4> kRoleNames = {"source", "reference", "generated", "target_placeholder"};
constexpr std::array<std::string_view, 9> kTaskNames = {
    "text_guided",  "low_level_analysis", "controllable_generation", "semantic_editing",     "element_editing",
    "repainting",   "layer_editing",      "reference_generation",    "free_form",
};

void check_unit_range(const Image& img, std::string_view what) {
    for (float v : img.data) {
        if (!(v >= 0.0f && v <= 1.0f)) throw CuError(std::string(what) + " values must lie in [0,1]");
    }
}

}  // namespace

std::string_view to_string(FrameRole role) { return kRoleNames[static_cast<std::size_t>(role)]; }
std::string_view to_string(TaskType type) { return kTaskNames[static_cast<std::size_t>(type)]; }

FrameRole frame_role_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kRoleNames.size(); ++i) {
        if (kRoleNames[i] == s) return static_cast<FrameRole>(i);
    }
    throw CuError("unknown frame role: " + std::string(s));
}

TaskType task_type_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kTaskNames.size(); ++i) {
        if (kTaskNames[i] == s) return static_cast<TaskType>(i);
    }
    throw CuError("unknown task type: " + std::string(s));
}

VisualFrame make_frame(Image image, std::optional<Image> mask, FrameRole role) {
    if (image.channels != 1 && image.channels != 3) throw CuError("frame image must have 1 or 3 channels");
    if (image.height <= 0 || image.width <= 0) throw CuError("frame image is empty");
    check_unit_range(image, "image");
    VisualFrame frame;
    if (mask) {
        if (mask->channels != 1) throw CuError("mask must be single-channel");
        if (mask->height != image.height || mask->width != image.width) {
            throw CuError("mask dimensions do not match image");
        }
        check_unit_range(*mask, "mask");
        frame.mask = std::move(*mask);
    } else {
        frame.mask = Image(image.height, image.width, 1, 1.0f);
    }
    frame.image = std::move(image);
    frame.role = role;
    return frame;
}

ConditionUnit build_cu(std::string instruction, std::vector<FrameInput> frames, TaskType kind,
                       int max_image_number) {
    if (static_cast<int>(frames.size()) > max_image_number) {
        throw FrameCapError("condition unit has " + std::to_string(frames.size()) + " frames, limit is " +
                            std::to_string(max_image_number));
    }
    ConditionUnit cu;
    cu.instruction = std::move(instruction);
    cu.kind = kind;
    cu.frames.reserve(frames.size());
    for (auto& f : frames) {
        if (!cu.frames.empty()) {
            const auto& first = cu.frames.front().image;
            if (f.image.height != first.height || f.image.width != first.width) {
                throw CuError("all frames of a condition unit must share height and width");
            }
        }
        cu.frames.push_back(make_frame(std::move(f.image), std::move(f.mask), f.role));
    }
    return cu;
}

std::size_t LongContextConditionUnit::frame_count() const {
    std::size_t n = 0;
    for (const auto& u : units) n += u.frames.size();
    return n;
}

LongContextConditionUnit build_lcu(const std::vector<ConditionUnit>& history, ConditionUnit current,
                                   int history_window, int max_image_number) {
    if (history_window < 0) throw CuError("history window must be non-negative");
    LongContextConditionUnit lcu;
    lcu.history_window = history_window;
    const std::size_t keep = std::min(history.size(), static_cast<std::size_t>(history_window));
    lcu.units.assign(history.end() - static_cast<std::ptrdiff_t>(keep), history.end());
    lcu.units.push_back(std::move(current));
    if (static_cast<int>(lcu.frame_count()) > max_image_number) {
        throw FrameCapError("long-context unit has " + std::to_string(lcu.frame_count()) + " frames, limit is " +
                            std::to_string(max_image_number));
    }
    return lcu;
}

int IndicatorAssignment::id_of(std::size_t unit, std::size_t frame) const {
    for (const auto& e : entries_) {
        if (e.unit == unit && e.frame == frame) return e.id;
    }
    throw CuError("no indicator assigned to unit " + std::to_string(unit) + " frame " + std::to_string(frame));
}

IndicatorAssignment indicator_assignment(const LongContextConditionUnit& lcu) {
    std::vector<IndicatorEntry> entries;
    int next = 1;
    for (std::size_t m = 0; m < lcu.units.size(); ++m) {
        for (std::size_t n = 0; n < lcu.units[m].frames.size(); ++n) entries.push_back({m, n, next++});
    }
    return IndicatorAssignment(std::move(entries));
}

std::string indicator_token(int id) {
    if (id < 1) throw CuError("indicator ids start at 1");
    return "{image" + std::to_string(id) + "}";
}

std::optional<int> parse_indicator_token(std::string_view token) {
    constexpr std::string_view prefix = "{image";
    if (token.size() < prefix.size() + 1 || token.substr(0, prefix.size()) != prefix || token.back() != '}') {
        return std::nullopt;
    }
    const auto digits = token.substr(prefix.size(), token.size() - prefix.size() - 1);
    if (digits.empty()) return 0;
    if (digits.size() > 3 || digits.front() == '0') return std::nullopt;
    int v = 0;
    for (char c : digits) {
        if (c < '0' || c > '9') return std::nullopt;
        v = v * 10 + (c - '0');
    }
    return v;
}

std::string globalize_instruction(const LongContextConditionUnit& lcu, std::size_t unit) {
    const auto& cu = lcu.units.at(unit);
    const auto assignment = indicator_assignment(lcu);
    std::string out;
    std::size_t pos = 0;
    const std::string& text = cu.instruction;
    while (pos < text.size()) {
        const auto open = text.find('{', pos);
        if (open == std::string::npos) {
            out.append(text, pos, std::string::npos);
            break;
        }
        const auto close = text.find('}', open);
        if (close == std::string::npos) {
            out.append(text, pos, std::string::npos);
            break;
        }
        out.append(text, pos, open - pos);
        const std::string_view token(text.data() + open, close - open + 1);
        if (auto local = parse_indicator_token(token)) {
            const int k = *local == 0 ? 1 : *local;
            if (k > static_cast<int>(cu.frames.size())) {
                throw CuError("instruction references " + std::string(token) + " but the unit has " +
                              std::to_string(cu.frames.size()) + " frames");
            }
            out += indicator_token(assignment.id_of(unit, static_cast<std::size_t>(k - 1)));
        } else {
            out.append(token);
        }
        pos = close + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Wire format

namespace {

std::string encode_floats(const std::vector<float>& values) {
    std::vector<std::uint8_t> bytes(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        bytes[4 * i + 0] = static_cast<std::uint8_t>(bits);
        bytes[4 * i + 1] = static_cast<std::uint8_t>(bits >> 8);
        bytes[4 * i + 2] = static_cast<std::uint8_t>(bits >> 16);
        bytes[4 * i + 3] = static_cast<std::uint8_t>(bits >> 24);
    }
    return base64_encode(bytes);
}

std::vector<float> decode_floats(const std::string& text, std::size_t expected) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = base64_decode(text);
    } catch (const std::invalid_argument& e) {
        throw WireFormatError(std::string("pixel payload: ") + e.what());
    }
    if (bytes.size() != expected * 4) throw WireFormatError("pixel payload has the wrong length");
    std::vector<float> values(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        const std::uint32_t bits = bytes[4 * i] | (bytes[4 * i + 1] << 8) | (bytes[4 * i + 2] << 16) |
                                   (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
        values[i] = std::bit_cast<float>(bits);
    }
    return values;
}

bool all_ones(const Image& mask) {
    return std::all_of(mask.data.begin(), mask.data.end(), [](float v) { return v == 1.0f; });
}

}  // namespace

std::string serialize_lcu(const LongContextConditionUnit& lcu) {
    nlohmann::json doc;
    doc["format"] = "ace-lcu";
    doc["version"] = kLcuWireVersion;
    doc["history_window"] = lcu.history_window;
    auto& units = doc["units"] = nlohmann::json::array();
    for (const auto& cu : lcu.units) {
        nlohmann::json u;
        u["instruction"] = cu.instruction;
        u["kind"] = to_string(cu.kind);
        auto& frames = u["frames"] = nlohmann::json::array();
        for (const auto& f : cu.frames) {
            nlohmann::json jf;
            jf["role"] = to_string(f.role);
            jf["height"] = f.image.height;
            jf["width"] = f.image.width;
            jf["channels"] = f.image.channels;
            jf["pixels"] = encode_floats(f.image.data);
            const bool ones = all_ones(f.mask);
            jf["mask_all_ones"] = ones;
            if (!ones) jf["mask"] = encode_floats(f.mask.data);
            frames.push_back(std::move(jf));
        }
        units.push_back(std::move(u));
    }
    return doc.dump(1);
}

LongContextConditionUnit parse_lcu(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw WireFormatError(std::string("malformed LCU document: ") + e.what());
    }
    try {
        if (doc.at("format").get<std::string>() != "ace-lcu") throw WireFormatError("not an LCU document");
        const int version = doc.at("version").get<int>();
        if (version != kLcuWireVersion) {
            throw WireFormatError("unsupported LCU wire version " + std::to_string(version));
        }
        LongContextConditionUnit lcu;
        lcu.history_window = doc.at("history_window").get<int>();
        if (lcu.history_window < 0) throw WireFormatError("negative history window");
        for (const auto& u : doc.at("units")) {
            ConditionUnit cu;
            cu.instruction = u.at("instruction").get<std::string>();
            cu.kind = task_type_from_string(u.at("kind").get<std::string>());
            for (const auto& jf : u.at("frames")) {
                const int h = jf.at("height").get<int>();
                const int w = jf.at("width").get<int>();
                const int c = jf.at("channels").get<int>();
                if (h <= 0 || w <= 0 || (c != 1 && c != 3) || static_cast<long>(h) * w > (1L << 24)) {
                    throw WireFormatError("invalid frame dimensions");
                }
                VisualFrame f;
                f.role = frame_role_from_string(jf.at("role").get<std::string>());
                f.image = Image(h, w, c);
                f.image.data = decode_floats(jf.at("pixels").get<std::string>(), f.image.size());
                f.mask = Image(h, w, 1, 1.0f);
                if (!jf.at("mask_all_ones").get<bool>()) {
                    f.mask.data = decode_floats(jf.at("mask").get<std::string>(), f.mask.size());
                }
                cu.frames.push_back(std::move(f));
            }
            lcu.units.push_back(std::move(cu));
        }
        if (lcu.units.empty()) throw WireFormatError("LCU has no units");
        if (lcu.units.size() > static_cast<std::size_t>(lcu.history_window) + 1) {
            throw WireFormatError("LCU holds more units than its history window allows");
        }
        return lcu;
    } catch (const nlohmann::json::exception& e) {
        throw WireFormatError(std::string("malformed LCU document: ") + e.what());
    } catch (const WireFormatError&) {
        throw;
    } catch (const CuError& e) {
        throw WireFormatError(e.what());
    }
}

}  // namespace ace
