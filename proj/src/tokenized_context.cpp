#include "ace/tokenized_context.hpp"

#include <stdexcept>

namespace ace {

int TokenizedContext::total_tokens() const {
    int n = 0;
    for (const auto& f : frames) n += f.tokens.count();
    return n;
}

int TokenizedContext::target_index() const {
    int found = -1;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        if (frames[i].is_target) {
            if (found >= 0) throw std::invalid_argument("context has more than one target frame");
            found = static_cast<int>(i);
        }
    }
    if (found < 0) throw std::invalid_argument("context has no target frame");
    return found;
}

std::vector<TokenIndex> TokenizedContext::token_table() const {
    std::vector<TokenIndex> table;
    table.reserve(static_cast<std::size_t>(total_tokens()));
    for (const auto& f : frames) {
        for (int p = 0; p < f.tokens.count(); ++p) table.push_back({f.unit, f.frame, p});
    }
    return table;
}

int TokenizedContext::condition_frame_count() const {
    int n = 0;
    for (const auto& f : frames) n += f.is_target ? 0 : 1;
    return n;
}

Image as_rgb(const Image& img) {
    if (img.channels == 3) return img;
    if (img.channels != 1) throw std::invalid_argument("expected a 1- or 3-channel image");
    Image out(img.height, img.width, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        out.data[3 * i] = out.data[3 * i + 1] = out.data[3 * i + 2] = img.data[i];
    }
    return out;
}

namespace {

VisualTokens frame_tokens(const Image& image, const Image& mask, const ContextOptions& opt) {
    Image latent = encode_latent(as_rgb(image), opt.codec_factor);
    for (auto& v : latent.data) v = to_model_range(v);
    return patchify(concat_channels(latent, downsample_mask(mask, opt.codec_factor)), opt.patch);
}

}  // namespace

TokenizedContext tokenize_context(const LongContextConditionUnit& lcu, const Vocabulary& vocab, int target_height,
                                  int target_width, const ContextOptions& options) {
    if (lcu.units.empty()) throw CuError("cannot tokenize an empty LCU");
    if (static_cast<int>(lcu.frame_count()) > options.max_image_number) {
        throw FrameCapError("long-context unit exceeds the image limit of " + std::to_string(options.max_image_number));
    }
    TokenizedContext ctx;
    const auto assignment = indicator_assignment(lcu);
    int coord = 0;
    long total = 0;
    for (std::size_t m = 0; m < lcu.units.size(); ++m) {
        ctx.unit_text.push_back(vocab.tokenize(globalize_instruction(lcu, m)));
        const auto& cu = lcu.units[m];
        for (std::size_t n = 0; n < cu.frames.size(); ++n) {
            ContextFrame f;
            f.unit = static_cast<int>(m);
            f.frame = static_cast<int>(n);
            f.indicator = assignment.id_of(m, n);
            f.frame_coord = coord++;
            f.tokens = frame_tokens(cu.frames[n].image, cu.frames[n].mask, options);
            total += f.tokens.count();
            ctx.frames.push_back(std::move(f));
        }
    }

    ContextFrame target;
    target.unit = static_cast<int>(lcu.units.size()) - 1;
    target.frame = static_cast<int>(lcu.current().frames.size());
    target.indicator = 0;
    target.frame_coord = coord;
    target.is_target = true;
    target.tokens = frame_tokens(Image(target_height, target_width, 3, 0.5f),
                                 Image(target_height, target_width, 1, 1.0f), options);
    total += target.tokens.count();
    ctx.frames.push_back(std::move(target));

    check_visual_cap(total, options.visual_cap);
    return ctx;
}

TokenizedContext without_current_instruction(TokenizedContext ctx) {
    if (!ctx.unit_text.empty()) ctx.unit_text.back().clear();
    return ctx;
}

}  // namespace ace
