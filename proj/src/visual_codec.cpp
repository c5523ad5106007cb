#include "ace/visual_codec.hpp"

#include <algorithm>
#include <string>

namespace ace {

Image encode_latent(const Image& image, int factor) {
    if (factor < 1) throw CodecError("codec factor must be positive");
    if (image.height % factor != 0 || image.width % factor != 0) {
        throw CodecError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not divisible by codec factor " + std::to_string(factor));
    }
    const int f2 = factor * factor;
    Image latent(image.height / factor, image.width / factor, image.channels * f2);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const int ly = y / factor, lx = x / factor;
            const int sub = (y % factor) * factor + (x % factor);
            for (int c = 0; c < image.channels; ++c) latent.at(ly, lx, c * f2 + sub) = image.at(y, x, c);
        }
    }
    return latent;
}

Image decode_latent(const Image& latent, int factor) {
    if (factor < 1) throw CodecError("codec factor must be positive");
    const int f2 = factor * factor;
    if (latent.channels == 0 || latent.channels % f2 != 0) {
        throw CodecError("latent channel count " + std::to_string(latent.channels) + " is not a multiple of " +
                         std::to_string(f2));
    }
    Image image(latent.height * factor, latent.width * factor, latent.channels / f2);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const int sub = (y % factor) * factor + (x % factor);
            for (int c = 0; c < image.channels; ++c) image.at(y, x, c) = latent.at(y / factor, x / factor, c * f2 + sub);
        }
    }
    return image;
}

Image downsample_mask(const Image& mask, int factor) {
    if (mask.channels != 1) throw CodecError("mask must be single-channel");
    if (factor < 1 || mask.height % factor != 0 || mask.width % factor != 0) {
        throw CodecError("mask dimensions are not divisible by the codec factor");
    }
    Image out(mask.height / factor, mask.width / factor, 1);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            float m = mask.at(y * factor, x * factor, 0);
            for (int dy = 0; dy < factor; ++dy) {
                for (int dx = 0; dx < factor; ++dx) m = std::max(m, mask.at(y * factor + dy, x * factor + dx, 0));
            }
            out.at(y, x, 0) = m;
        }
    }
    return out;
}

Image concat_channels(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width) throw CodecError("cannot concatenate grids of different size");
    Image out(a.height, a.width, a.channels + b.channels);
    for (int y = 0; y < a.height; ++y) {
        for (int x = 0; x < a.width; ++x) {
            for (int c = 0; c < a.channels; ++c) out.at(y, x, c) = a.at(y, x, c);
            for (int c = 0; c < b.channels; ++c) out.at(y, x, a.channels + c) = b.at(y, x, c);
        }
    }
    return out;
}

VisualTokens patchify(const Image& stack, int patch) {
    if (patch < 1 || stack.height % patch != 0 || stack.width % patch != 0) {
        throw CodecError("latent grid is not divisible by patch size " + std::to_string(patch));
    }
    VisualTokens t;
    t.patch = patch;
    t.channels = stack.channels;
    t.grid_rows = stack.height / patch;
    t.grid_cols = stack.width / patch;
    const int pp = patch * patch;
    t.values.resize(t.grid_rows * t.grid_cols, stack.channels * pp);
    for (int gr = 0; gr < t.grid_rows; ++gr) {
        for (int gc = 0; gc < t.grid_cols; ++gc) {
            const int tok = gr * t.grid_cols + gc;
            for (int c = 0; c < stack.channels; ++c) {
                for (int py = 0; py < patch; ++py) {
                    for (int px = 0; px < patch; ++px) {
                        t.values(tok, c * pp + py * patch + px) = stack.at(gr * patch + py, gc * patch + px, c);
                    }
                }
            }
        }
    }
    return t;
}

Image unpatchify(const VisualTokens& t) {
    const int pp = t.patch * t.patch;
    if (t.values.rows() != static_cast<Eigen::Index>(t.grid_rows) * t.grid_cols ||
        t.values.cols() != static_cast<Eigen::Index>(t.channels) * pp) {
        throw CodecError("token matrix does not match its recorded grid shape");
    }
    Image stack(t.grid_rows * t.patch, t.grid_cols * t.patch, t.channels);
    for (int gr = 0; gr < t.grid_rows; ++gr) {
        for (int gc = 0; gc < t.grid_cols; ++gc) {
            const int tok = gr * t.grid_cols + gc;
            for (int c = 0; c < t.channels; ++c) {
                for (int py = 0; py < t.patch; ++py) {
                    for (int px = 0; px < t.patch; ++px) {
                        stack.at(gr * t.patch + py, gc * t.patch + px, c) = t.values(tok, c * pp + py * t.patch + px);
                    }
                }
            }
        }
    }
    return stack;
}

void check_visual_cap(long total_tokens, long cap) {
    if (total_tokens > cap) {
        throw VisualCapError("visual sequence of " + std::to_string(total_tokens) + " tokens exceeds cap " +
                             std::to_string(cap));
    }
}

int tokens_per_frame(int height, int width, int factor, int patch) {
    const int unit = factor * patch;
    if (height % unit != 0 || width % unit != 0) throw CodecError("frame size not divisible by factor*patch");
    return (height / unit) * (width / unit);
}

}  // namespace ace
