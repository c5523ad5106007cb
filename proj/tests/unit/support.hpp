#pragma once

#include <cmath>

#include "ace/condition_unit.hpp"
#include "ace/image.hpp"
#include "ace/transformer.hpp"
#include "ace/util.hpp"

namespace ace::test {

inline Image random_image(Rng& rng, int h, int w, int c) {
    Image img(h, w, c);
    for (auto& v : img.data) v = static_cast<float>(uniform_draw(rng));
    return img;
}

/// Values on the 8-bit grid, so PNG/PNM round trips are exact.
inline Image random_byte_image(Rng& rng, int h, int w, int c) {
    Image img(h, w, c);
    for (auto& v : img.data) v = static_cast<float>(uniform_index(rng, 256)) / 255.0f;
    return img;
}

inline Image random_mask(Rng& rng, int h, int w) {
    Image m(h, w, 1);
    for (auto& v : m.data) v = uniform_index(rng, 2) ? 1.0f : 0.0f;
    return m;
}

/// About 5k trainable parameters.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.width = 12;
    c.depth = 1;
    c.heads = 1;
    c.mlp_ratio = 2;
    c.freq_dim = 8;
    c.vocab_size = 64;
    c.max_text_tokens = 16;
    return c;
}

inline ModelConfig small_config() {
    ModelConfig c;
    c.width = 24;
    c.depth = 2;
    c.heads = 2;
    c.freq_dim = 16;
    c.vocab_size = 256;
    return c;
}

inline LongContextConditionUnit two_unit_lcu(Rng& rng, int size = 8) {
    auto h = build_cu("invert {image1}", {{random_image(rng, size, size, 3), std::nullopt, FrameRole::source},
                                           {random_image(rng, size, size, 3), std::nullopt, FrameRole::generated}},
                      TaskType::free_form);
    auto c = build_cu("put {image1} next to {image2}", {{random_image(rng, size, size, 3), random_mask(rng, size, size)},
                                                      {random_image(rng, size, size, 1), std::nullopt}},
                      TaskType::free_form);
    return build_lcu({h}, c, 1);
}

}  // namespace ace::test
