#include <doctest.h>

#include "ace/visual_codec.hpp"
#include "support.hpp"

using namespace ace;

TEST_CASE("latent codec is a bit-exact bijection") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int f = 1 + static_cast<int>(uniform_index(rng, 3));
        const int h = f * (1 + static_cast<int>(uniform_index(rng, 6)));
        const int w = f * (1 + static_cast<int>(uniform_index(rng, 6)));
        const int c = uniform_index(rng, 2) ? 3 : 1;
        const auto img = test::random_image(rng, h, w, c);
        const auto lat = encode_latent(img, f);
        CHECK(lat.height == h / f);
        CHECK(lat.width == w / f);
        CHECK(lat.channels == c * f * f);
        CHECK(bitwise_equal(decode_latent(lat, f), img));
    }
}

TEST_CASE("latent channel layout") {
    Image img(2, 2, 1);
    img.data = {1, 2, 3, 4};
    const auto lat = encode_latent(img, 2);
    CHECK(lat.data == std::vector<float>{1, 2, 3, 4});
    Image rgb(2, 2, 3);
    for (int i = 0; i < 12; ++i) rgb.data[static_cast<std::size_t>(i)] = static_cast<float>(i);
    const auto l3 = encode_latent(rgb, 2);
    // channel c * 4 + dy * 2 + dx holds pixel (dy, dx) channel c
    CHECK(l3.at(0, 0, 0) == rgb.at(0, 0, 0));
    CHECK(l3.at(0, 0, 1) == rgb.at(0, 1, 0));
    CHECK(l3.at(0, 0, 6) == rgb.at(1, 0, 1));
    CHECK(l3.at(0, 0, 11) == rgb.at(1, 1, 2));
}

TEST_CASE("codec rejects indivisible sizes") {
    CHECK_THROWS_AS(encode_latent(Image(5, 4, 3), 2), CodecError);
    CHECK_THROWS_AS(decode_latent(Image(2, 2, 5), 2), CodecError);
    CHECK_THROWS_AS(downsample_mask(Image(3, 4, 1), 2), CodecError);
    CHECK_THROWS_AS(patchify(Image(3, 4, 2), 2), CodecError);
}

TEST_CASE("mask downsampling is a block max") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto m = test::random_mask(rng, 8, 12);
        const auto d = downsample_mask(m, 2);
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 6; ++x) {
                float mx = 0.0f;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) mx = std::max(mx, m.at(2 * y + dy, 2 * x + dx, 0));
                }
                CHECK(d.at(y, x, 0) == mx);
            }
        }
    }
}

TEST_CASE("patchify is a bit-exact bijection with row-major order") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const int p = 1 + static_cast<int>(uniform_index(rng, 3));
        const int gh = 1 + static_cast<int>(uniform_index(rng, 5)), gw = 1 + static_cast<int>(uniform_index(rng, 5));
        const int c = 1 + static_cast<int>(uniform_index(rng, 13));
        const auto stack = test::random_image(rng, gh * p, gw * p, c);
        const auto tok = patchify(stack, p);
        REQUIRE(tok.count() == gh * gw);
        CHECK(tok.values.cols() == c * p * p);
        const int t = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(tok.count())));
        const int cc = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(c)));
        const int py = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(p)));
        const int px = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(p)));
        CHECK(tok.values(t, (cc * p + py) * p + px) == stack.at(tok.row_of(t) * p + py, tok.col_of(t) * p + px, cc));
        CHECK(bitwise_equal(unpatchify(tok), stack));
    }
}

TEST_CASE("token budget") {
    CHECK(tokens_per_frame(16, 16) == 16);
    CHECK(tokens_per_frame(32, 32) == 64);
    CHECK(tokens_per_frame(16, 16, 1, 1) == 256);
    CHECK_NOTHROW(check_visual_cap(1024, 1024));
    CHECK_THROWS_AS(check_visual_cap(1025, 1024), VisualCapError);
    CHECK_THROWS_AS(tokens_per_frame(10, 16), CodecError);
}

TEST_CASE("concat_channels puts latent channels first") {
    Image a(2, 2, 2, 0.25f), b(2, 2, 1, 1.0f);
    const auto c = concat_channels(a, b);
    CHECK(c.channels == 3);
    CHECK(c.at(1, 1, 1) == 0.25f);
    CHECK(c.at(1, 1, 2) == 1.0f);
    CHECK_THROWS_AS(concat_channels(a, Image(3, 2, 1)), CodecError);
}
