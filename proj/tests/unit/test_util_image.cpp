#include <doctest.h>

#include <filesystem>
#include <set>

#include "ace/image.hpp"
#include "ace/util.hpp"
#include "support.hpp"

using namespace ace;

TEST_CASE("base64 known vectors") {
    auto enc = [](std::string_view s) {
        return base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    };
    CHECK(enc("") == "");
    CHECK(enc("f") == "Zg==");
    CHECK(enc("fo") == "Zm8=");
    CHECK(enc("foo") == "Zm9v");
    CHECK(enc("foobar") == "Zm9vYmFy");
}

TEST_CASE("base64 round trip on random bytes") {
    Rng rng(1);
    for (int n = 0; n < 200; ++n) {
        std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n));
        for (auto& b : bytes) b = static_cast<std::uint8_t>(uniform_index(rng, 256));
        CHECK(base64_decode(base64_encode(bytes)) == bytes);
    }
}

TEST_CASE("base64 rejects malformed input") {
    CHECK_THROWS_AS(base64_decode("abc"), std::invalid_argument);
    CHECK_THROWS_AS(base64_decode("ab!d"), std::invalid_argument);
    CHECK_THROWS_AS(base64_decode("a===") , std::invalid_argument);
    CHECK_THROWS_AS(base64_decode("ab==abcd"), std::invalid_argument);
}

TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("derive_seed is deterministic and key sensitive") {
    CHECK(derive_seed(7, {1, 2}) == derive_seed(7, {1, 2}));
    std::set<std::uint64_t> seen;
    for (std::uint64_t a = 0; a < 20; ++a) {
        for (std::uint64_t b = 0; b < 20; ++b) seen.insert(derive_seed(3, {a, b}));
    }
    CHECK(seen.size() == 400);
    CHECK(derive_seed(7, {1, 2}) != derive_seed(7, {2, 1}));
    CHECK(derive_seed(7, {1}) != derive_seed(8, {1}));
}

TEST_CASE("draws have the expected moments") {
    Rng rng(42);
    const int n = 200000;
    double s = 0, s2 = 0, u = 0;
    for (int i = 0; i < n; ++i) {
        const double x = normal_draw(rng);
        s += x;
        s2 += x * x;
        const double y = uniform_draw(rng);
        REQUIRE(y >= 0.0);
        REQUIRE(y < 1.0);
        u += y;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
    CHECK(std::abs(u / n - 0.5) < 0.005);
    for (int i = 0; i < 1000; ++i) CHECK(uniform_index(rng, 7) < 7);
}

TEST_CASE("png and pnm round trips are exact on the byte grid") {
    Rng rng(3);
    for (int c : {1, 3}) {
        for (int trial = 0; trial < 20; ++trial) {
            const int h = 1 + static_cast<int>(uniform_index(rng, 20)), w = 1 + static_cast<int>(uniform_index(rng, 20));
            const auto img = test::random_byte_image(rng, h, w, c);
            CHECK(decode_png(encode_png(img)) == img);
            CHECK(decode_pnm(encode_pnm(img)) == img);
        }
    }
}

TEST_CASE("png encoding is deterministic and clamps") {
    Image img(2, 2, 3, 0.5f);
    img.data[0] = 2.0f;
    img.data[1] = -1.0f;
    const auto a = encode_png(img), b = encode_png(img);
    CHECK(a == b);
    const auto back = decode_png(a);
    CHECK(back.data[0] == 1.0f);
    CHECK(back.data[1] == 0.0f);
    CHECK(to_byte(0.5f) == 128);
}

TEST_CASE("image io errors") {
    std::vector<std::uint8_t> junk{1, 2, 3, 4, 5};
    CHECK_THROWS_AS(decode_png(junk), ImageIoError);
    CHECK_THROWS_AS(decode_pnm(junk), ImageIoError);
    CHECK_THROWS(read_image("/nonexistent/file.png"));
    CHECK_THROWS(Image(-1, 2, 3));
}

TEST_CASE("write_image and read_image agree by extension") {
    Rng rng(4);
    const auto dir = std::filesystem::temp_directory_path() / "ace_test_image_io";
    std::filesystem::create_directories(dir);
    const auto rgb = test::random_byte_image(rng, 5, 7, 3);
    const auto gray = test::random_byte_image(rng, 5, 7, 1);
    write_image(dir / "a.png", rgb);
    write_image(dir / "a.ppm", rgb);
    write_image(dir / "b.pgm", gray);
    CHECK(read_image(dir / "a.png") == rgb);
    CHECK(read_image(dir / "a.ppm") == rgb);
    CHECK(read_image(dir / "b.pgm") == gray);
    std::filesystem::remove_all(dir);
}

TEST_CASE("bitwise_equal distinguishes signed zero") {
    Image a(1, 1, 1, 0.0f), b(1, 1, 1, -0.0f);
    CHECK(a == b);
    CHECK_FALSE(bitwise_equal(a, b));
    CHECK(bitwise_equal(a, a));
}
