#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <functional>

#include "ace/eval_metrics.hpp"
#include "ace/task_forge.hpp"
#include "support.hpp"

using namespace ace;
using namespace ace::eval;

namespace {

// Exponential recursion over the three edit operations; only for short strings.
int lev_recursive(std::string_view a, std::string_view b) {
    if (a.empty()) return static_cast<int>(b.size());
    if (b.empty()) return static_cast<int>(a.size());
    const int sub = lev_recursive(a.substr(1), b.substr(1)) + (a[0] == b[0] ? 0 : 1);
    return std::min({sub, lev_recursive(a.substr(1), b) + 1, lev_recursive(a, b.substr(1)) + 1});
}

std::string random_word(Rng& rng, std::size_t max_len, int alphabet) {
    std::string s(uniform_index(rng, max_len + 1), 'a');
    for (char& c : s) c = static_cast<char>('a' + uniform_index(rng, static_cast<std::uint64_t>(alphabet)));
    return s;
}

}  // namespace

TEST_CASE("effective score threshold is mean minus std") {
    const double mean = 0.5258, std = 0.1765;
    const std::vector<double> scores{0.3494, 0.3492, 0.9, 0.1};
    const auto r = face_similarity_es(scores, mean, std);
    CHECK(r.threshold == doctest::Approx(0.3493).epsilon(1e-12));
    CHECK(r.es == 0.5);
    CHECK(r.mean_score == doctest::Approx((0.3494 + 0.3492 + 0.9 + 0.1) / 4));
    const std::vector<double> at{mean - std};
    CHECK(face_similarity_es(at, mean, std).es == 0.0);
    CHECK_THROWS(face_similarity_es({}, mean, std));
}

TEST_CASE("levenshtein") {
    CHECK(levenshtein("kitten", "sitting") == 3);
    CHECK(levenshtein("", "") == 0);
    CHECK(levenshtein("abc", "") == 3);
    CHECK(levenshtein("flaw", "lawn") == 2);
    Rng rng(3);
    for (int i = 0; i < 300; ++i) {
        const auto a = random_word(rng, 7, 3), b = random_word(rng, 7, 3), c = random_word(rng, 7, 3);
        const int ab = levenshtein(a, b);
        CHECK(ab == lev_recursive(a, b));
        CHECK(ab == levenshtein(b, a));
        CHECK((ab == 0) == (a == b));
        CHECK(ab <= levenshtein(a, c) + levenshtein(c, b));
        CHECK(ab >= static_cast<int>(std::max(a.size(), b.size()) - std::min(a.size(), b.size())));
        CHECK(ab <= static_cast<int>(std::max(a.size(), b.size())));
    }
}

TEST_CASE("text metrics") {
    CHECK(text_metrics("", "").sentence_accuracy == 1.0);
    CHECK(text_metrics("", "").ned == 1.0);
    const auto r = text_metrics("hello\nkitten", "hello\nsitting");
    CHECK(r.sentence_accuracy == 0.5);
    CHECK(r.ned == doctest::Approx((1.0 + (1.0 - 3.0 / 7.0)) / 2.0));
    const auto missing = text_metrics("abc", "abc\nxy");
    CHECK(missing.sentence_accuracy == 0.5);
    CHECK(missing.ned == doctest::Approx(0.5));
    CHECK(text_metrics("a\r\nb", "a\nb").sentence_accuracy == 1.0);
}

TEST_CASE("pixel distances satisfy the distance axioms") {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const auto a = test::random_image(rng, 6, 5, 3), b = test::random_image(rng, 6, 5, 3),
                   c = test::random_image(rng, 6, 5, 3);
        const auto ab = pixel_distances(a, b), ba = pixel_distances(b, a);
        const auto ac = pixel_distances(a, c), cb = pixel_distances(c, b);
        CHECK(ab.l1 >= 0.0);
        CHECK(ab.l2 >= 0.0);
        CHECK(ab.l1 == ba.l1);
        CHECK(ab.l2 == ba.l2);
        CHECK(pixel_distances(a, a).l1 == 0.0);
        CHECK(pixel_distances(a, a).l2 == 0.0);
        CHECK(ab.l1 <= ac.l1 + cb.l1 + 1e-12);
        CHECK(std::sqrt(ab.l2) <= std::sqrt(ac.l2) + std::sqrt(cb.l2) + 1e-12);
        CHECK(ab.l1 * ab.l1 <= ab.l2 + 1e-12);
        CHECK(ab.l2 <= ab.l1 + 1e-12);
    }
    Image x(2, 2, 1, 0.0f), y(2, 2, 1, 0.0f);
    y.data = {1.0f, 0.5f, 0.0f, 0.0f};
    CHECK(pixel_distances(x, y).l1 == 0.375);
    CHECK(pixel_distances(x, y).l2 == 0.3125);
    CHECK_THROWS_AS(pixel_distances(x, Image(2, 3, 1, 0.0f)), std::invalid_argument);
}

TEST_CASE("toy embedder") {
    const ToyEmbedder e;
    Rng rng(2);
    const auto img = test::random_image(rng, 9, 7, 3);
    const auto v = e.embed_image(img);
    CHECK(v.size() == static_cast<std::size_t>(ToyEmbedder::kDims));
    double n = 0.0;
    for (double x : v) n += x * x;
    CHECK(n == doctest::Approx(1.0));
    CHECK(embedding_similarity(img, img, e) == doctest::Approx(1.0));
    CHECK(cosine_similarity(e.embed_image(Image(8, 8, 3, 0.5f)), e.embed_image(Image(8, 8, 3, 0.5f))) ==
          doctest::Approx(1.0));
    Image gray(8, 8, 1, 0.3f);
    Image rgb(8, 8, 3, 0.3f);
    CHECK(e.embed_image(gray) == e.embed_image(rgb));
    CHECK(e.embed_text("Red Square") == e.embed_text("red square"));
    CHECK(cosine_similarity(e.embed_text("red square"), e.embed_text("blue circle")) < 1.0);
    CHECK_THROWS(e.embed_image(Image()));
    CHECK_THROWS(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 0}));
    CHECK_THROWS(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1}));
}

TEST_CASE("direction similarity") {
    const std::vector<double> a{1, 0, 0}, b{2, 0, 0}, z{0, 0, 0}, o{0, 1, 0};
    CHECK(*direction_similarity(a, b) == doctest::Approx(1.0));
    CHECK(*direction_similarity(a, o) == doctest::Approx(0.0));
    CHECK_FALSE(direction_similarity(a, z).has_value());
    const ToyEmbedder e;
    const Image s(8, 8, 3, 0.2f);
    CHECK_FALSE(direction_similarity(s, s, "a", "b", e).has_value());
    CHECK_FALSE(direction_similarity(s, Image(8, 8, 3, 0.7f), "same", "same", e).has_value());
    const auto d = direction_similarity(s, Image(8, 8, 3, 0.7f), "dark", "bright", e);
    REQUIRE(d.has_value());
    CHECK(*d >= -1.0);
    CHECK(*d <= 1.0);
}

TEST_CASE("report means and csv") {
    MetricReport r;
    r.rows = {{"a-1", "a", 0.1, 0.01, 0.9, 0.5}, {"a-2", "a", 0.3, 0.09, 0.7, std::nullopt},
              {"b-1", "b", 0.2, 0.04, 0.8, 0.1}};
    const auto ma = r.mean("a");
    CHECK(ma.l1 == doctest::Approx(0.2));
    CHECK(ma.l2 == doctest::Approx(0.05));
    CHECK(*ma.direction_similarity == doctest::Approx(0.5));
    const auto all = r.mean();
    CHECK(all.l1 == doctest::Approx(0.2));
    CHECK(*all.direction_similarity == doctest::Approx(0.3));
    CHECK(r.categories() == std::vector<std::string>{"a", "b"});
    const auto csv = r.to_csv();
    CHECK(csv.rfind("sample,category,l1,l2,image_similarity,direction_similarity\n", 0) == 0);
    CHECK(csv.find("a-2,a,0.3,0.09,0.7,undefined\n") != std::string::npos);
    CHECK(csv.find("mean,a,") != std::string::npos);
    CHECK(csv.find("mean,,") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 + 2 + 1);
}

TEST_CASE("evaluate_dirs pairs files by stem") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "ace_test_eval";
    fs::remove_all(dir);
    for (auto d : {"pred", "ref", "src"}) fs::create_directories(dir / d);
    for (std::uint64_t i = 0; i < 3; ++i) {
        const auto s = forge::generate(forge::TaskKind::semantic_invert, i, {16, 1});
        const std::string stem = "invert-" + std::to_string(i);
        write_image(dir / "ref" / (stem + ".png"), s.target);
        write_image(dir / "src" / (stem + ".png"), s.lcu.current().frames[0].image);
        write_image(dir / "pred" / (stem + ".png"), i == 0 ? s.target : s.lcu.current().frames[0].image);
    }
    {
        std::ofstream caps(dir / "captions.tsv");
        caps << "invert-0\tred square\tcyan square\n";
    }
    const ToyEmbedder e;
    const auto report = evaluate_dirs({dir / "pred", dir / "ref", dir / "src", dir / "captions.tsv"}, e);
    REQUIRE(report.rows.size() == 3);
    CHECK(report.rows[0].sample == "invert-0");
    CHECK(report.rows[0].category == "invert");
    CHECK(report.rows[0].l1 == 0.0);
    CHECK(report.rows[0].direction_similarity.has_value());
    CHECK_FALSE(report.rows[1].direction_similarity.has_value());
    CHECK(report.rows[1].l1 > 0.0);

    write_image(dir / "pred" / "orphan-1.png", Image(16, 16, 3, 0.0f));
    CHECK_THROWS(evaluate_dirs({dir / "pred", dir / "ref", std::nullopt, std::nullopt}, e));
    fs::remove(dir / "pred" / "orphan-1.png");
    write_image(dir / "pred" / "invert-0.png", Image(8, 8, 3, 0.0f));
    CHECK_THROWS(evaluate_dirs({dir / "pred", dir / "ref", std::nullopt, std::nullopt}, e));
    CHECK_THROWS(evaluate_dirs({dir / "nope", dir / "ref", std::nullopt, std::nullopt}, e));
    CHECK_THROWS(evaluate_dirs({dir / "ref", dir / "ref", std::nullopt, dir / "missing.tsv"}, e));
    fs::create_directories(dir / "empty");
    CHECK_THROWS(evaluate_dirs({dir / "empty", dir / "ref", std::nullopt, std::nullopt}, e));
    fs::remove_all(dir);
}
