#include <doctest.h>

#include <set>

#include "ace/tokenized_context.hpp"
#include "support.hpp"

using namespace ace;

TEST_CASE("tokenized context layout") {
    Rng rng(1);
    const auto lcu = test::two_unit_lcu(rng, 8);
    const Vocabulary vocab;
    const auto ctx = tokenize_context(lcu, vocab, 8, 8);
    REQUIRE(ctx.frames.size() == 5);
    CHECK(ctx.condition_frame_count() == 4);
    CHECK(ctx.target_index() == 4);
    CHECK(ctx.total_tokens() == 5 * tokens_per_frame(8, 8));
    CHECK(ctx.unit_text.size() == 2);

    const auto& t = ctx.target();
    CHECK(t.unit == 1);
    CHECK(t.frame == 2);
    CHECK(t.indicator == 0);
    CHECK(t.frame_coord == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(ctx.frames[static_cast<std::size_t>(i)].indicator == i + 1);
        CHECK(ctx.frames[static_cast<std::size_t>(i)].frame_coord == i);
    }
    // the current instruction references the globalized ids of its own frames
    const auto& cur = ctx.unit_text.back();
    CHECK(std::count(cur.begin(), cur.end(), vocab.indicator_id(3)) == 1);
    CHECK(std::count(cur.begin(), cur.end(), vocab.indicator_id(4)) == 1);
    CHECK(std::count(cur.begin(), cur.end(), vocab.indicator_id(1)) == 0);

    const auto table = ctx.token_table();
    CHECK(static_cast<int>(table.size()) == ctx.total_tokens());
    CHECK(table.back().unit == 1);
    CHECK(table.back().frame == 2);
}

TEST_CASE("token values carry the model range and mask channel") {
    Rng rng(2);
    Image img(8, 8, 3, 1.0f);
    Image mask(8, 8, 1, 0.0f);
    mask.at(0, 0, 0) = 1.0f;
    const auto lcu = build_lcu({}, build_cu("x {image1}", {{img, mask}}, TaskType::free_form), 0);
    const auto ctx = tokenize_context(lcu, Vocabulary(), 8, 8);
    const auto& f = ctx.frames[0];
    REQUIRE(f.tokens.values.cols() == 13 * 4);
    // 12 latent channels of value +1, then the mask channel
    for (int c = 0; c < 48; ++c) CHECK(f.tokens.values(0, c) == 1.0f);
    CHECK(f.tokens.values(0, 48) == 1.0f);
    CHECK(f.tokens.values(0, 49) == 0.0f);
    CHECK(f.tokens.values(1, 48) == 0.0f);
    const auto& t = ctx.target();
    for (int c = 0; c < 48; ++c) CHECK(t.tokens.values(0, c) == 0.0f);
    for (int c = 48; c < 52; ++c) CHECK(t.tokens.values(0, c) == 1.0f);
}

TEST_CASE("grayscale frames replicate to three channels") {
    Image g(2, 2, 1);
    g.data = {0.1f, 0.2f, 0.3f, 0.4f};
    const auto rgb = as_rgb(g);
    CHECK(rgb.channels == 3);
    CHECK(rgb.at(1, 0, 2) == 0.3f);
    CHECK_THROWS(as_rgb(Image(2, 2, 2)));
}

TEST_CASE("caps are enforced at tokenization") {
    Rng rng(3);
    const auto lcu = test::two_unit_lcu(rng, 16);
    ContextOptions opt;
    opt.visual_cap = 4 * 16;
    CHECK_THROWS_AS(tokenize_context(lcu, Vocabulary(), 16, 16, opt), VisualCapError);
    opt.visual_cap = 5 * 16;
    CHECK_NOTHROW(tokenize_context(lcu, Vocabulary(), 16, 16, opt));
    opt.max_image_number = 3;
    CHECK_THROWS_AS(tokenize_context(lcu, Vocabulary(), 16, 16, opt), FrameCapError);
}

TEST_CASE("the unconditional branch drops only the current instruction") {
    Rng rng(4);
    const auto ctx = tokenize_context(test::two_unit_lcu(rng), Vocabulary(), 8, 8);
    const auto u = without_current_instruction(ctx);
    CHECK(u.unit_text.front() == ctx.unit_text.front());
    CHECK(u.unit_text.back().empty());
    CHECK(u.frames.size() == ctx.frames.size());
}

TEST_CASE("text-only requests tokenize to the target alone") {
    const auto lcu = build_lcu({}, build_cu("draw a red circle", {}, TaskType::text_guided), 0);
    const auto ctx = tokenize_context(lcu, Vocabulary(), 16, 16);
    CHECK(ctx.frames.size() == 1);
    CHECK(ctx.condition_frame_count() == 0);
    CHECK(ctx.target().frame == 0);
}
