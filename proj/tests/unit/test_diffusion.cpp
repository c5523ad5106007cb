#include <doctest.h>

#include <filesystem>
#include <numbers>

#include "ace/diffusion.hpp"
#include "ace/task_forge.hpp"
#include "support.hpp"

using namespace ace;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig c;
    c.model = test::tiny_config();
    c.learning_rate = 1e-3;
    c.weight_decay = 0.0;
    c.batch_size = 2;
    c.diffusion_steps = 50;
    c.canvas = 8;
    c.seed = 5;
    c.log_every = 0;
    c.stages = {{"one", {"semantic_invert"}, 64, 1, 6}, {"two", {"copy_source"}, 128, 2, 4}};
    return c;
}

SampleSource forge_source(std::uint64_t seed) {
    return [seed](const StageConfig& stage, std::uint64_t index) {
        return forge::mixed_sample(stage.tasks, seed, index, {8, 1});
    };
}

double cosine_f(double t, int steps, double s = 0.008) {
    const double c = std::cos((t / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
}

}  // namespace

TEST_CASE("cosine schedule telescopes to f(t+1)/f(0)") {
    const auto s = NoiseSchedule::cosine(1000);
    CHECK(s.steps() == 1000);
    for (int t = 0; t < 990; ++t) {
        CHECK(s.alpha_bar(t) == doctest::Approx(cosine_f(t + 1, 1000) / cosine_f(0, 1000)).epsilon(1e-9));
    }
    for (int t = 1; t < 1000; ++t) CHECK(s.alpha_bar(t) <= s.alpha_bar(t - 1));
    CHECK(s.alpha_bar(0) > 0.9999);
    CHECK(s.alpha_bar(999) > 0.0);
    CHECK(s.alpha_bar(999) < 1e-4);
    CHECK_THROWS_AS(s.alpha_bar(1000), std::out_of_range);
    CHECK_THROWS_AS(s.alpha_bar(-1), std::out_of_range);
    CHECK_THROWS(NoiseSchedule::cosine(0));
    CHECK_THROWS(NoiseSchedule({0.5, 0.6}));
    CHECK_THROWS(NoiseSchedule({1.5}));
    CHECK_THROWS(NoiseSchedule({0.0}));
}

TEST_CASE("q_sample has the forward-process moments") {
    const auto s = NoiseSchedule::cosine(100);
    Rng rng(1);
    const int t = 40, n = 20000;
    const double a = s.alpha_bar(t);
    ag::Mat<double> x0(1, 3);
    x0 << 0.7, -0.3, 0.1;
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(3), sum2 = Eigen::ArrayXd::Zero(3);
    for (int i = 0; i < n; ++i) {
        ag::Mat<double> noise(1, 3);
        for (int c = 0; c < 3; ++c) noise(0, c) = normal_draw(rng);
        const auto x = q_sample<double>(s, x0, t, noise);
        sum += x.row(0).transpose().array();
        sum2 += x.row(0).transpose().array().square();
    }
    for (int c = 0; c < 3; ++c) {
        const double mean = sum(c) / n, var = sum2(c) / n - mean * mean;
        CHECK(std::abs(mean - std::sqrt(a) * x0(0, c)) < 4.0 * std::sqrt((1 - a) / n));
        CHECK(var == doctest::Approx(1 - a).epsilon(0.05));
    }
    ag::Mat<double> zero = ag::Mat<double>::Zero(1, 3);
    CHECK(q_sample<double>(s, x0, 0, zero).isApprox(std::sqrt(s.alpha_bar(0)) * x0));
    CHECK_THROWS(q_sample<double>(s, x0, 0, ag::Mat<double>::Zero(2, 3)));
}

TEST_CASE("ddim timesteps") {
    const auto a = ddim_timesteps(1000, 50);
    REQUIRE(a.size() == 50);
    CHECK(a.front() == 999);
    CHECK(a.back() == 19);
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i] < a[i - 1]);
    const auto b = ddim_timesteps(10, 10);
    CHECK(b == std::vector<int>{9, 8, 7, 6, 5, 4, 3, 2, 1, 0});
    CHECK_THROWS(ddim_timesteps(10, 0));
    CHECK_THROWS(ddim_timesteps(10, 11));
}

TEST_CASE("ddim with the exact noise oracle recovers the data point") {
    const auto s = NoiseSchedule::cosine(200);
    RowMatrix<float> x0(3, 4);
    x0 << 0.5f, -0.5f, 0.25f, 0.9f, -0.9f, 0.0f, 0.1f, -0.2f, 0.3f, 0.4f, -0.6f, 0.7f;
    const NoisePredictor oracle = [&](const RowMatrix<float>& x, int t, bool) {
        const double a = s.alpha_bar(t);
        return RowMatrix<float>(((x.cast<double>() - std::sqrt(a) * x0.cast<double>()) / std::sqrt(1 - a)).cast<float>());
    };
    for (int steps : {1, 10, 200}) {
        SamplerConfig cfg;
        cfg.steps = steps;
        cfg.seed = 3;
        const auto out = ddim_sample(s, oracle, 3, 4, cfg);
        CHECK((out - x0).cwiseAbs().maxCoeff() < 1e-3f);
    }
}

TEST_CASE("guidance scale 1 never runs the unconditional branch") {
    const auto s = NoiseSchedule::cosine(50);
    int uncond_calls = 0;
    const NoisePredictor p = [&](const RowMatrix<float>& x, int, bool conditional) {
        if (!conditional) ++uncond_calls;
        return RowMatrix<float>(RowMatrix<float>::Constant(x.rows(), x.cols(), conditional ? 0.0f : 0.2f));
    };
    const NoisePredictor cond_only = [&](const RowMatrix<float>& x, int, bool) {
        return RowMatrix<float>(RowMatrix<float>::Zero(x.rows(), x.cols()));
    };
    SamplerConfig cfg;
    cfg.steps = 10;
    cfg.seed = 9;
    const auto a = ddim_sample(s, p, 2, 3, cfg);
    CHECK(uncond_calls == 0);
    CHECK(a == ddim_sample(s, cond_only, 2, 3, cfg));
    cfg.guidance_scale = 3.0;
    const auto b = ddim_sample(s, p, 2, 3, cfg);
    CHECK(uncond_calls == 10);
    CHECK(b != a);
}

TEST_CASE("sampling is deterministic in the seed") {
    const auto s = NoiseSchedule::cosine(50);
    const NoisePredictor p = [](const RowMatrix<float>& x, int, bool) { return RowMatrix<float>(x * 0.5f); };
    SamplerConfig cfg;
    cfg.steps = 5;
    cfg.seed = 1;
    const auto a = ddim_sample(s, p, 4, 4, cfg), b = ddim_sample(s, p, 4, 4, cfg);
    CHECK(a == b);
    cfg.seed = 2;
    CHECK(ddim_sample(s, p, 4, 4, cfg) != a);
}

TEST_CASE("target tokens round trip") {
    Rng rng(2);
    const auto cfg = test::small_config();
    for (int trial = 0; trial < 20; ++trial) {
        const auto img = test::random_image(rng, 8, 12, 3);
        const auto back = decode_target_tokens(target_tokens(img, cfg), 8, 12, cfg);
        REQUIRE(back.same_shape(img));
        for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) < 1e-6f);
    }
    RowMatrix<float> big = RowMatrix<float>::Constant(4, cfg.out_dim(), 5.0f);
    for (float v : decode_target_tokens(big, 8, 8, cfg).data) CHECK(v == 1.0f);
    CHECK_THROWS(decode_target_tokens(big, 6, 8, cfg));
    CHECK_THROWS(decode_target_tokens(big, 8, 12, cfg));
    CHECK(epsilon_loss(big, RowMatrix<float>::Constant(4, cfg.out_dim(), 3.0f)) == doctest::Approx(4.0));
}

TEST_CASE("train config parsing") {
    const std::string ini = R"(
[train]
learning_rate = 3e-4
batch_size = 4
seed = 11
canvas = 16

[model]
width = 24
heads = 2
depth = 1

[stage1]
name = base
tasks = semantic_invert, repaint
visual_cap = 256
max_images = 1
steps = 10

[stage2]
name = multi
tasks = chain
visual_cap = 1024
max_images = 4
steps = 20
)";
    const auto c = parse_train_config(ini);
    CHECK(c.learning_rate == 3e-4);
    CHECK(c.weight_decay == 5e-4);
    CHECK(c.batch_size == 4);
    CHECK(c.seed == 11);
    CHECK(c.model.width == 24);
    CHECK(c.model.depth == 1);
    REQUIRE(c.stages.size() == 2);
    CHECK(c.stages[0].tasks == std::vector<std::string>{"semantic_invert", "repaint"});
    CHECK(c.stages[1].max_images == 4);
    CHECK(c.total_steps() == 30);
    CHECK_NOTHROW(c.validate());
    CHECK(parse_train_config(c.to_text()).to_text() == c.to_text());
    CHECK(parse_train_config(c.to_text()).hash() == c.hash());

    CHECK_THROWS(parse_train_config(ini + "\n[train2]\nx = 1\n"));
    CHECK_THROWS(parse_train_config("[train]\nlearning_rat = 1\n"));
    CHECK_THROWS(parse_train_config("[train]\nbatch_size = four\n"));
    CHECK_THROWS(parse_train_config("[model]\nwidth = 24\ncolour = 2\n"));
    CHECK_THROWS(parse_train_config("[stage2]\nname = x\n"));

    TrainConfig shrinking = c;
    shrinking.stages[1].max_images = 0;
    CHECK_THROWS(shrinking.validate());
    shrinking = c;
    shrinking.stages[1].visual_cap = 100;
    CHECK_THROWS(shrinking.validate());
    CHECK_THROWS(load_train_config("/nonexistent.ini"));
}

TEST_CASE("adamw first step oracle") {
    ParamSet<float> p;
    p.add("w", ag::Mat<float>::Constant(1, 3, 2.0f));
    ParamSet<float> g;
    ag::Mat<float> gv(1, 3);
    gv << 0.5f, -4.0f, 0.0f;
    g.add("w", gv);
    AdamW opt(p, 0.1, 0.01);
    opt.step(p, g);
    CHECK(opt.step_count() == 1);
    const double expect[] = {2.0 - 0.1 * (1.0 + 0.02), 2.0 - 0.1 * (-1.0 + 0.02), 2.0 - 0.1 * 0.02};
    for (int i = 0; i < 3; ++i) CHECK(p.at("w")(0, i) == doctest::Approx(expect[i]).epsilon(1e-5));
}

TEST_CASE("prepare_sample draws dropout, timestep and noise from the stream") {
    const auto cfg = test::tiny_config();
    const auto schedule = NoiseSchedule::cosine(50);
    const auto sample = forge::generate(forge::TaskKind::semantic_invert, 3, {8, 1});
    Rng a(7), b(7);
    const auto x = prepare_sample(sample, cfg, schedule, 0.0, {}, a);
    const auto y = prepare_sample(sample, cfg, schedule, 0.0, {}, b);
    CHECK(x.timestep == y.timestep);
    CHECK(x.noise == y.noise);
    CHECK_FALSE(x.dropped_instruction);
    Rng c(7);
    const auto z = prepare_sample(sample, cfg, schedule, 1.0, {}, c);
    CHECK(z.dropped_instruction);
    CHECK(z.context.unit_text.back().empty());
    CHECK(z.timestep == x.timestep);
    Rng d(7);
    CHECK_THROWS_AS(prepare_sample(forge::generate(forge::TaskKind::copy_source, 3, {8, 1}), cfg, schedule, 0.0,
                                   StepLimits{1024, 1}, d),
                    StageCapError);
}

TEST_CASE("trainer steps are deterministic and reduce the loss on a fixed batch") {
    const auto cfg = tiny_train_config();
    DiffusionTransformer<float> m1(cfg.model, cfg.seed), m2(cfg.model, cfg.seed);
    Trainer t1(m1, cfg), t2(m2, cfg);
    std::vector<Sample> batch{forge::generate(forge::TaskKind::semantic_invert, 1, {8, 1}),
                              forge::generate(forge::TaskKind::semantic_invert, 2, {8, 1})};
    for (long s = 0; s < 5; ++s) {
        const auto a = t1.step(batch, s), b = t2.step(batch, s);
        CHECK(a.loss == b.loss);
        CHECK(a.grad_norm == b.grad_norm);
    }
    CHECK(m1.params().at("final.linear.weight") == m2.params().at("final.linear.weight"));

    // the same timestep and noise every step: plain regression that must make progress
    TrainConfig fixed = cfg;
    fixed.learning_rate = 3e-3;
    DiffusionTransformer<float> m3(cfg.model, cfg.seed);
    Trainer t3(m3, fixed);
    const double first = t3.step(batch, 0).loss;
    double last = first;
    for (int i = 0; i < 60; ++i) last = t3.step(batch, 0).loss;
    CHECK(last < 0.7 * first);
    CHECK_THROWS(t3.step({}, 0));
}

TEST_CASE("a non-finite loss is reported with diagnostics") {
    const auto cfg = tiny_train_config();
    DiffusionTransformer<float> m(cfg.model, cfg.seed);
    m.params().at("patch_embed.weight")(0, 0) = std::numeric_limits<float>::quiet_NaN();
    Trainer t(m, cfg);
    std::vector<Sample> batch{forge::generate(forge::TaskKind::semantic_invert, 1, {8, 1})};
    try {
        t.step(batch, 3);
        FAIL("expected DiffusionError");
    } catch (const DiffusionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step 3") != std::string::npos);
        CHECK(msg.find("semantic_invert") != std::string::npos);
    }
}

TEST_CASE("run_stages writes one checkpoint per stage and resumes by step") {
    const auto dir = std::filesystem::temp_directory_path() / "ace_test_stages";
    std::filesystem::remove_all(dir);
    const auto cfg = tiny_train_config();
    DiffusionTransformer<float> model(cfg.model, cfg.seed);
    const auto reports = run_stages(model, cfg, forge_source(1), dir);
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].steps_run == 6);
    CHECK(reports[1].end_step == 10);
    const auto c1 = load_checkpoint(reports[0].checkpoint);
    const auto c2 = load_checkpoint(reports[1].checkpoint);
    CHECK(c1.meta.step == 6);
    CHECK(c1.meta.stage == "one");
    CHECK(c2.meta.step == 10);
    CHECK(c2.meta.diffusion_steps == 50);
    CHECK(c2.model.params().at("final.linear.weight") == model.params().at("final.linear.weight"));

    auto resumed = c1.model;
    const auto r2 = run_stages(resumed, cfg, forge_source(1), dir / "resume", c1.meta.step);
    REQUIRE(r2.size() == 1);
    CHECK(r2[0].name == "two");
    CHECK(r2[0].steps_run == 4);
    CHECK(load_checkpoint(r2[0].checkpoint).meta.step == 10);

    auto mid = c1.model;
    const auto r3 = run_stages(mid, cfg, forge_source(1), dir / "mid", 8);
    REQUIRE(r3.size() == 1);
    CHECK(r3[0].steps_run == 2);
    CHECK(run_stages(mid, cfg, forge_source(1), dir / "done", 10).empty());

    // a stage whose samples exceed its image cap fails loudly
    TrainConfig bad = cfg;
    bad.stages = {{"one", {"copy_source"}, 128, 1, 2}};
    DiffusionTransformer<float> m2(cfg.model, cfg.seed);
    CHECK_THROWS_AS(run_stages(m2, bad, forge_source(1), dir / "bad"), StageCapError);

    const SampleSource failing = [](const StageConfig&, std::uint64_t) -> Sample { throw std::runtime_error("boom"); };
    CHECK_THROWS_WITH(run_stages(m2, cfg, failing, dir / "fail"), "boom");
    std::filesystem::remove_all(dir);
}

TEST_CASE("sample_image refuses untrained or broken models") {
    const auto cfg = test::tiny_config();
    const auto schedule = NoiseSchedule::cosine(20);
    const auto lcu = forge::generate(forge::TaskKind::semantic_invert, 1, {8, 1}).lcu;
    SamplerConfig sc;
    sc.steps = 4;
    CHECK_THROWS_AS(sample_image(DiffusionTransformer<float>(cfg, 1), schedule, lcu, 8, 8, sc), DiffusionError);
    DiffusionTransformer<float> random(cfg, 1, InitMode::random);
    const auto a = sample_image(random, schedule, lcu, 8, 8, sc);
    CHECK(a.height == 8);
    CHECK(a.channels == 3);
    for (float v : a.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(bitwise_equal(a, sample_image(random, schedule, lcu, 8, 8, sc)));
    random.params().at("blocks.0.mlp.fc1.bias")(0, 0) = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(sample_image(random, schedule, lcu, 8, 8, sc), DiffusionError);
}
