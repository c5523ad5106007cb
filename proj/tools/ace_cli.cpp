// ace: train, sample, eval, pair, forge and serve from one binary.

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "ace/condition_unit.hpp"
#include "ace/diffusion.hpp"
#include "ace/eval_metrics.hpp"
#include "ace/pair_aggregator.hpp"
#include "ace/session_service.hpp"
#include "ace/task_forge.hpp"

namespace fs = std::filesystem;

namespace {

struct RunManifest {
    std::string command;
    std::string config_hash = "none";
    std::uint64_t seed = 0;
    std::string checkpoint_id = "none";
};

void write_manifest(const fs::path& dir, const RunManifest& m) {
    if (!dir.empty()) fs::create_directories(dir);
    std::ofstream out(dir / "run_manifest.txt");
    if (!out) throw std::runtime_error("cannot write " + (dir / "run_manifest.txt").string());
    out << "command = " << m.command << "\n"
        << "config_hash = " << m.config_hash << "\n"
        << "seed = " << m.seed << "\n"
        << "checkpoint_id = " << m.checkpoint_id << "\n";
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) throw std::runtime_error("cannot write " + path.string());
}

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("ace");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    if (const char* env = std::getenv("ACE_LOG_LEVEL")) {
        const auto level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string(env) != "off") {
            throw std::runtime_error(std::string("unknown ACE_LOG_LEVEL '") + env + "'");
        }
        spdlog::set_level(level);
    } else {
        spdlog::set_level(spdlog::level::info);
    }
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    fs::path config;
    fs::path out = "runs";
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> resume;
};

int cmd_train(const TrainArgs& a) {
    ace::TrainConfig cfg = ace::load_train_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();

    long start_step = 0;
    ace::DiffusionTransformer<float> model(cfg.model, cfg.seed);
    if (a.resume) {
        auto loaded = ace::load_checkpoint(*a.resume);
        if (loaded.model.config().to_text() != cfg.model.to_text()) {
            throw std::runtime_error("checkpoint model config differs from " + a.config.string());
        }
        if (loaded.meta.diffusion_steps != cfg.diffusion_steps) {
            throw std::runtime_error("checkpoint was trained with a different diffusion step count");
        }
        start_step = loaded.meta.step;
        model = std::move(loaded.model);
        spdlog::info("resuming from {} at step {}", a.resume->string(), start_step);
    }

    const ace::forge::ForgeOptions forge{cfg.canvas, std::max(1, cfg.history_window)};
    const std::uint64_t data_seed = cfg.seed;
    const ace::SampleSource source = [forge, data_seed](const ace::StageConfig& stage, std::uint64_t index) {
        return ace::forge::mixed_sample(stage.tasks, data_seed, index, forge);
    };
    const auto reports = ace::run_stages(model, cfg, source, a.out, start_step);

    RunManifest m{"train", ace::hex64(cfg.hash()), cfg.seed, "none"};
    for (const auto& r : reports) {
        std::cout << r.name << ": steps " << r.steps_run << " (through " << r.end_step << "), loss " << r.first_loss
                  << " -> " << r.last_loss << ", " << r.checkpoint.string() << "\n";
    }
    if (!reports.empty() && !reports.back().checkpoint.empty()) {
        m.checkpoint_id = ace::load_checkpoint(reports.back().checkpoint).meta.id;
    }
    write_manifest(a.out, m);
    return 0;
}

struct SampleArgs {
    fs::path checkpoint;
    std::optional<fs::path> lcu;
    std::optional<std::string> task;
    fs::path out = "sample.png";
    std::uint64_t seed = 0;
    int steps = 50;
    double guidance = 1.0;
    int canvas = 16;
    std::optional<int> history;
};

int cmd_sample(const SampleArgs& a) {
    if (a.lcu.has_value() == a.task.has_value()) throw std::runtime_error("give exactly one of --lcu or --task");
    auto loaded = ace::load_checkpoint(a.checkpoint);

    ace::LongContextConditionUnit lcu;
    int height = a.canvas, width = a.canvas;
    if (a.lcu) {
        lcu = ace::parse_lcu(read_file(*a.lcu));
    } else {
        const ace::forge::ForgeOptions opts{a.canvas, std::max(1, a.history.value_or(1))};
        lcu = ace::forge::mixed_sample({*a.task}, a.seed, 0, opts).lcu;
    }
    if (a.history) {
        std::vector<ace::ConditionUnit> hist(lcu.units.begin(), lcu.units.end() - 1);
        lcu = ace::build_lcu(hist, lcu.units.back(), *a.history, loaded.model.config().max_image_number);
    }
    const auto& current = lcu.current();
    if (!current.frames.empty()) {
        height = current.frames.front().image.height;
        width = current.frames.front().image.width;
    }

    const auto schedule = ace::NoiseSchedule::cosine(loaded.meta.diffusion_steps);
    ace::SamplerConfig sc;
    sc.steps = std::min(a.steps, loaded.meta.diffusion_steps);
    sc.guidance_scale = a.guidance;
    sc.seed = a.seed;
    const auto image = ace::sample_image(loaded.model, schedule, lcu, height, width, sc);
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    ace::write_image(a.out, image);
    write_manifest(a.out.parent_path(), {"sample", ace::hex64(loaded.model.config().hash()), a.seed, loaded.meta.id});
    std::cout << a.out.string() << " " << width << "x" << height << "\n";
    return 0;
}

struct EvalArgs {
    ace::eval::EvalInputs inputs;
    fs::path report = "report.csv";
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
    const ace::eval::ToyEmbedder embedder;
    const auto report = ace::eval::evaluate_dirs(a.inputs, embedder);
    write_file(a.report, report.to_csv());
    const auto mean = report.mean();
    std::cout << "samples " << report.rows.size() << ", l1 " << mean.l1 << ", l2 " << mean.l2 << ", image_similarity "
              << mean.image_similarity << "\n";
    write_manifest(a.report.parent_path(), {"eval run", "none", a.seed, "none"});
    return 0;
}

struct PairArgs {
    std::optional<fs::path> features;
    std::optional<fs::path> task_features;
    int planted_clusters = 0;
    int planted_per = 5;
    int k = 8;
    double band_lo = 0.8;
    double band_hi = 0.9;
    double link = 0.65;
    int threads = 1;
    std::uint64_t seed = 0;
    fs::path out = "pairs";
};

int cmd_pair(const PairArgs& a) {
    namespace pairs = ace::pairs;
    if (a.features.has_value() == (a.planted_clusters > 0)) {
        throw std::runtime_error("give exactly one of --features or --planted");
    }
    pairs::FeatureSet fs_;
    std::vector<int> labels;
    if (a.features) {
        fs_.primary = pairs::read_features(*a.features);
        if (a.task_features) fs_.task = pairs::read_features(*a.task_features);
    } else {
        auto planted = pairs::planted_clusters(a.planted_clusters, a.planted_per, a.seed);
        fs_ = std::move(planted.features);
        labels = std::move(planted.labels);
    }

    pairs::AggregatorConfig cfg;
    cfg.k = a.k;
    cfg.seed = a.seed;
    cfg.threads = a.threads;
    cfg.turn1 = {a.link, std::numeric_limits<double>::infinity(), true, false};
    cfg.turn2 = {a.band_lo, a.band_hi, false, false};
    if (cfg.turn2.empty()) throw std::runtime_error("pair band is empty");
    const auto clusters = pairs::aggregate(fs_, cfg);

    const auto& task = fs_.has_task() ? fs_.task : fs_.primary;
    const pairs::SimilarityFn score = [&](int x, int y) { return pairs::cosine(task, x, y); };
    std::vector<pairs::ScoredPair> kept;
    for (const auto& c : clusters) {
        for (const auto& p : pairs::filter_pairs(pairs::harvest_pairs(c.members), score, cfg.turn2)) kept.push_back(p);
    }
    write_file(a.out / "clusters.txt", pairs::clusters_manifest(clusters));
    write_file(a.out / "pairs.txt", pairs::pairs_manifest(kept));
    std::cout << "items " << fs_.size() << ", clusters " << clusters.size() << ", pairs " << kept.size() << "\n";

    if (!labels.empty()) {
        std::set<std::pair<int, int>> truth, got;
        for (int i = 0; i < fs_.size(); ++i) {
            for (int j = i + 1; j < fs_.size(); ++j) {
                if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) truth.emplace(i, j);
            }
        }
        for (const auto& p : kept) got.emplace(std::min(p.a, p.b), std::max(p.a, p.b));
        const bool exact = truth == got;
        std::cout << "planted recovery: " << (exact ? "exact" : "mismatch") << " (" << got.size() << "/" << truth.size()
                  << " pairs)\n";
        if (!exact) throw std::runtime_error("planted pair set not recovered");
    }
    write_manifest(a.out, {"pair run", "none", a.seed, "none"});
    return 0;
}

struct ForgeArgs {
    std::vector<std::string> tasks;
    int count = 4;
    std::uint64_t seed = 0;
    int canvas = 16;
    int history = 1;
    std::string format = "png";
    int threads = 1;
    fs::path out = "forge";
};

int cmd_forge(const ForgeArgs& a) {
    if (a.count < 1) throw std::runtime_error("--count must be positive");
    if (a.format != "png" && a.format != "ppm") throw std::runtime_error("--format must be png or ppm");
    std::vector<std::string> tasks = a.tasks;
    if (tasks.empty() || (tasks.size() == 1 && tasks[0] == "all")) {
        tasks.clear();
        for (auto k : ace::forge::all_task_kinds()) {
            if (k != ace::forge::TaskKind::chain_repeat) tasks.emplace_back(ace::forge::to_string(k));
        }
        tasks.emplace_back("chain");
        tasks.emplace_back("repeat");
    }
    const ace::forge::ForgeOptions opts{a.canvas, a.history};
    fs::create_directories(a.out);

    // Work item = (task, index); items are partitioned across threads and each is a pure function of its seed.
    const std::size_t total = tasks.size() * static_cast<std::size_t>(a.count);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string error;
    std::mutex error_mu;
    auto worker = [&] {
        for (std::size_t w = next++; w < total && !failed; w = next++) {
            const std::string& task = tasks[w / static_cast<std::size_t>(a.count)];
            const auto index = static_cast<std::uint64_t>(w % static_cast<std::size_t>(a.count));
            try {
                const auto sample = ace::forge::mixed_sample({task}, a.seed, index, opts);
                const std::string stem = task + "-" + std::to_string(index);
                write_file(a.out / (stem + ".lcu.json"), ace::serialize_lcu(sample.lcu));
                ace::write_image(a.out / (stem + "." + a.format), sample.target);
            } catch (const std::exception& e) {
                std::lock_guard lock(error_mu);
                if (!failed.exchange(true)) error = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < std::max(1, a.threads); ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failed) throw std::runtime_error(error);
    std::cout << "wrote " << total << " samples to " << a.out.string() << "\n";
    write_manifest(a.out, {"forge dump", "none", a.seed, "none"});
    return 0;
}

struct ServeArgs {
    fs::path checkpoint;
    std::string host = "127.0.0.1";
    int port = 8080;
    int threads = 4;
    int steps = 50;
    double guidance = 1.0;
    int max_history = 8;
    int canvas = 16;
    std::optional<fs::path> ui_dir;
    std::optional<fs::path> port_file;
    fs::path out = ".";
};

std::atomic<ace::service::HttpServer*> g_server{nullptr};

extern "C" void on_signal(int) {
    if (auto* s = g_server.load()) s->stop();
}

int cmd_serve(const ServeArgs& a) {
    auto generator = ace::service::ModelGenerator::from_checkpoint(a.checkpoint, a.steps, a.guidance);
    ace::service::ManagerOptions mo;
    mo.default_canvas = a.canvas;
    mo.max_history = a.max_history;
    mo.max_image_number = generator->model().config().max_image_number;
    ace::service::SessionManager manager(generator, mo);

    ace::service::ServerOptions so;
    so.host = a.host;
    so.port = a.port;
    so.threads = a.threads;
    so.ui_dir = a.ui_dir;
    ace::service::HttpServer server(manager, so);
    const int port = server.bind();
    write_manifest(a.out, {"serve", ace::hex64(generator->model().config().hash()), 0, generator->id()});
    if (a.port_file) write_file(*a.port_file, std::to_string(port) + "\n");
    std::cout << "listening on " << a.host << ":" << port << std::endl;

    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.serve();
    g_server = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ace: unified image creation and editing at desk scale"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "ace 0.1.0");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model through the configured stages");
    t->add_option("--config", train.config, "Training config (INI)")->required()->check(CLI::ExistingFile);
    t->add_option("--out", train.out, "Checkpoint directory")->capture_default_str();
    t->add_option("--seed", train.seed, "Override the config seed");
    t->add_option("--resume", train.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
    t->add_option("--threads", "Accepted for uniformity; training runs on one core");

    SampleArgs sample;
    auto* s = app.add_subcommand("sample", "Generate one image from a checkpoint");
    s->add_option("--checkpoint", sample.checkpoint, "Checkpoint archive")->required();
    s->add_option("--lcu", sample.lcu, "Request in LCU wire format (JSON)")->check(CLI::ExistingFile);
    s->add_option("--task", sample.task, "Forge a request of this task kind instead");
    s->add_option("--out", sample.out, "Output image (.png/.ppm/.pgm)")->capture_default_str();
    s->add_option("--seed", sample.seed, "Sampling seed (also seeds --task)")->capture_default_str();
    s->add_option("--steps", sample.steps, "DDIM steps")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--guidance", sample.guidance, "Classifier-free guidance scale")->capture_default_str();
    s->add_option("--canvas", sample.canvas, "Canvas size for text-only requests")->capture_default_str();
    s->add_option("--history", sample.history, "History window m (re-windows the request)")->check(CLI::NonNegativeNumber);

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluation metrics");
    e->require_subcommand(1);
    auto* er = e->add_subcommand("run", "Score predictions against references");
    er->add_option("--pred-dir", ev.inputs.pred_dir, "Predicted images")->required()->check(CLI::ExistingDirectory);
    er->add_option("--ref-dir", ev.inputs.ref_dir, "Reference images (same file stems)")->required()->check(CLI::ExistingDirectory);
    er->add_option("--src-dir", ev.inputs.src_dir, "Source images, enables direction similarity")->check(CLI::ExistingDirectory);
    er->add_option("--captions", ev.inputs.captions, "TSV: sample, source caption, edited caption")->check(CLI::ExistingFile);
    er->add_option("--report", ev.report, "CSV report path")->capture_default_str();
    er->add_option("--seed", ev.seed, "Recorded in the run manifest");

    PairArgs pair;
    auto* p = app.add_subcommand("pair", "Group items into training pairs");
    p->require_subcommand(1);
    auto* pr = p->add_subcommand("run", "Two-turn union-find aggregation");
    pr->add_option("--features", pair.features, "Primary feature file")->check(CLI::ExistingFile);
    pr->add_option("--task-features", pair.task_features, "Task feature file for turn 2")->check(CLI::ExistingFile);
    pr->add_option("--planted", pair.planted_clusters, "Use N synthetic planted clusters instead of a file");
    pr->add_option("--planted-size", pair.planted_per, "Items per planted cluster")->capture_default_str();
    pr->add_option("--k", pair.k, "k-means clusters")->capture_default_str()->check(CLI::PositiveNumber);
    pr->add_option("--band-lo", pair.band_lo, "Turn-2 band lower bound (exclusive)")->capture_default_str();
    pr->add_option("--band-hi", pair.band_hi, "Turn-2 band upper bound (exclusive)")->capture_default_str();
    pr->add_option("--link", pair.link, "Turn-1 link threshold (inclusive)")->capture_default_str();
    pr->add_option("--threads", pair.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    pr->add_option("--seed", pair.seed, "k-means and planted-data seed")->capture_default_str();
    pr->add_option("--out", pair.out, "Output directory")->capture_default_str();

    ForgeArgs forge;
    auto* f = app.add_subcommand("forge", "Synthetic task data");
    f->require_subcommand(1);
    auto* fd = f->add_subcommand("dump", "Write samples as LCU files plus target images");
    fd->add_option("--task", forge.tasks, "Task kinds, 'chain', 'repeat' or 'all'");
    fd->add_option("--count", forge.count, "Samples per task")->capture_default_str();
    fd->add_option("--seed", forge.seed, "Base seed")->capture_default_str();
    fd->add_option("--canvas", forge.canvas, "Canvas size")->capture_default_str();
    fd->add_option("--history", forge.history, "History window for chains")->capture_default_str();
    fd->add_option("--format", forge.format, "Target image format (png|ppm)")->capture_default_str();
    fd->add_option("--threads", forge.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    fd->add_option("--out", forge.out, "Output directory")->capture_default_str();

    ServeArgs serve;
    auto* sv = app.add_subcommand("serve", "Run the multi-turn editing service");
    sv->add_option("--checkpoint", serve.checkpoint, "Checkpoint archive")->required();
    sv->add_option("--host", serve.host, "Bind address")->capture_default_str();
    sv->add_option("--port", serve.port, "Port (0 picks a free one)")->capture_default_str();
    sv->add_option("--threads", serve.threads, "HTTP worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    sv->add_option("--steps", serve.steps, "DDIM steps per turn")->capture_default_str()->check(CLI::PositiveNumber);
    sv->add_option("--guidance", serve.guidance, "Classifier-free guidance scale")->capture_default_str();
    sv->add_option("--max-history", serve.max_history, "Largest accepted history window")->capture_default_str();
    sv->add_option("--canvas", serve.canvas, "Canvas for text-only first turns")->capture_default_str();
    sv->add_option("--ui-dir", serve.ui_dir, "Static UI assets to mount at /")->check(CLI::ExistingDirectory);
    sv->add_option("--port-file", serve.port_file, "Write the bound port here");
    sv->add_option("--out", serve.out, "Run manifest directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err);
    }

    try {
        setup_logging();
        if (t->parsed()) return cmd_train(train);
        if (s->parsed()) return cmd_sample(sample);
        if (er->parsed()) return cmd_eval(ev);
        if (pr->parsed()) return cmd_pair(pair);
        if (fd->parsed()) return cmd_forge(forge);
        if (sv->parsed()) return cmd_serve(serve);
    } catch (const std::exception& ex) {
        std::cerr << "ace: error: " << ex.what() << std::endl;
        return 1;
    }
    return 1;
}
