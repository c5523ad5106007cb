#include <doctest.h>

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "ace/diffusion.hpp"
#include "ace/image.hpp"

#include <httplib.h>

extern char** environ;

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const fs::path& scratch() {
    static const fs::path dir = [] {
        const auto d = fs::temp_directory_path() / ("ace_test_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

RunResult run(const std::string& args) {
    const auto out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
    const std::string cmd = std::string("ACE_LOG_LEVEL=warn '") + ACE_CLI_PATH + "' " + args + " >'" + out.string() +
                            "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
}

const char* kTinyConfig = R"([train]
learning_rate = 1e-3
weight_decay = 0
batch_size = 2
diffusion_steps = 50
canvas = 8
seed = 3
log_every = 0

[model]
width = 12
depth = 1
heads = 1
freq_dim = 8
vocab_size = 64
max_text_tokens = 16

[stage1]
name = base
tasks = semantic_invert
visual_cap = 64
max_images = 1
steps = 30

[stage2]
name = multi
tasks = copy_source, chain
visual_cap = 128
max_images = 4
steps = 20
)";

// Trains once per process; later cases reuse the checkpoints.
const fs::path& trained() {
    static const fs::path dir = [] {
        const auto cfg = scratch() / "tiny.ini";
        write_text(cfg, kTinyConfig);
        const auto d = scratch() / "run";
        const auto r = run("train --config '" + cfg.string() + "' --out '" + d.string() + "'");
        if (r.code != 0) throw std::runtime_error("training failed: " + r.err);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("help and usage errors") {
    CHECK(run("--help").code == 0);
    CHECK(run("--version").code == 0);
    for (const char* sub : {"train", "sample", "eval run", "pair run", "forge dump", "serve"}) {
        const auto r = run(std::string(sub) + " --help");
        CAPTURE(sub);
        CHECK(r.code == 0);
        CHECK(r.out.find("--") != std::string::npos);
    }
    CHECK(run("").code != 0);
    CHECK(run("train").code != 0);
    CHECK(run("train --config /nonexistent.ini").code != 0);
    CHECK(run("frobnicate").code != 0);
    CHECK(run("sample --checkpoint x --steps 0").code != 0);

    const auto bad = scratch() / "bad.ini";
    write_text(bad, "[train]\nbogus = 1\n");
    const auto r = run("train --config '" + bad.string() + "'");
    CHECK(r.code == 1);
    CHECK(r.err.find("ace: error:") != std::string::npos);
    const auto env = std::system(("ACE_LOG_LEVEL=loud '" + std::string(ACE_CLI_PATH) + "' forge dump --count 1 --out '" +
                                  (scratch() / "x").string() + "' >/dev/null 2>&1")
                                     .c_str());
    CHECK(WEXITSTATUS(env) == 1);
}

TEST_CASE("forge dump writes requests and targets") {
    const auto out = scratch() / "forge";
    const auto r = run("forge dump --task semantic_invert --task repeat --count 2 --seed 4 --canvas 16 --out '" +
                       out.string() + "'");
    REQUIRE(r.code == 0);
    for (const char* f : {"semantic_invert-0.lcu.json", "semantic_invert-1.png", "repeat-1.lcu.json", "repeat-0.png",
                          "run_manifest.txt"}) {
        CHECK(fs::exists(out / f));
    }
    const auto lcu = ace::parse_lcu(slurp(out / "repeat-0.lcu.json"));
    CHECK(lcu.units.size() == 2);
    CHECK(ace::read_image(out / "semantic_invert-0.png").height == 16);
    CHECK(slurp(out / "run_manifest.txt").find("command = forge dump") != std::string::npos);

    const auto again = scratch() / "forge2";
    REQUIRE(run("forge dump --task semantic_invert --task repeat --count 2 --seed 4 --canvas 16 --threads 3 --out '" +
                again.string() + "'")
                .code == 0);
    CHECK(slurp(out / "repeat-1.lcu.json") == slurp(again / "repeat-1.lcu.json"));
    CHECK(run("forge dump --task nope --out '" + out.string() + "'").code == 1);
    CHECK(run("forge dump --task semantic_invert --format gif --out '" + out.string() + "'").code != 0);
}

TEST_CASE("pair run recovers planted clusters") {
    const auto out = scratch() / "pairs";
    const auto r = run("pair run --planted 6 --planted-size 4 --k 6 --threads 4 --seed 2 --out '" + out.string() + "'");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("planted recovery: exact (36/36 pairs)") != std::string::npos);
    CHECK(fs::exists(out / "clusters.txt"));
    CHECK(fs::exists(out / "pairs.txt"));
    const auto narrow = run("pair run --planted 6 --planted-size 4 --k 6 --band-lo 0.86 --band-hi 0.9 --out '" +
                            out.string() + "'");
    CHECK(narrow.code == 1);
    CHECK(run("pair run --out '" + out.string() + "'").code == 1);
}

TEST_CASE("train, resume and sample") {
    const auto& dir = trained();
    CHECK(fs::exists(dir / "stage1-base.ckpt"));
    CHECK(fs::exists(dir / "stage2-multi.ckpt"));
    const auto manifest = slurp(dir / "run_manifest.txt");
    CHECK(manifest.find("command = train") != std::string::npos);
    const auto ckpt = ace::load_checkpoint(dir / "stage2-multi.ckpt");
    CHECK(ckpt.meta.step == 50);
    CHECK(manifest.find("checkpoint_id = " + ckpt.meta.id) != std::string::npos);

    const auto resumed = scratch() / "resumed";
    const auto r = run("train --config '" + (scratch() / "tiny.ini").string() + "' --resume '" +
                       (dir / "stage1-base.ckpt").string() + "' --out '" + resumed.string() + "'");
    REQUIRE(r.code == 0);
    CHECK_FALSE(fs::exists(resumed / "stage1-base.ckpt"));
    CHECK(ace::load_checkpoint(resumed / "stage2-multi.ckpt").meta.step == 50);

    const auto a = scratch() / "a" / "out.png", b = scratch() / "b" / "out.png", c = scratch() / "c" / "out.png";
    const std::string base = "sample --checkpoint '" + (dir / "stage2-multi.ckpt").string() +
                             "' --task semantic_invert --steps 5 --canvas 8 ";
    REQUIRE(run(base + "--seed 7 --out '" + a.string() + "'").code == 0);
    REQUIRE(run(base + "--seed 7 --out '" + b.string() + "'").code == 0);
    REQUIRE(run(base + "--seed 8 --out '" + c.string() + "'").code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(slurp(a) != slurp(c));
    CHECK(ace::read_image(a).height == 8);
    CHECK(fs::exists(a.parent_path() / "run_manifest.txt"));

    const auto lcu_file = scratch() / "forge" / "repeat-0.lcu.json";
    if (fs::exists(lcu_file)) {
        CHECK(run("sample --checkpoint '" + (dir / "stage2-multi.ckpt").string() + "' --lcu '" + lcu_file.string() +
                  "' --steps 3 --out '" + (scratch() / "d" / "x.ppm").string() + "'")
                  .code == 0);
    }

    const auto broken = scratch() / "broken.ckpt";
    write_text(broken, "not a checkpoint");
    const auto e = run("sample --checkpoint '" + broken.string() + "' --task semantic_invert --out '" +
                       (scratch() / "e.png").string() + "'");
    CHECK(e.code == 1);
    CHECK(e.err.find("ace: error:") != std::string::npos);
}

TEST_CASE("serve answers health checks and stops on SIGTERM") {
    const auto& dir = trained();
    const auto port_file = scratch() / "port.txt";
    fs::remove(port_file);
    const std::string ckpt = (dir / "stage2-multi.ckpt").string();
    const std::string pf = port_file.string();
    const std::string out = (scratch() / "serve").string();
    std::vector<std::string> args{ACE_CLI_PATH, "serve", "--checkpoint", ckpt, "--port", "0",
                                  "--port-file", pf, "--steps", "3", "--out", out};
    std::vector<char*> argv;
    for (auto& s : args) argv.push_back(s.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    REQUIRE(posix_spawn(&pid, ACE_CLI_PATH, nullptr, nullptr, argv.data(), environ) == 0);

    int port = 0;
    for (int i = 0; i < 200 && port == 0; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        const auto text = slurp(port_file);
        if (!text.empty() && text.back() == '\n') port = std::stoi(text);
    }
    REQUIRE(port > 0);
    httplib::Client cli("127.0.0.1", port);
    auto health = cli.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(health->body.find(ace::load_checkpoint(ckpt).meta.id) != std::string::npos);
    auto created = cli.Post("/sessions", R"({"m": 1})", "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    auto turn = cli.Post("/sessions/s1/turns", R"({"instruction": "draw a small red square on a black background"})",
                         "application/json");
    REQUIRE(turn);
    CHECK(turn->status == 200);

    ::kill(pid, SIGTERM);
    int status = 0;
    REQUIRE(::waitpid(pid, &status, 0) == pid);
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(fs::exists(fs::path(out) / "run_manifest.txt"));
}
