#pragma once

// Multi-turn editing sessions over one loaded model: each turn builds an LCU from the last m
// rounds (instruction, input frames, generated output) plus the new request, samples, and
// appends the round. Sessions are independent; turns inside one session are serialized.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "ace/condition_unit.hpp"
#include "ace/diffusion.hpp"

namespace ace::service {

/// Error surfaced to clients as {code, message}.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, std::string code, const std::string& message)
        : std::runtime_error(message), status_(status), code_(std::move(code)) {}
    int status() const { return status_; }
    const std::string& code() const { return code_; }

private:
    int status_;
    std::string code_;
};

/// Produces the target image for an LCU; must be deterministic in (lcu, size, seed) and
/// safe to call concurrently.
class Generator {
public:
    virtual ~Generator() = default;
    virtual Image generate(const LongContextConditionUnit& lcu, int height, int width, std::uint64_t seed) const = 0;
    virtual std::string id() const = 0;
};

class ModelGenerator final : public Generator {
public:
    ModelGenerator(DiffusionTransformer<float> model, int diffusion_steps, int sampler_steps, double guidance_scale,
                   std::string checkpoint_id);
    /// Throws CheckpointError for unreadable or inconsistent checkpoints.
    static std::shared_ptr<ModelGenerator> from_checkpoint(const std::filesystem::path& path, int sampler_steps,
                                                           double guidance_scale = 1.0);

    Image generate(const LongContextConditionUnit& lcu, int height, int width, std::uint64_t seed) const override;
    std::string id() const override { return checkpoint_id_; }
    const DiffusionTransformer<float>& model() const { return model_; }

private:
    DiffusionTransformer<float> model_;
    NoiseSchedule schedule_;
    int sampler_steps_;
    double guidance_scale_;
    std::string checkpoint_id_;
};

struct TurnFrame {
    Image image;
    std::optional<Image> mask;
};

struct TurnRequest {
    std::string instruction;
    std::vector<TurnFrame> frames;
    std::optional<int> m;  // history window for this turn only
};

struct Round {
    int index = 0;  // 1-based
    std::string instruction;
    std::vector<TurnFrame> inputs;
    Image output;
    int m = 0;
    std::uint64_t seed = 0;
    std::vector<int> history_rounds;  // rounds included as history units, oldest first
};

struct SessionRecord {
    std::string id;
    int m = 0;
    std::uint64_t seed = 0;
    std::string checkpoint_id;
    std::vector<Round> rounds;
};

struct TurnResponse {
    int round = 0;
    Image image;
    std::vector<int> history_rounds;
    int condition_frames = 0;
};

struct ManagerOptions {
    int default_canvas = 16;
    int max_history = 8;
    int max_image_number = kDefaultMaxImageNumber;
};

class SessionManager {
public:
    explicit SessionManager(std::shared_ptr<const Generator> generator, ManagerOptions options = {});

    /// Throws ServiceError(400) for a negative or too large window.
    std::string create_session(int m, std::uint64_t seed);
    /// Atomic: on any failure the session is unchanged. Errors: 404 unknown session,
    /// 400 malformed request, 422 frame cap, 500 generation failure.
    TurnResponse post_turn(const std::string& id, const TurnRequest& request);
    SessionRecord get(const std::string& id) const;
    /// PNG bytes of a round's output.
    std::vector<std::uint8_t> image_png(const std::string& id, int round) const;
    std::size_t session_count() const;
    const Generator& generator() const { return *generator_; }
    const ManagerOptions& options() const { return options_; }

private:
    struct Session {
        mutable std::mutex mu;
        SessionRecord record;
    };
    std::shared_ptr<Session> find(const std::string& id) const;

    std::shared_ptr<const Generator> generator_;
    ManagerOptions options_;
    mutable std::shared_mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t next_id_ = 1;
};

/// LCU for the next turn of `record` (exposed for inspection and tests).
LongContextConditionUnit turn_context(const SessionRecord& record, const TurnRequest& request, int m,
                                      int max_image_number, std::vector<int>* history_rounds = nullptr);

/// Self-contained JSON transcript with exact (float32) inputs and outputs.
std::string export_transcript(const SessionRecord& record);
SessionRecord parse_transcript(const std::string& text);

struct ReplayResult {
    int rounds = 0;
    std::vector<int> mismatched_rounds;
    bool identical() const { return mismatched_rounds.empty(); }
};

/// Re-runs every recorded turn in a fresh session and compares outputs bitwise.
ReplayResult replay_transcript(const SessionRecord& transcript, std::shared_ptr<const Generator> generator,
                               ManagerOptions options = {});

// ---------------------------------------------------------------------------
// HTTP

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    int threads = 4;
    std::optional<std::filesystem::path> ui_dir;
};

class HttpServer {
public:
    HttpServer(SessionManager& manager, ServerOptions options);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Binds the socket; returns the bound port. Throws std::runtime_error on failure.
    int bind();
    /// Serves until stop(); call after bind().
    void serve();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ace::service
