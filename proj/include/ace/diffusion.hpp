#pragma once

// Epsilon-prediction diffusion around the transformer. Only the target frame is noised;
// condition frames enter as clean latents. Sampling is deterministic DDIM with optional
// classifier-free guidance (the unconditional branch drops the current instruction).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ace/transformer.hpp"
#include "ace/util.hpp"

namespace ace {

class DiffusionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class StageCapError : public DiffusionError {
public:
    using DiffusionError::DiffusionError;
};

class NoiseSchedule {
public:
    /// Cosine cumulative-signal schedule, offset s, per-step beta clipped at 0.999.
    static NoiseSchedule cosine(int steps, double s = 0.008);
    explicit NoiseSchedule(std::vector<double> alpha_bars);

    int steps() const { return static_cast<int>(alpha_bars_.size()); }
    /// Throws std::out_of_range for t outside [0, steps).
    double alpha_bar(int t) const;
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }

private:
    std::vector<double> alpha_bars_;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
template <typename S>
ag::Mat<S> q_sample(const NoiseSchedule& schedule, const ag::Mat<S>& x0, int t, const ag::Mat<S>& noise);

/// Mean squared error between predicted and true noise.
double epsilon_loss(const RowMatrix<float>& predicted, const RowMatrix<float>& noise);

/// Target image -> clean target tokens (count x out_dim) in model range.
RowMatrix<float> target_tokens(const Image& target, const ModelConfig& cfg);
/// Inverse of target_tokens; values are clamped to [0,1].
Image decode_target_tokens(const RowMatrix<float>& tokens, int height, int width, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Training

struct StageConfig {
    std::string name;
    std::vector<std::string> tasks;  // data mix, resolved by the sample source
    int visual_cap = kDefaultVisualCap;
    int max_images = 1;              // condition frames per sample
    long steps = 0;
};

struct TrainConfig {
    ModelConfig model;
    double learning_rate = 2e-5;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0;  // global-norm clip; 0 disables
    int batch_size = 8;
    int diffusion_steps = 1000;
    double cfg_dropout = 0.1;
    int history_window = 0;
    int canvas = 16;
    std::uint64_t seed = 0;
    int log_every = 100;
    std::vector<StageConfig> stages;

    /// Throws std::invalid_argument; stage caps must be non-decreasing.
    void validate() const;
    long total_steps() const;
    std::string to_text() const;
    std::uint64_t hash() const { return fnv1a64(to_text()); }
};

/// INI text: [train] and [model] sections plus one [stageK] section per stage (K = 1, 2, ...).
TrainConfig parse_train_config(const std::string& ini_text);
TrainConfig load_train_config(const std::filesystem::path& path);

class AdamW {
public:
    AdamW(const ParamSet<float>& like, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8);

    void step(ParamSet<float>& params, const ParamSet<float>& grads);
    long step_count() const { return t_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    ParamSet<float> m_;
    ParamSet<float> v_;
    double lr_, wd_, b1_, b2_, eps_;
    long t_ = 0;
};

/// Noisy request ready for the model, with the noise it should predict.
struct NoisedSample {
    TokenizedContext context;
    RowMatrix<float> noise;
    RowMatrix<float> noisy_target;
    int timestep = 0;
    bool dropped_instruction = false;
};

struct StepLimits {
    int visual_cap = kDefaultVisualCap;
    int max_images = kDefaultMaxImageNumber;
};

/// Tokenizes a sample, draws its timestep/noise/dropout from `rng`. Throws StageCapError
/// when the sample has more condition frames than `limits.max_images`.
NoisedSample prepare_sample(const Sample& sample, const ModelConfig& cfg, const NoiseSchedule& schedule,
                            double cfg_dropout, StepLimits limits, Rng& rng);

class Trainer {
public:
    Trainer(DiffusionTransformer<float>& model, const TrainConfig& config);

    struct StepResult {
        double loss = 0.0;
        double grad_norm = 0.0;
    };

    /// One optimizer update on a batch. Randomness is derived from (seed, step, slot) only.
    /// Throws DiffusionError on a non-finite loss (parameters are left untouched).
    StepResult step(std::span<const Sample> batch, long step_index, StepLimits limits = {});

    const NoiseSchedule& schedule() const { return schedule_; }
    DiffusionTransformer<float>& model() { return model_; }

private:
    DiffusionTransformer<float>& model_;
    TrainConfig config_;
    NoiseSchedule schedule_;
    AdamW optimizer_;
};

/// Produces the sample at a global index for a stage; must be a pure function of its inputs.
using SampleSource = std::function<Sample(const StageConfig& stage, std::uint64_t index)>;

struct StageReport {
    std::string name;
    long steps_run = 0;
    long end_step = 0;  // cumulative
    double first_loss = 0.0;
    double last_loss = 0.0;
    std::filesystem::path checkpoint;
};

/// Runs stages in order, each inheriting the previous weights, and writes one checkpoint per
/// stage. Training resumes at `start_step` (a cumulative counter, e.g. from a checkpoint).
std::vector<StageReport> run_stages(DiffusionTransformer<float>& model, const TrainConfig& config,
                                    const SampleSource& source, const std::filesystem::path& out_dir,
                                    long start_step = 0);

// ---------------------------------------------------------------------------
// Sampling

struct SamplerConfig {
    int steps = 50;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
    bool clip_x0 = true;
};

/// Predicts noise for x_t; `conditional` is false for the guidance branch.
using NoisePredictor = std::function<RowMatrix<float>(const RowMatrix<float>& x_t, int t, bool conditional)>;

/// Descending timesteps, T-1 first, 0 last when steps == T.
std::vector<int> ddim_timesteps(int total, int steps);

/// Deterministic DDIM from pure noise of shape rows x cols.
RowMatrix<float> ddim_sample(const NoiseSchedule& schedule, const NoisePredictor& predictor, int rows, int cols,
                             const SamplerConfig& config);

/// Generates the target image for an LCU. Throws DiffusionError on non-finite or untrained
/// (all-zero output head) parameters.
Image sample_image(const DiffusionTransformer<float>& model, const NoiseSchedule& schedule,
                   const LongContextConditionUnit& lcu, int height, int width, const SamplerConfig& config);

}  // namespace ace
