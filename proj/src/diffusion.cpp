#include "ace/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <spdlog/spdlog.h>

namespace ace {

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule NoiseSchedule::cosine(int steps, double s) {
    if (steps <= 0) throw std::invalid_argument("schedule needs at least one step");
    auto f = [&](double t) {
        const double c = std::cos((t / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    std::vector<double> abar(static_cast<std::size_t>(steps));
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double beta = std::min(1.0 - f(t + 1) / f(t), 0.999);
        prod *= 1.0 - beta;
        abar[static_cast<std::size_t>(t)] = prod;
    }
    return NoiseSchedule(std::move(abar));
}

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bars) : alpha_bars_(std::move(alpha_bars)) {
    if (alpha_bars_.empty()) throw std::invalid_argument("empty noise schedule");
    for (std::size_t i = 0; i < alpha_bars_.size(); ++i) {
        const double a = alpha_bars_[i];
        if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("schedule values must lie in (0,1]");
        if (i > 0 && a > alpha_bars_[i - 1]) throw std::invalid_argument("schedule must be non-increasing");
    }
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t >= steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
    }
    return alpha_bars_[static_cast<std::size_t>(t)];
}

template <typename S>
ag::Mat<S> q_sample(const NoiseSchedule& schedule, const ag::Mat<S>& x0, int t, const ag::Mat<S>& noise) {
    if (x0.rows() != noise.rows() || x0.cols() != noise.cols()) throw std::invalid_argument("q_sample: shape mismatch");
    const double a = schedule.alpha_bar(t);
    return (static_cast<S>(std::sqrt(a)) * x0.array() + static_cast<S>(std::sqrt(1.0 - a)) * noise.array()).matrix();
}

template ag::Mat<float> q_sample<float>(const NoiseSchedule&, const ag::Mat<float>&, int, const ag::Mat<float>&);
template ag::Mat<double> q_sample<double>(const NoiseSchedule&, const ag::Mat<double>&, int, const ag::Mat<double>&);

double epsilon_loss(const RowMatrix<float>& predicted, const RowMatrix<float>& noise) {
    if (predicted.rows() != noise.rows() || predicted.cols() != noise.cols()) {
        throw std::invalid_argument("epsilon_loss: shape mismatch");
    }
    if (predicted.size() == 0) return 0.0;
    return (predicted.cast<double>() - noise.cast<double>()).squaredNorm() / static_cast<double>(predicted.size());
}

RowMatrix<float> target_tokens(const Image& target, const ModelConfig& cfg) {
    Image latent = encode_latent(as_rgb(target), cfg.codec_factor);
    for (auto& v : latent.data) v = to_model_range(v);
    return patchify(latent, cfg.patch).values;
}

Image decode_target_tokens(const RowMatrix<float>& tokens, int height, int width, const ModelConfig& cfg) {
    const int cell = cfg.codec_factor * cfg.patch;
    if (height % cell != 0 || width % cell != 0) throw CodecError("target size is not a multiple of the patch cell");
    VisualTokens vt;
    vt.values = tokens;
    vt.grid_rows = height / cell;
    vt.grid_cols = width / cell;
    vt.patch = cfg.patch;
    vt.channels = cfg.latent_channels();
    if (vt.values.rows() != vt.grid_rows * vt.grid_cols || vt.values.cols() != cfg.out_dim()) {
        throw CodecError("target token matrix does not match the canvas");
    }
    Image latent = unpatchify(vt);
    for (auto& v : latent.data) v = std::clamp(from_model_range(v), 0.0f, 1.0f);
    return decode_latent(latent, cfg.codec_factor);
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    model.validate();
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument(msg);
    };
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "adam betas must lie in [0,1)");
    require(grad_clip >= 0.0, "grad_clip must be non-negative");
    require(batch_size > 0, "batch_size must be positive");
    require(diffusion_steps > 0, "diffusion_steps must be positive");
    require(cfg_dropout >= 0.0 && cfg_dropout <= 1.0, "cfg_dropout must lie in [0,1]");
    require(history_window >= 0, "history_window must be non-negative");
    require(canvas > 0 && canvas % (model.codec_factor * model.patch) == 0,
            "canvas must be a positive multiple of codec_factor * patch");
    require(!stages.empty(), "at least one stage is required");
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        require(s.steps >= 0, "stage " + s.name + ": steps must be non-negative");
        require(s.max_images >= 1 && s.max_images <= model.max_image_number,
                "stage " + s.name + ": max_images out of range");
        require(s.visual_cap > 0, "stage " + s.name + ": visual_cap must be positive");
        require(!s.tasks.empty(), "stage " + s.name + ": empty task mix");
        if (i > 0) {
            require(s.visual_cap >= stages[i - 1].visual_cap && s.max_images >= stages[i - 1].max_images,
                    "stage caps must be non-decreasing (stage " + s.name + ")");
        }
    }
}

long TrainConfig::total_steps() const {
    long n = 0;
    for (const auto& s : stages) n += s.steps;
    return n;
}

std::string TrainConfig::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "[train]\n"
       << "learning_rate = " << learning_rate << '\n'
       << "weight_decay = " << weight_decay << '\n'
       << "beta1 = " << beta1 << '\n'
       << "beta2 = " << beta2 << '\n'
       << "adam_eps = " << adam_eps << '\n'
       << "grad_clip = " << grad_clip << '\n'
       << "batch_size = " << batch_size << '\n'
       << "diffusion_steps = " << diffusion_steps << '\n'
       << "cfg_dropout = " << cfg_dropout << '\n'
       << "history_window = " << history_window << '\n'
       << "canvas = " << canvas << '\n'
       << "seed = " << seed << '\n'
       << "log_every = " << log_every << "\n\n"
       << "[model]\n"
       << model.to_text();
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        os << "\n[stage" << i + 1 << "]\n"
           << "name = " << s.name << '\n'
           << "tasks = ";
        for (std::size_t k = 0; k < s.tasks.size(); ++k) os << (k ? "," : "") << s.tasks[k];
        os << '\n'
           << "visual_cap = " << s.visual_cap << '\n'
           << "max_images = " << s.max_images << '\n'
           << "steps = " << s.steps << '\n';
    }
    return os.str();
}

namespace {

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(text);
    while (std::getline(is, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

template <typename T>
T convert(const std::string& section, const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        T out{};
        if constexpr (std::is_same_v<T, double>) out = std::stod(value, &used);
        else if constexpr (std::is_same_v<T, std::uint64_t>) out = std::stoull(value, &used);
        else if constexpr (std::is_same_v<T, long>) out = std::stol(value, &used);
        else out = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw std::invalid_argument("[" + section + "] " + key + ": cannot parse '" + value + "'");
    }
}

}  // namespace

TrainConfig parse_train_config(const std::string& ini_text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        std::istringstream is(ini_text);
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }

    TrainConfig c;
    std::vector<std::pair<int, StageConfig>> stages;
    for (const auto& [section, body] : tree) {
        if (section == "train") {
            for (const auto& [key, node] : body) {
                const auto v = node.get_value<std::string>();
                if (key == "learning_rate") c.learning_rate = convert<double>(section, key, v);
                else if (key == "weight_decay") c.weight_decay = convert<double>(section, key, v);
                else if (key == "beta1") c.beta1 = convert<double>(section, key, v);
                else if (key == "beta2") c.beta2 = convert<double>(section, key, v);
                else if (key == "adam_eps") c.adam_eps = convert<double>(section, key, v);
                else if (key == "grad_clip") c.grad_clip = convert<double>(section, key, v);
                else if (key == "batch_size") c.batch_size = convert<int>(section, key, v);
                else if (key == "diffusion_steps") c.diffusion_steps = convert<int>(section, key, v);
                else if (key == "cfg_dropout") c.cfg_dropout = convert<double>(section, key, v);
                else if (key == "history_window") c.history_window = convert<int>(section, key, v);
                else if (key == "canvas") c.canvas = convert<int>(section, key, v);
                else if (key == "seed") c.seed = convert<std::uint64_t>(section, key, v);
                else if (key == "log_every") c.log_every = convert<int>(section, key, v);
                else throw std::invalid_argument("[train] unknown key '" + key + "'");
            }
        } else if (section == "model") {
            std::string text;
            for (const auto& [key, node] : body) text += key + " = " + node.get_value<std::string>() + "\n";
            c.model = ModelConfig::from_text(text);
        } else if (section.rfind("stage", 0) == 0) {
            const int index = convert<int>(section, "section index", section.substr(5));
            StageConfig s;
            s.name = section;
            for (const auto& [key, node] : body) {
                const auto v = node.get_value<std::string>();
                if (key == "name") s.name = v;
                else if (key == "tasks") s.tasks = split_list(v);
                else if (key == "visual_cap") s.visual_cap = convert<int>(section, key, v);
                else if (key == "max_images") s.max_images = convert<int>(section, key, v);
                else if (key == "steps") s.steps = convert<long>(section, key, v);
                else throw std::invalid_argument("[" + section + "] unknown key '" + key + "'");
            }
            stages.emplace_back(index, std::move(s));
        } else {
            throw std::invalid_argument("config: unknown section [" + section + "]");
        }
    }
    std::sort(stages.begin(), stages.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (stages[i].first != static_cast<int>(i) + 1) throw std::invalid_argument("config: stages must be numbered 1..N");
        c.stages.push_back(std::move(stages[i].second));
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

// ---------------------------------------------------------------------------
// Optimizer

AdamW::AdamW(const ParamSet<float>& like, double lr, double weight_decay, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(ParamSet<float>& params, const ParamSet<float>& grads) {
    ++t_;
    const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
    const float c1 = static_cast<float>(1.0 - std::pow(b1_, static_cast<double>(t_)));
    const float c2 = static_cast<float>(1.0 - std::pow(b2_, static_cast<double>(t_)));
    const float lr = static_cast<float>(lr_), wd = static_cast<float>(wd_), eps = static_cast<float>(eps_);
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto p = entries[i].value.array();
        const auto g = grads.entries()[i].value.array();
        auto m = m_.entries()[i].value.array();
        auto v = v_.entries()[i].value.array();
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.square();
        p -= lr * ((m / c1) / ((v / c2).sqrt() + eps) + wd * p);
    }
}

// ---------------------------------------------------------------------------
// Training

NoisedSample prepare_sample(const Sample& sample, const ModelConfig& cfg, const NoiseSchedule& schedule,
                            double cfg_dropout, StepLimits limits, Rng& rng) {
    const auto frames = static_cast<int>(sample.lcu.frame_count());
    if (frames > limits.max_images) {
        throw StageCapError("sample '" + sample.kind + "' has " + std::to_string(frames) +
                            " condition images; this stage allows " + std::to_string(limits.max_images));
    }
    auto opts = cfg.context_options();
    opts.visual_cap = limits.visual_cap;
    NoisedSample out;
    out.context = tokenize_context(sample.lcu, Vocabulary(cfg.vocab_config()), sample.target.height,
                                   sample.target.width, opts);
    out.dropped_instruction = uniform_draw(rng) < cfg_dropout;
    if (out.dropped_instruction) out.context = without_current_instruction(std::move(out.context));
    out.timestep = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(schedule.steps())));
    const RowMatrix<float> x0 = target_tokens(sample.target, cfg);
    out.noise.resize(x0.rows(), x0.cols());
    for (Eigen::Index i = 0; i < out.noise.size(); ++i) out.noise.data()[i] = static_cast<float>(normal_draw(rng));
    out.noisy_target = q_sample<float>(schedule, x0, out.timestep, out.noise);
    return out;
}

Trainer::Trainer(DiffusionTransformer<float>& model, const TrainConfig& config)
    : model_(model),
      config_(config),
      schedule_(NoiseSchedule::cosine(config.diffusion_steps)),
      optimizer_(model.params(), config.learning_rate, config.weight_decay, config.beta1, config.beta2,
                 config.adam_eps) {
    if (!(config.model == model.config())) throw std::invalid_argument("train config and model config differ");
}

Trainer::StepResult Trainer::step(std::span<const Sample> batch, long step_index, StepLimits limits) {
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    std::vector<NoisedSample> prepared;
    prepared.reserve(batch.size());
    for (std::size_t slot = 0; slot < batch.size(); ++slot) {
        Rng rng(derive_seed(config_.seed, {static_cast<std::uint64_t>(step_index), slot}));
        prepared.push_back(prepare_sample(batch[slot], model_.config(), schedule_, config_.cfg_dropout, limits, rng));
    }
    std::vector<ModelInput<float>> inputs;
    Eigen::Index rows = 0;
    for (const auto& p : prepared) {
        inputs.push_back({&p.context, p.noisy_target, p.timestep});
        rows += p.noise.rows();
    }
    RowMatrix<float> noise(rows, model_.config().out_dim());
    rows = 0;
    for (const auto& p : prepared) {
        noise.middleRows(rows, p.noise.rows()) = p.noise;
        rows += p.noise.rows();
    }

    ag::Graph<float> g;
    ParamBinder<float> bind(g, model_.params(), true);
    const auto trace = model_.build(bind, inputs);
    const auto loss = ag::mse<float>(trace.prediction, noise);
    const double loss_value = loss.value()(0, 0);
    if (!std::isfinite(loss_value)) {
        std::ostringstream os;
        os << "non-finite loss at step " << step_index << "; samples:";
        for (std::size_t i = 0; i < batch.size(); ++i) {
            os << ' ' << batch[i].kind << "@t=" << prepared[i].timestep;
        }
        os << "; parameters finite: " << (model_.params().all_finite() ? "yes" : "no");
        throw DiffusionError(os.str());
    }
    g.backward(loss);
    auto grads = model_.params().zeros_like();
    bind.accumulate_grads(grads);

    double sq = 0.0;
    for (const auto& e : grads.entries()) sq += e.value.cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw DiffusionError("non-finite gradient at step " + std::to_string(step_index));
    if (config_.grad_clip > 0.0 && norm > config_.grad_clip) {
        const float f = static_cast<float>(config_.grad_clip / norm);
        for (auto& e : grads.entries()) e.value *= f;
    }
    optimizer_.step(model_.params(), grads);
    return {loss_value, norm};
}

namespace {

// Bounded producer/consumer queue of batches generated in step order.
class BatchQueue {
public:
    explicit BatchQueue(std::size_t capacity) : capacity_(capacity) {}

    void push(std::vector<Sample> batch) {
        std::unique_lock lock(mu_);
        not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
        if (closed_) return;
        items_.push_back(std::move(batch));
        not_empty_.notify_one();
    }

    // Returns false once the producer finished (or failed) and the queue drained.
    bool pop(std::vector<Sample>& out) {
        std::unique_lock lock(mu_);
        not_empty_.wait(lock, [&] { return !items_.empty() || done_; });
        if (error_) std::rethrow_exception(error_);
        if (items_.empty()) return false;
        out = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return true;
    }

    void finish(std::exception_ptr error = nullptr) {
        std::lock_guard lock(mu_);
        done_ = true;
        error_ = error;
        not_empty_.notify_all();
    }

    void close() {
        std::lock_guard lock(mu_);
        closed_ = true;
        not_full_.notify_all();
    }

private:
    std::size_t capacity_;
    std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<std::vector<Sample>> items_;
    bool done_ = false;
    bool closed_ = false;
    std::exception_ptr error_;
};

std::string checkpoint_name(std::size_t index, const std::string& stage) {
    std::string safe;
    for (char ch : stage) safe += std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' ? ch : '_';
    return "stage" + std::to_string(index + 1) + "-" + safe + ".ckpt";
}

double window_mean(const std::vector<double>& v, bool head) {
    if (v.empty()) return 0.0;
    const std::size_t n = std::min<std::size_t>(v.size(), 50);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += head ? v[i] : v[v.size() - 1 - i];
    return s / static_cast<double>(n);
}

}  // namespace

std::vector<StageReport> run_stages(DiffusionTransformer<float>& model, const TrainConfig& config,
                                    const SampleSource& source, const std::filesystem::path& out_dir,
                                    long start_step) {
    config.validate();
    if (start_step < 0) throw std::invalid_argument("start step must be non-negative");
    Trainer trainer(model, config);
    std::vector<StageReport> reports;
    long stage_begin = 0;
    for (std::size_t k = 0; k < config.stages.size(); ++k) {
        const auto& stage = config.stages[k];
        const long stage_end = stage_begin + stage.steps;
        if (start_step >= stage_end) {
            stage_begin = stage_end;
            continue;
        }
        const long first = std::max(start_step, stage_begin);
        const StepLimits limits{stage.visual_cap, stage.max_images};
        spdlog::info("stage {} '{}': steps {}..{} (max images {}, visual cap {})", k + 1, stage.name, first,
                     stage_end, stage.max_images, stage.visual_cap);

        BatchQueue queue(4);
        std::thread producer([&] {
            try {
                for (long s = first; s < stage_end; ++s) {
                    std::vector<Sample> batch;
                    for (int slot = 0; slot < config.batch_size; ++slot) {
                        batch.push_back(source(stage, static_cast<std::uint64_t>(s) * config.batch_size + slot));
                    }
                    queue.push(std::move(batch));
                }
                queue.finish();
            } catch (...) {
                queue.finish(std::current_exception());
            }
        });

        std::vector<double> losses;
        try {
            std::vector<Sample> batch;
            for (long s = first; s < stage_end; ++s) {
                if (!queue.pop(batch)) throw DiffusionError("sample source ended early");
                const auto r = trainer.step(batch, s, limits);
                losses.push_back(r.loss);
                if (config.log_every > 0 && (s + 1) % config.log_every == 0) {
                    spdlog::info("step {} loss {:.5f} (running {:.5f}) grad {:.4f}", s + 1, r.loss,
                                 window_mean(losses, false), r.grad_norm);
                }
            }
        } catch (...) {
            queue.close();
            producer.join();
            throw;
        }
        queue.close();
        producer.join();

        StageReport report;
        report.name = stage.name;
        report.steps_run = stage_end - first;
        report.end_step = stage_end;
        report.first_loss = window_mean(losses, true);
        report.last_loss = window_mean(losses, false);
        report.checkpoint = out_dir / checkpoint_name(k, stage.name);
        save_checkpoint(report.checkpoint, model, CheckpointMeta{stage_end, stage.name, {}, config.diffusion_steps});
        spdlog::info("stage '{}' done at step {}; checkpoint {}", stage.name, stage_end, report.checkpoint.string());
        reports.push_back(std::move(report));
        stage_begin = stage_end;
    }
    return reports;
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<int> ddim_timesteps(int total, int steps) {
    if (steps < 1 || steps > total) {
        throw std::invalid_argument("sampling steps must lie in [1, " + std::to_string(total) + "]");
    }
    std::vector<int> ts;
    for (int i = steps - 1; i >= 0; --i) {
        ts.push_back(static_cast<int>((static_cast<long>(i) + 1) * total / steps) - 1);
    }
    return ts;
}

RowMatrix<float> ddim_sample(const NoiseSchedule& schedule, const NoisePredictor& predictor, int rows, int cols,
                             const SamplerConfig& config) {
    const auto ts = ddim_timesteps(schedule.steps(), config.steps);
    Rng rng(derive_seed(config.seed, {0x5a3d}));
    RowMatrix<float> x(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(normal_draw(rng));

    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const double a = schedule.alpha_bar(t);
        const double a_prev = i + 1 < ts.size() ? schedule.alpha_bar(ts[i + 1]) : 1.0;
        RowMatrix<float> eps = predictor(x, t, true);
        if (config.guidance_scale != 1.0) {
            const RowMatrix<float> uncond = predictor(x, t, false);
            eps = uncond + static_cast<float>(config.guidance_scale) * (eps - uncond);
        }
        if (eps.rows() != rows || eps.cols() != cols) throw DiffusionError("noise prediction has the wrong shape");
        const Eigen::ArrayXXd xd = x.cast<double>().array();
        Eigen::ArrayXXd ed = eps.cast<double>().array();
        Eigen::ArrayXXd x0 = (xd - std::sqrt(1.0 - a) * ed) / std::sqrt(a);
        if (config.clip_x0) {
            x0 = x0.cwiseMax(-1.0).cwiseMin(1.0);
            if (a < 1.0) ed = (xd - std::sqrt(a) * x0) / std::sqrt(1.0 - a);
        }
        const Eigen::ArrayXXd next = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * ed;
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) x(r, c) = static_cast<float>(next(r, c));
        }
    }
    return x;
}

Image sample_image(const DiffusionTransformer<float>& model, const NoiseSchedule& schedule,
                   const LongContextConditionUnit& lcu, int height, int width, const SamplerConfig& config) {
    if (!model.params().all_finite()) throw DiffusionError("model parameters contain NaN or Inf");
    const auto& head_w = model.params().at("final.linear.weight");
    const auto& head_b = model.params().at("final.linear.bias");
    if (head_w.isZero(0.0) && head_b.isZero(0.0)) {
        throw DiffusionError("model is untrained: the output head is identically zero");
    }
    const TokenizedContext ctx = tokenize_context(lcu, model.vocabulary(), height, width, model.config().context_options());
    const TokenizedContext uncond = without_current_instruction(ctx);
    const int rows = ctx.target().tokens.count();
    NoisePredictor predictor = [&](const RowMatrix<float>& x_t, int t, bool conditional) {
        return model.predict(ModelInput<float>{conditional ? &ctx : &uncond, x_t, t});
    };
    const RowMatrix<float> tokens = ddim_sample(schedule, predictor, rows, model.config().out_dim(), config);
    return decode_target_tokens(tokens, height, width, model.config());
}

}  // namespace ace
