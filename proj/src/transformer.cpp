#include "ace/transformer.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "ace/util.hpp"

namespace ace {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
    auto require = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(msg);
    };
    require(width > 0 && depth > 0 && heads > 0 && mlp_ratio > 0, "model sizes must be positive");
    require(width % heads == 0, "width must be divisible by heads");
    require(head_dim() % 6 == 0, "head width must be divisible by 6 (three even rotary axis blocks)");
    require(freq_dim > 0 && freq_dim % 2 == 0, "timestep feature width must be even");
    require(image_channels == 1 || image_channels == 3, "image channels must be 1 or 3");
    require(codec_factor > 0 && patch > 0, "codec factor and patch must be positive");
    require(rope_base > 1.0, "rotary base must exceed 1");
    require(visual_cap > 0 && max_image_number > 0, "caps must be positive");
}

VocabularyConfig ModelConfig::vocab_config() const {
    return VocabularyConfig{vocab_size, max_text_tokens, max_image_number, hash_seed};
}

ContextOptions ModelConfig::context_options() const {
    return ContextOptions{codec_factor, patch, visual_cap, max_image_number};
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "width = " << width << '\n'
       << "depth = " << depth << '\n'
       << "heads = " << heads << '\n'
       << "mlp_ratio = " << mlp_ratio << '\n'
       << "freq_dim = " << freq_dim << '\n'
       << "image_channels = " << image_channels << '\n'
       << "codec_factor = " << codec_factor << '\n'
       << "patch = " << patch << '\n'
       << "rope_base = " << rope_base << '\n'
       << "visual_cap = " << visual_cap << '\n'
       << "max_image_number = " << max_image_number << '\n'
       << "vocab_size = " << vocab_size << '\n'
       << "max_text_tokens = " << max_text_tokens << '\n'
       << "hash_seed = " << hash_seed << '\n'
       << "text_seed = " << text_seed << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
    ModelConfig c;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "width") c.width = std::stoi(value);
            else if (key == "depth") c.depth = std::stoi(value);
            else if (key == "heads") c.heads = std::stoi(value);
            else if (key == "mlp_ratio") c.mlp_ratio = std::stoi(value);
            else if (key == "freq_dim") c.freq_dim = std::stoi(value);
            else if (key == "image_channels") c.image_channels = std::stoi(value);
            else if (key == "codec_factor") c.codec_factor = std::stoi(value);
            else if (key == "patch") c.patch = std::stoi(value);
            else if (key == "rope_base") c.rope_base = std::stod(value);
            else if (key == "visual_cap") c.visual_cap = std::stoi(value);
            else if (key == "max_image_number") c.max_image_number = std::stoi(value);
            else if (key == "vocab_size") c.vocab_size = std::stoi(value);
            else if (key == "max_text_tokens") c.max_text_tokens = std::stoi(value);
            else if (key == "hash_seed") c.hash_seed = std::stoull(value);
            else if (key == "text_seed") c.text_seed = std::stoull(value);
            else throw std::invalid_argument("unknown model config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::logic_error& e) {
            throw std::invalid_argument("bad value for model config key '" + key + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(to_text()); }

// ---------------------------------------------------------------------------
// Rotary positions

template <typename S>
std::vector<S> rope3d(std::span<const S> v, PositionTriple pos, double base) {
    if (v.size() % 6 != 0 || v.empty()) throw std::invalid_argument("rope3d: width must be a positive multiple of 6");
    const std::size_t axis = v.size() / 3;
    const int coords[3] = {pos.frame, pos.row, pos.col};
    std::vector<S> out(v.begin(), v.end());
    for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t j = 0; j < axis / 2; ++j) {
            const double theta = coords[a] * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(axis));
            const S c = static_cast<S>(std::cos(theta)), s = static_cast<S>(std::sin(theta));
            const std::size_t i0 = a * axis + 2 * j;
            out[i0] = v[i0] * c - v[i0 + 1] * s;
            out[i0 + 1] = v[i0] * s + v[i0 + 1] * c;
        }
    }
    return out;
}

template <typename S>
ag::Mat<S> rope_angle_table(std::span<const PositionTriple> positions, int head_dim, double base) {
    if (head_dim <= 0 || head_dim % 6 != 0) throw std::invalid_argument("rope: head width must be a multiple of 6");
    const int axis = head_dim / 3;
    ag::Mat<S> angles(static_cast<Eigen::Index>(positions.size()), head_dim / 2);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        const int coords[3] = {positions[r].frame, positions[r].row, positions[r].col};
        for (int a = 0; a < 3; ++a) {
            for (int j = 0; j < axis / 2; ++j) {
                angles(static_cast<Eigen::Index>(r), a * (axis / 2) + j) =
                    static_cast<S>(coords[a] * std::pow(base, -2.0 * j / static_cast<double>(axis)));
            }
        }
    }
    return angles;
}

// ---------------------------------------------------------------------------
// ParamSet / ParamBinder

template <typename S>
void ParamSet<S>::add(std::string name, ag::Mat<S> value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
}

template <typename S>
ag::Mat<S>& ParamSet<S>::at(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return entries_[it->second].value;
}

template <typename S>
const ag::Mat<S>& ParamSet<S>::at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return entries_[it->second].value;
}

template <typename S>
std::size_t ParamSet<S>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
}

template <typename S>
bool ParamSet<S>::all_finite() const {
    for (const auto& e : entries_) {
        if (!e.value.allFinite()) return false;
    }
    return true;
}

template <typename S>
ParamSet<S> ParamSet<S>::zeros_like() const {
    ParamSet out;
    for (const auto& e : entries_) out.add(e.name, ag::Mat<S>::Zero(e.value.rows(), e.value.cols()));
    return out;
}

template <typename S>
ag::Var<S> ParamBinder<S>::operator()(const std::string& name) {
    if (const auto it = bound_.find(name); it != bound_.end()) return it->second;
    const auto& value = params_.at(name);
    auto var = trainable_ ? graph_.leaf(value) : graph_.constant(value);
    bound_.emplace(name, var);
    return var;
}

template <typename S>
void ParamBinder<S>::accumulate_grads(ParamSet<S>& grads) const {
    for (const auto& [name, var] : bound_) {
        const auto& g = graph_.grad(var);
        if (g.size() != 0) grads.at(name) += g;
    }
}

// ---------------------------------------------------------------------------
// Indicators

template <typename S>
IndicatedInputs<S> apply_indicators(const std::vector<ag::Mat<S>>& unit_text, const ag::Mat<S>& visual,
                                    const std::vector<FrameSlot<S>>& frames) {
    IndicatedInputs<S> out;
    out.visual = visual;
    std::vector<char> covered(static_cast<std::size_t>(visual.rows()), 0);
    Eigen::Index text_rows = 0;
    for (const auto& f : frames) {
        if (f.unit < 0 || f.unit >= static_cast<int>(unit_text.size())) {
            throw std::invalid_argument("frame refers to a unit without text");
        }
        text_rows += unit_text[static_cast<std::size_t>(f.unit)].rows();
    }
    out.text.resize(text_rows, visual.cols());
    Eigen::Index t = 0;
    for (const auto& f : frames) {
        if (f.indicator.cols() != visual.cols()) throw std::invalid_argument("indicator width mismatch");
        if (f.row_begin < 0 || f.row_end > visual.rows() || f.row_begin > f.row_end) {
            throw std::invalid_argument("frame rows out of range");
        }
        for (int r = f.row_begin; r < f.row_end; ++r) {
            out.visual.row(r) += f.indicator;
            covered[static_cast<std::size_t>(r)] = 1;
        }
        const auto& y = unit_text[static_cast<std::size_t>(f.unit)];
        out.text.middleRows(t, y.rows()) = y.rowwise() + f.indicator;
        out.cross.push_back({f.row_begin, f.row_end, static_cast<int>(t), static_cast<int>(t + y.rows())});
        t += y.rows();
    }
    for (char c : covered) {
        if (!c) throw std::invalid_argument("visual token without an indicator assignment");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Blocks

template <typename S>
ag::Var<S> self_attention(ParamBinder<S>& bind, const std::string& prefix, const ag::Var<S>& x,
                          std::shared_ptr<const ag::Mat<S>> rope_angles,
                          std::shared_ptr<const std::vector<ag::Segment>> segments, const ModelConfig& cfg) {
    const int d = cfg.width;
    auto qkv = ag::linear(x, bind(prefix + ".attn.qkv.weight"), bind(prefix + ".attn.qkv.bias"));
    auto q = ag::rotate_pairs(ag::slice_cols(qkv, 0, d), rope_angles, cfg.head_dim());
    auto k = ag::rotate_pairs(ag::slice_cols(qkv, d, d), rope_angles, cfg.head_dim());
    auto v = ag::slice_cols(qkv, 2 * d, d);
    auto o = ag::segment_attention(q, k, v, cfg.heads, std::move(segments));
    return ag::linear(o, bind(prefix + ".attn.proj.weight"), bind(prefix + ".attn.proj.bias"));
}

template <typename S>
ag::Var<S> cross_attention(ParamBinder<S>& bind, const std::string& prefix, const ag::Var<S>& x,
                           const ag::Var<S>& text, std::shared_ptr<const std::vector<ag::Segment>> segments,
                           const ModelConfig& cfg) {
    const int d = cfg.width;
    auto q = ag::linear(x, bind(prefix + ".cross.q.weight"), bind(prefix + ".cross.q.bias"));
    auto kv = ag::linear(text, bind(prefix + ".cross.kv.weight"), bind(prefix + ".cross.kv.bias"));
    auto o = ag::segment_attention(q, ag::slice_cols(kv, 0, d), ag::slice_cols(kv, d, d), cfg.heads, std::move(segments));
    return ag::linear(o, bind(prefix + ".cross.proj.weight"), bind(prefix + ".cross.proj.bias"));
}

template <typename S>
ag::Var<S> dit_block(ParamBinder<S>& bind, int index, const ag::Var<S>& h, const ag::Var<S>& mods,
                     const ag::Var<S>& text, std::shared_ptr<const ag::Mat<S>> rope_angles,
                     std::shared_ptr<const std::vector<ag::Segment>> self_segments,
                     std::shared_ptr<const std::vector<ag::Segment>> cross_segments, const ModelConfig& cfg) {
    const int d = cfg.width;
    const std::string prefix = "blocks." + std::to_string(index);
    auto part = [&](int i) { return ag::slice_cols(mods, static_cast<Eigen::Index>(i) * d, d); };

    auto a1 = ag::modulate(ag::layer_norm(h), part(0), part(1));
    auto h1 = ag::add(h, ag::mul(part(2), self_attention(bind, prefix, a1, rope_angles, self_segments, cfg)));

    auto a2 = ag::modulate(ag::layer_norm(h1), part(3), part(4));
    auto h2 = ag::add(h1, ag::mul(part(5), cross_attention(bind, prefix, a2, text, cross_segments, cfg)));

    auto a3 = ag::modulate(ag::layer_norm(h2), part(6), part(7));
    auto hidden = ag::gelu(ag::linear(a3, bind(prefix + ".mlp.fc1.weight"), bind(prefix + ".mlp.fc1.bias")));
    auto mlp = ag::linear(hidden, bind(prefix + ".mlp.fc2.weight"), bind(prefix + ".mlp.fc2.bias"));
    return ag::add(h2, ag::mul(part(8), mlp));
}

template <typename S>
ag::Mat<S> long_context_self_attention(const ag::Mat<S>& u, std::span<const PositionTriple> positions,
                                       const ParamSet<S>& params, int block, const ModelConfig& cfg) {
    if (static_cast<Eigen::Index>(positions.size()) != u.rows()) {
        throw std::invalid_argument("one position per visual token is required");
    }
    ag::Graph<S> g;
    ParamBinder<S> bind(g, params, false);
    auto angles = std::make_shared<const ag::Mat<S>>(rope_angle_table<S>(positions, cfg.head_dim(), cfg.rope_base));
    auto segs = std::make_shared<const std::vector<ag::Segment>>(
        std::vector<ag::Segment>{{0, static_cast<int>(u.rows()), 0, static_cast<int>(u.rows())}});
    return self_attention(bind, "blocks." + std::to_string(block), g.constant(u), angles, segs, cfg).value();
}

template <typename S>
ag::Mat<S> per_cu_cross_attention(const ag::Mat<S>& mu, const ag::Mat<S>& text, const std::vector<ag::Segment>& cross,
                                  const ParamSet<S>& params, int block, const ModelConfig& cfg) {
    std::vector<char> covered(static_cast<std::size_t>(mu.rows()), 0);
    for (const auto& s : cross) {
        for (int r = s.q_begin; r < s.q_end && r < mu.rows(); ++r) covered[static_cast<std::size_t>(r)] = 1;
    }
    for (char c : covered) {
        if (!c) throw std::invalid_argument("orphan visual token: no text segment for its frame");
    }
    ag::Graph<S> g;
    ParamBinder<S> bind(g, params, false);
    auto segs = std::make_shared<const std::vector<ag::Segment>>(cross);
    return cross_attention(bind, "blocks." + std::to_string(block), g.constant(mu), g.constant(text), segs, cfg).value();
}

template <typename S>
RowVector<S> timestep_features(double t, int dim) {
    const int half = dim / 2;
    RowVector<S> out(dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out(i) = static_cast<S>(std::cos(t * freq));
        out(half + i) = static_cast<S>(std::sin(t * freq));
    }
    return out;
}

// ---------------------------------------------------------------------------
// DiffusionTransformer

namespace {

template <typename S>
ag::Mat<S> xavier(Rng& rng, int in, int out) {
    const double limit = std::sqrt(6.0 / (in + out));
    ag::Mat<S> m(in, out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>((2.0 * uniform_draw(rng) - 1.0) * limit);
    return m;
}

template <typename S>
ag::Mat<S> gaussian(Rng& rng, int rows, int cols, double std) {
    ag::Mat<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal_draw(rng) * std);
    return m;
}

template <typename S>
ParamSet<S> init_params(const ModelConfig& cfg, std::uint64_t seed, InitMode mode) {
    Rng rng(derive_seed(seed, {0x1a17}));
    const int d = cfg.width;
    const bool random = mode == InitMode::random;
    ParamSet<S> p;
    auto bias = [&](int n) { return random ? gaussian<S>(rng, 1, n, 0.02) : ag::Mat<S>::Zero(1, n); };
    auto gated = [&](int in, int out) { return random ? xavier<S>(rng, in, out) : ag::Mat<S>::Zero(in, out); };

    p.add("patch_embed.weight", xavier<S>(rng, cfg.token_dim(), d));
    p.add("patch_embed.bias", bias(d));
    p.add("time_embed.0.weight", gaussian<S>(rng, cfg.freq_dim, d, random ? 0.2 : 0.02));
    p.add("time_embed.0.bias", bias(d));
    p.add("time_embed.2.weight", gaussian<S>(rng, d, d, random ? 0.2 : 0.02));
    p.add("time_embed.2.bias", bias(d));
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string b = "blocks." + std::to_string(i);
        p.add(b + ".ada.weight", gated(d, 9 * d));
        p.add(b + ".ada.bias", bias(9 * d));
        p.add(b + ".attn.qkv.weight", xavier<S>(rng, d, 3 * d));
        p.add(b + ".attn.qkv.bias", bias(3 * d));
        p.add(b + ".attn.proj.weight", xavier<S>(rng, d, d));
        p.add(b + ".attn.proj.bias", bias(d));
        p.add(b + ".cross.q.weight", xavier<S>(rng, d, d));
        p.add(b + ".cross.q.bias", bias(d));
        p.add(b + ".cross.kv.weight", xavier<S>(rng, d, 2 * d));
        p.add(b + ".cross.kv.bias", bias(2 * d));
        p.add(b + ".cross.proj.weight", xavier<S>(rng, d, d));
        p.add(b + ".cross.proj.bias", bias(d));
        p.add(b + ".mlp.fc1.weight", xavier<S>(rng, d, cfg.mlp_hidden()));
        p.add(b + ".mlp.fc1.bias", bias(cfg.mlp_hidden()));
        p.add(b + ".mlp.fc2.weight", xavier<S>(rng, cfg.mlp_hidden(), d));
        p.add(b + ".mlp.fc2.bias", bias(d));
    }
    p.add("final.ada.weight", gated(d, 2 * d));
    p.add("final.ada.bias", bias(2 * d));
    p.add("final.linear.weight", gated(d, cfg.out_dim()));
    p.add("final.linear.bias", bias(cfg.out_dim()));
    return p;
}

}  // namespace

template <typename S>
DiffusionTransformer<S>::DiffusionTransformer(const ModelConfig& config, std::uint64_t seed, InitMode mode)
    : config_(config),
      params_((config.validate(), init_params<S>(config, seed, mode))),
      text_(Vocabulary(config.vocab_config()), config.width, config.text_seed) {}

template <typename S>
DiffusionTransformer<S>::DiffusionTransformer(const ModelConfig& config, ParamSet<S> params, TextEncoder<S> text)
    : config_(config), params_(std::move(params)), text_(std::move(text)) {
    config_.validate();
    const auto reference = init_params<S>(config_, 0, InitMode::zero_gates);
    if (reference.entries().size() != params_.entries().size()) {
        throw std::invalid_argument("parameter set does not match the model config");
    }
    for (const auto& e : reference.entries()) {
        if (!params_.contains(e.name)) throw std::invalid_argument("missing parameter " + e.name);
        const auto& v = params_.at(e.name);
        if (v.rows() != e.value.rows() || v.cols() != e.value.cols()) {
            throw std::invalid_argument("parameter " + e.name + " has the wrong shape");
        }
    }
    if (text_.width() != config_.width || text_.vocabulary().size() != config_.vocab_size) {
        throw std::invalid_argument("text encoder does not match the model config");
    }
}

template <typename S>
typename DiffusionTransformer<S>::Trace DiffusionTransformer<S>::build(ParamBinder<S>& bind,
                                                                       std::span<const ModelInput<S>> batch) const {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    auto& g = bind.graph();
    const int d = config_.width;
    const int out_dim = config_.out_dim();

    int total_rows = 0;
    for (const auto& in : batch) {
        if (!in.context) throw std::invalid_argument("model input without context");
        total_rows += in.context->total_tokens();
    }

    ag::Mat<S> tokens(total_rows, config_.token_dim());
    std::vector<PositionTriple> positions;
    positions.reserve(static_cast<std::size_t>(total_rows));
    std::vector<FrameSlot<S>> slots;
    std::vector<ag::Mat<S>> unit_text;
    auto sample_of_row = std::make_shared<std::vector<int>>();
    auto target_rows = std::make_shared<std::vector<int>>();
    auto self_segments = std::make_shared<std::vector<ag::Segment>>();
    ag::Mat<S> time_features(static_cast<Eigen::Index>(batch.size()), config_.freq_dim);
    Trace trace;

    int row = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& ctx = *batch[b].context;
        const int target_index = ctx.target_index();
        const int row0 = row;
        const int unit_offset = static_cast<int>(unit_text.size());
        for (const auto& ids : ctx.unit_text) unit_text.push_back(text_.encode(ids));
        for (std::size_t fi = 0; fi < ctx.frames.size(); ++fi) {
            const auto& f = ctx.frames[fi];
            const int n = f.tokens.count();
            if (f.tokens.values.cols() != config_.token_dim()) {
                throw std::invalid_argument("frame token width does not match the model");
            }
            tokens.middleRows(row, n) = f.tokens.values.template cast<S>();
            if (static_cast<int>(fi) == target_index) {
                const auto& noisy = batch[b].noisy_target;
                if (noisy.rows() != n || noisy.cols() != out_dim) {
                    throw std::invalid_argument("noisy target shape does not match the target frame");
                }
                tokens.block(row, 0, n, out_dim) = noisy;
                for (int p = 0; p < n; ++p) target_rows->push_back(row + p);
                trace.target_counts.push_back(n);
            }
            for (int p = 0; p < n; ++p) {
                positions.push_back({f.frame_coord, f.tokens.row_of(p), f.tokens.col_of(p)});
                sample_of_row->push_back(static_cast<int>(b));
            }
            if (f.unit < 0 || f.unit >= static_cast<int>(ctx.unit_text.size())) {
                throw std::invalid_argument("frame refers to a missing unit");
            }
            slots.push_back({unit_offset + f.unit, row, row + n,
                             f.is_target ? text_.target_embedding() : text_.indicator_embedding(f.indicator)});
            row += n;
        }
        self_segments->push_back({row0, row, row0, row});
        time_features.row(static_cast<Eigen::Index>(b)) = timestep_features<S>(batch[b].timestep, config_.freq_dim);
    }

    auto indicated = apply_indicators<S>(unit_text, ag::Mat<S>::Zero(total_rows, d), slots);
    auto cross_segments = std::make_shared<const std::vector<ag::Segment>>(std::move(indicated.cross));
    auto angles = std::make_shared<const ag::Mat<S>>(rope_angle_table<S>(positions, config_.head_dim(), config_.rope_base));

    auto u = ag::linear(g.constant(std::move(tokens)), bind("patch_embed.weight"), bind("patch_embed.bias"));
    auto h = ag::add(u, g.constant(std::move(indicated.visual)));
    auto text = g.constant(std::move(indicated.text));
    trace.stack_input = h;

    auto temb = ag::linear(g.constant(std::move(time_features)), bind("time_embed.0.weight"), bind("time_embed.0.bias"));
    temb = ag::linear(ag::silu(temb), bind("time_embed.2.weight"), bind("time_embed.2.bias"));
    auto cond = ag::silu(temb);

    std::shared_ptr<const std::vector<int>> rows_to_sample = sample_of_row;
    std::shared_ptr<const std::vector<ag::Segment>> self_segs = self_segments;
    for (int i = 0; i < config_.depth; ++i) {
        const std::string b = "blocks." + std::to_string(i);
        auto mods = ag::gather_rows(ag::linear(cond, bind(b + ".ada.weight"), bind(b + ".ada.bias")), rows_to_sample);
        h = dit_block(bind, i, h, mods, text, angles, self_segs, cross_segments, config_);
    }
    trace.stack_output = h;

    auto fmods = ag::gather_rows(ag::linear(cond, bind("final.ada.weight"), bind("final.ada.bias")), rows_to_sample);
    auto normed = ag::modulate(ag::layer_norm(h), ag::slice_cols(fmods, 0, d), ag::slice_cols(fmods, d, d));
    trace.head_output = ag::linear(normed, bind("final.linear.weight"), bind("final.linear.bias"));
    trace.prediction = ag::gather_rows(trace.head_output, std::shared_ptr<const std::vector<int>>(target_rows));
    return trace;
}

template <typename S>
std::vector<ag::Mat<S>> DiffusionTransformer<S>::predict_batch(std::span<const ModelInput<S>> batch) const {
    ag::Graph<S> g;
    ParamBinder<S> bind(g, params_, false);
    const auto trace = build(bind, batch);
    std::vector<ag::Mat<S>> out;
    Eigen::Index row = 0;
    for (int n : trace.target_counts) {
        out.push_back(trace.prediction.value().middleRows(row, n));
        row += n;
    }
    return out;
}

template <typename S>
ag::Mat<S> DiffusionTransformer<S>::predict(const ModelInput<S>& input) const {
    return predict_batch(std::span<const ModelInput<S>>(&input, 1)).front();
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define ACE_INSTANTIATE_MODEL(S)                                                                                     \
    template class ParamSet<S>;                                                                                      \
    template class ParamBinder<S>;                                                                                   \
    template class DiffusionTransformer<S>;                                                                          \
    template std::vector<S> rope3d<S>(std::span<const S>, PositionTriple, double);                                   \
    template ag::Mat<S> rope_angle_table<S>(std::span<const PositionTriple>, int, double);                           \
    template IndicatedInputs<S> apply_indicators<S>(const std::vector<ag::Mat<S>>&, const ag::Mat<S>&,               \
                                                    const std::vector<FrameSlot<S>>&);                               \
    template ag::Var<S> self_attention<S>(ParamBinder<S>&, const std::string&, const ag::Var<S>&,                    \
                                          std::shared_ptr<const ag::Mat<S>>,                                         \
                                          std::shared_ptr<const std::vector<ag::Segment>>, const ModelConfig&);      \
    template ag::Var<S> cross_attention<S>(ParamBinder<S>&, const std::string&, const ag::Var<S>&,                   \
                                           const ag::Var<S>&, std::shared_ptr<const std::vector<ag::Segment>>,       \
                                           const ModelConfig&);                                                      \
    template ag::Var<S> dit_block<S>(ParamBinder<S>&, int, const ag::Var<S>&, const ag::Var<S>&, const ag::Var<S>&,  \
                                     std::shared_ptr<const ag::Mat<S>>,                                              \
                                     std::shared_ptr<const std::vector<ag::Segment>>,                                \
                                     std::shared_ptr<const std::vector<ag::Segment>>, const ModelConfig&);           \
    template ag::Mat<S> long_context_self_attention<S>(const ag::Mat<S>&, std::span<const PositionTriple>,           \
                                                       const ParamSet<S>&, int, const ModelConfig&);                 \
    template ag::Mat<S> per_cu_cross_attention<S>(const ag::Mat<S>&, const ag::Mat<S>&,                              \
                                                  const std::vector<ag::Segment>&, const ParamSet<S>&, int,          \
                                                  const ModelConfig&);                                               \
    template RowVector<S> timestep_features<S>(double, int);

ACE_INSTANTIATE_MODEL(float)
ACE_INSTANTIATE_MODEL(double)

#undef ACE_INSTANTIATE_MODEL

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'A', 'C', 'E', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw CheckpointError("truncated checkpoint archive");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

void put_tensor(std::string& out, const std::string& name, const ag::Mat<float>& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, 2);
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(m.data()[i]));
}

std::filesystem::path manifest_path(const std::filesystem::path& path) {
    return path.string() + ".manifest";
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DiffusionTransformer<float>& model, CheckpointMeta meta) {
    std::string archive(kCheckpointMagic, sizeof(kCheckpointMagic));
    const auto& entries = model.params().entries();
    put_u32(archive, static_cast<std::uint32_t>(entries.size() + 1));
    for (const auto& e : entries) put_tensor(archive, e.name, e.value);
    put_tensor(archive, "text.embedding", model.text_encoder().table());

    const std::string config_text = model.config().to_text();
    meta.id = hex64(fnv1a64(archive, fnv1a64(config_text)));

    std::ostringstream manifest;
    manifest << "format = ace-checkpoint\n"
             << "version = 1\n"
             << "step = " << meta.step << '\n'
             << "stage = " << meta.stage << '\n'
             << "diffusion_steps = " << meta.diffusion_steps << '\n'
             << "checkpoint_id = " << meta.id << '\n'
             << "config_hash = " << hex64(model.config().hash()) << '\n'
             << "trainable_parameters = " << model.parameter_count() << '\n';
    std::istringstream cfg(config_text);
    for (std::string line; std::getline(cfg, line);) manifest << "model." << line << '\n';

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw CheckpointError("cannot write " + path.string());
        out.write(archive.data(), static_cast<std::streamsize>(archive.size()));
    }
    std::ofstream out(manifest_path(path));
    if (!out) throw CheckpointError("cannot write manifest for " + path.string());
    out << manifest.str();
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream min(manifest_path(path));
    if (!min) throw CheckpointError("missing checkpoint manifest for " + path.string());
    CheckpointMeta meta;
    std::string config_text, config_hash, line;
    bool format_ok = false;
    while (std::getline(min, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
        if (key == "format") format_ok = value == "ace-checkpoint";
        else if (key == "version" && value != "1") throw CheckpointError("unsupported checkpoint version " + value);
        else if (key == "step") meta.step = std::stol(value);
        else if (key == "stage") meta.stage = value;
        else if (key == "diffusion_steps") meta.diffusion_steps = std::stoi(value);
        else if (key == "checkpoint_id") meta.id = value;
        else if (key == "config_hash") config_hash = value;
        else if (key.rfind("model.", 0) == 0) config_text += key.substr(6) + " = " + value + "\n";
    }
    if (!format_ok) throw CheckpointError("not a checkpoint manifest: " + manifest_path(path).string());

    ModelConfig config;
    try {
        config = ModelConfig::from_text(config_text);
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("bad model config in manifest: ") + e.what());
    }
    if (hex64(config.hash()) != config_hash) throw CheckpointError("config hash mismatch in " + path.string());

    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    const std::string archive((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (archive.size() < 12 || archive.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0) {
        throw CheckpointError("not a checkpoint archive: " + path.string());
    }
    if (!meta.id.empty() && hex64(fnv1a64(archive, fnv1a64(config.to_text()))) != meta.id) {
        throw CheckpointError("checkpoint archive does not match its manifest id");
    }

    std::size_t pos = 8;
    const std::uint32_t count = get_u32(archive, pos);
    ParamSet<float> params;
    RowMatrix<float> table;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(archive, pos);
        if (pos + len > archive.size()) throw CheckpointError("truncated tensor name");
        std::string name = archive.substr(pos, len);
        pos += len;
        if (get_u32(archive, pos) != 2) throw CheckpointError("only rank-2 tensors are supported");
        const std::uint32_t rows = get_u32(archive, pos), cols = get_u32(archive, pos);
        if (static_cast<std::uint64_t>(rows) * cols * 4 > archive.size() - pos) throw CheckpointError("truncated tensor data");
        ag::Mat<float> m(rows, cols);
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = std::bit_cast<float>(get_u32(archive, pos));
        if (name == "text.embedding") table = std::move(m);
        else params.add(std::move(name), std::move(m));
    }
    if (table.size() == 0) throw CheckpointError("checkpoint lacks the text embedding table");
    try {
        Vocabulary vocab(config.vocab_config());
        return LoadedCheckpoint{DiffusionTransformer<float>(config, std::move(params), TextEncoder<float>(vocab, std::move(table))),
                                meta};
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint does not match its config: ") + e.what());
    }
}

}  // namespace ace
