#pragma once

// Long-context diffusion transformer.
//
// Input assembly per request: patch tokens -> linear patch embedding -> + indicator embedding
// of the frame (u' = u + I-Emb). Every frame gets its own copy of its unit's instruction
// embedding shifted by the same indicator embedding (y'_{m,n} = y_m + I-Emb_{m,n}).
//
// Each block, with per-sample shift/scale/gate triples from the timestep embedding:
//   h += gate1 * SelfAttn(mod1(LN(h)))    full attention over every visual token, 3-D RoPE on Q/K
//   h += gate2 * CrossAttn(mod2(LN(h)))   tokens of frame (m,n) attend only to y'_{m,n}
//   h += gate3 * MLP(mod3(LN(h)))
// Gates come from a zero-initialized projection, so a fresh stack is the identity.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ace/autograd.hpp"
#include "ace/instruction_codec.hpp"
#include "ace/tokenized_context.hpp"

namespace ace {

struct ModelConfig {
    int width = 96;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 2;
    int freq_dim = 64;
    int image_channels = 3;
    int codec_factor = kDefaultCodecFactor;
    int patch = kDefaultPatchSize;
    double rope_base = 10000.0;
    int visual_cap = kDefaultVisualCap;
    int max_image_number = kDefaultMaxImageNumber;
    int vocab_size = kDefaultVocabSize;
    int max_text_tokens = kDefaultMaxTextTokens;
    std::uint64_t hash_seed = kDefaultHashSeed;
    std::uint64_t text_seed = 1;

    int head_dim() const { return width / heads; }
    int latent_channels() const { return image_channels * codec_factor * codec_factor; }
    int token_dim() const { return (latent_channels() + 1) * patch * patch; }
    int out_dim() const { return latent_channels() * patch * patch; }
    int mlp_hidden() const { return width * mlp_ratio; }

    /// Throws std::invalid_argument on inconsistent shapes (e.g. head_dim not divisible by 6).
    void validate() const;
    VocabularyConfig vocab_config() const;
    ContextOptions context_options() const;

    /// Canonical "key = value" text; hash() is FNV-1a of it.
    std::string to_text() const;
    static ModelConfig from_text(std::string_view text);
    std::uint64_t hash() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PositionTriple {
    int frame = 0;
    int row = 0;
    int col = 0;
};

/// Rotates a vector whose width is divisible by 6: three equal axis blocks (frame, row,
/// column), pairs (2j, 2j+1) inside each block turned by pos * base^(-2j / axis_width).
template <typename S>
std::vector<S> rope3d(std::span<const S> v, PositionTriple pos, double base = 10000.0);

/// Per-row angle table (rows x head_dim/2) consumed by ag::rotate_pairs.
template <typename S>
ag::Mat<S> rope_angle_table(std::span<const PositionTriple> positions, int head_dim, double base);

template <typename S>
class ParamSet {
public:
    struct Entry {
        std::string name;
        ag::Mat<S> value;
    };

    void add(std::string name, ag::Mat<S> value);
    bool contains(const std::string& name) const { return index_.contains(name); }
    ag::Mat<S>& at(const std::string& name);
    const ag::Mat<S>& at(const std::string& name) const;
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t scalar_count() const;
    bool all_finite() const;
    /// Same names and shapes, zero values.
    ParamSet zeros_like() const;

    template <typename T>
    ParamSet<T> cast() const {
        ParamSet<T> out;
        for (const auto& e : entries_) out.add(e.name, e.value.template cast<T>());
        return out;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

enum class InitMode { zero_gates, random };

/// Creates graph vars for parameters on demand; leaves when trainable, constants otherwise.
template <typename S>
class ParamBinder {
public:
    ParamBinder(ag::Graph<S>& graph, const ParamSet<S>& params, bool trainable)
        : graph_(graph), params_(params), trainable_(trainable) {}

    ag::Var<S> operator()(const std::string& name);
    ag::Graph<S>& graph() { return graph_; }
    /// Adds d(loss)/d(param) of every bound parameter into `grads`.
    void accumulate_grads(ParamSet<S>& grads) const;

private:
    ag::Graph<S>& graph_;
    const ParamSet<S>& params_;
    bool trainable_;
    std::map<std::string, ag::Var<S>> bound_;
};

/// A frame's rows inside the concatenated visual sequence.
template <typename S>
struct FrameSlot {
    int unit = 0;
    int row_begin = 0;
    int row_end = 0;
    RowVector<S> indicator;  // I-Emb of the frame
};

template <typename S>
struct IndicatedInputs {
    ag::Mat<S> visual;                 // u'
    ag::Mat<S> text;                   // y'_{m,n} copies stacked frame by frame
    std::vector<ag::Segment> cross;    // frame rows -> its own text rows
};

/// u'_{m,n,p} = u_{m,n,p} + I-Emb_{m,n} and y'_{m,n} = y_m + I-Emb_{m,n}.
/// Throws std::invalid_argument when a visual row has no frame or a frame has no unit text.
template <typename S>
IndicatedInputs<S> apply_indicators(const std::vector<ag::Mat<S>>& unit_text, const ag::Mat<S>& visual,
                                    const std::vector<FrameSlot<S>>& frames);

// Graph-level building blocks; `prefix` is "blocks.<i>".
template <typename S>
ag::Var<S> self_attention(ParamBinder<S>& bind, const std::string& prefix, const ag::Var<S>& x,
                          std::shared_ptr<const ag::Mat<S>> rope_angles,
                          std::shared_ptr<const std::vector<ag::Segment>> segments, const ModelConfig& cfg);
template <typename S>
ag::Var<S> cross_attention(ParamBinder<S>& bind, const std::string& prefix, const ag::Var<S>& x,
                           const ag::Var<S>& text, std::shared_ptr<const std::vector<ag::Segment>> segments,
                           const ModelConfig& cfg);
/// `mods` holds per-row [shift1 scale1 gate1 shift2 scale2 gate2 shift3 scale3 gate3].
template <typename S>
ag::Var<S> dit_block(ParamBinder<S>& bind, int index, const ag::Var<S>& h, const ag::Var<S>& mods,
                     const ag::Var<S>& text, std::shared_ptr<const ag::Mat<S>> rope_angles,
                     std::shared_ptr<const std::vector<ag::Segment>> self_segments,
                     std::shared_ptr<const std::vector<ag::Segment>> cross_segments, const ModelConfig& cfg);

// Matrix-level conveniences over one request (a single self-attention segment).
template <typename S>
ag::Mat<S> long_context_self_attention(const ag::Mat<S>& u, std::span<const PositionTriple> positions,
                                       const ParamSet<S>& params, int block, const ModelConfig& cfg);
template <typename S>
ag::Mat<S> per_cu_cross_attention(const ag::Mat<S>& mu, const ag::Mat<S>& text, const std::vector<ag::Segment>& cross,
                                  const ParamSet<S>& params, int block, const ModelConfig& cfg);

/// Sinusoidal timestep features, [cos | sin] halves.
template <typename S>
RowVector<S> timestep_features(double t, int dim);

template <typename S>
struct ModelInput {
    const TokenizedContext* context = nullptr;
    ag::Mat<S> noisy_target;  // target tokens x out_dim
    int timestep = 0;
};

template <typename S>
class DiffusionTransformer {
public:
    DiffusionTransformer(const ModelConfig& config, std::uint64_t seed, InitMode mode = InitMode::zero_gates);
    DiffusionTransformer(const ModelConfig& config, ParamSet<S> params, TextEncoder<S> text);

    struct Trace {
        ag::Var<S> prediction;   // stacked target-token predictions of every sample
        ag::Var<S> head_output;  // predictions for every visual token
        ag::Var<S> stack_input;  // u' entering the first block
        ag::Var<S> stack_output; // after the last block
        std::vector<int> target_counts;
    };

    /// Records the forward pass of a batch into `bind`'s graph.
    Trace build(ParamBinder<S>& bind, std::span<const ModelInput<S>> batch) const;

    /// Predicted noise for the target tokens of one request.
    ag::Mat<S> predict(const ModelInput<S>& input) const;
    /// Several requests in one stacked pass; results are split per request.
    std::vector<ag::Mat<S>> predict_batch(std::span<const ModelInput<S>> batch) const;

    const ModelConfig& config() const { return config_; }
    const Vocabulary& vocabulary() const { return text_.vocabulary(); }
    const TextEncoder<S>& text_encoder() const { return text_; }
    ParamSet<S>& params() { return params_; }
    const ParamSet<S>& params() const { return params_; }
    std::size_t parameter_count() const { return params_.scalar_count(); }

    template <typename T>
    DiffusionTransformer<T> cast() const {
        return DiffusionTransformer<T>(config_, params_.template cast<T>(),
                                       TextEncoder<T>(text_.vocabulary(), text_.table().template cast<T>()));
    }

private:
    ModelConfig config_;
    ParamSet<S> params_;
    TextEncoder<S> text_;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;
extern template class ParamBinder<float>;
extern template class ParamBinder<double>;
extern template class DiffusionTransformer<float>;
extern template class DiffusionTransformer<double>;

// ---------------------------------------------------------------------------
// Checkpoints: a binary archive of named float32 tensors plus a text manifest next to it
// ("<path>.manifest") carrying the model config and its hash.

struct CheckpointMeta {
    long step = 0;
    std::string stage;
    std::string id;  // hex of a hash over config and tensor bytes
    int diffusion_steps = 1000;  // schedule length the weights were trained with
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const DiffusionTransformer<float>& model, CheckpointMeta meta);

struct LoadedCheckpoint {
    DiffusionTransformer<float> model;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ace
