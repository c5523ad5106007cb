#pragma once

// Minimal reverse-mode tape over row-major Eigen matrices. Every op records a closure that
// pushes its output gradient into its inputs; Graph::backward replays them in reverse.
// Nodes that do not require gradients (constants and anything computed only from constants)
// skip their backward work entirely.

#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "ace/instruction_codec.hpp"

namespace ace::ag {

template <typename S>
using Mat = RowMatrix<S>;

template <typename S>
class Graph;

template <typename S>
struct Var {
    Graph<S>* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    const Mat<S>& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

template <typename S>
class Graph {
public:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        bool requires_grad = false;
        std::function<void(Graph&, int)> backward;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<S> constant(Mat<S> value);
    /// Leaf that accumulates a gradient.
    Var<S> leaf(Mat<S> value);

    Var<S> emplace(Mat<S> value, bool requires_grad, std::function<void(Graph&, int)> backward);

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    bool requires_grad(const Var<S>& v) const { return node(v.id).requires_grad; }

    /// Gradient buffer of a node, zero-allocated on first use.
    Mat<S>& grad_buffer(int id);
    /// Gradient of a node after backward (empty if it never received one).
    const Mat<S>& grad(const Var<S>& v) const { return node(v.id).grad; }

    /// Seeds d(loss)/d(loss) = 1 for a 1x1 loss and back-propagates.
    void backward(const Var<S>& loss);
    /// Back-propagates from an arbitrary node with the given seed gradient.
    void backward(const Var<S>& output, const Mat<S>& seed);

    std::size_t size() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
};

template <typename S>
const Mat<S>& Var<S>::value() const {
    return graph->node(id).value;
}

/// Query rows [q_begin, q_end) attend only to key rows [k_begin, k_end).
struct Segment {
    int q_begin = 0;
    int q_end = 0;
    int k_begin = 0;
    int k_end = 0;
};

/// x * W + b; `bias` may be an invalid Var.
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);
template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S>
Var<S> scale(const Var<S>& a, S factor);
/// x * (1 + scale) + shift, all the same shape.
template <typename S>
Var<S> modulate(const Var<S>& x, const Var<S>& shift, const Var<S>& scale);
/// out.row(i) = a.row(index[i]); backward scatter-adds.
template <typename S>
Var<S> gather_rows(const Var<S>& a, std::shared_ptr<const std::vector<int>> index);
template <typename S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index begin, Eigen::Index count);
/// Per-row normalization to zero mean and unit variance (no affine parameters).
template <typename S>
Var<S> layer_norm(const Var<S>& x, S eps = S(1e-6));
template <typename S>
Var<S> silu(const Var<S>& x);
/// tanh approximation.
template <typename S>
Var<S> gelu(const Var<S>& x);

/// Rotates column pairs (2j, 2j+1) inside every head block of width `head_dim` by
/// angle(row, j); `angles` is rows x head_dim/2 and is shared by all heads.
template <typename S>
Var<S> rotate_pairs(const Var<S>& x, std::shared_ptr<const Mat<S>> angles, int head_dim);

/// Multi-head softmax attention restricted to segments. Heads are contiguous column blocks.
/// Query rows not covered by any segment produce zeros.
template <typename S>
Var<S> segment_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads,
                         std::shared_ptr<const std::vector<Segment>> segments);

/// mean((pred - target)^2) as a 1x1 node; target is treated as a constant.
template <typename S>
Var<S> mse(const Var<S>& pred, const Mat<S>& target);

}  // namespace ace::ag
