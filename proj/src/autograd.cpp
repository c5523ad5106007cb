#include "ace/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ace::ag {

template <typename S>
Var<S> Graph<S>::emplace(Mat<S> value, bool requires_grad, std::function<void(Graph&, int)> backward) {
    nodes_.push_back(Node{std::move(value), Mat<S>(), requires_grad, requires_grad ? std::move(backward) : nullptr});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Graph<S>::constant(Mat<S> value) {
    return emplace(std::move(value), false, nullptr);
}

template <typename S>
Var<S> Graph<S>::leaf(Mat<S> value) {
    return emplace(std::move(value), true, nullptr);
}

template <typename S>
Mat<S>& Graph<S>::grad_buffer(int id) {
    Node& n = node(id);
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

template <typename S>
void Graph<S>::backward(const Var<S>& loss) {
    if (loss.value().size() != 1) throw std::invalid_argument("backward() needs a scalar loss");
    backward(loss, Mat<S>::Ones(1, 1));
}

template <typename S>
void Graph<S>::backward(const Var<S>& output, const Mat<S>& seed) {
    if (seed.rows() != output.rows() || seed.cols() != output.cols()) {
        throw std::invalid_argument("seed gradient shape mismatch");
    }
    grad_buffer(output.id) += seed;
    for (int id = output.id; id >= 0; --id) {
        Node& n = node(id);
        if (n.backward && n.grad.size() != 0) n.backward(*this, id);
    }
}

namespace {

template <typename S>
void check_same_graph(const Var<S>& a, const Var<S>& b) {
    if (a.graph != b.graph) throw std::invalid_argument("vars belong to different graphs");
}

template <typename S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

}  // namespace

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
    check_same_graph(x, weight);
    if (x.cols() != weight.rows()) throw std::invalid_argument("linear: inner dimension mismatch");
    Graph<S>& g = *x.graph;
    Mat<S> out(x.rows(), weight.cols());
    out.noalias() = x.value() * weight.value();
    const bool has_bias = bias.valid();
    if (has_bias) {
        if (bias.rows() != 1 || bias.cols() != weight.cols()) throw std::invalid_argument("linear: bias shape");
        out.rowwise() += bias.value().row(0);
    }
    const bool rg = g.requires_grad(x) || g.requires_grad(weight) || (has_bias && g.requires_grad(bias));
    const int xi = x.id, wi = weight.id, bi = bias.id;
    return g.emplace(std::move(out), rg, [xi, wi, bi, has_bias](Graph<S>& g, int self) {
        const Mat<S>& gy = g.node(self).grad;
        if (g.node(xi).requires_grad) g.grad_buffer(xi).noalias() += gy * g.node(wi).value.transpose();
        if (g.node(wi).requires_grad) g.grad_buffer(wi).noalias() += g.node(xi).value.transpose() * gy;
        if (has_bias && g.node(bi).requires_grad) g.grad_buffer(bi) += gy.colwise().sum();
    });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    check_same_graph(a, b);
    check_same_shape(a, b, "add");
    Graph<S>& g = *a.graph;
    const int ai = a.id, bi = b.id;
    return g.emplace(a.value() + b.value(), g.requires_grad(a) || g.requires_grad(b), [ai, bi](Graph<S>& g, int self) {
        const Mat<S>& gy = g.node(self).grad;
        if (g.node(ai).requires_grad) g.grad_buffer(ai) += gy;
        if (g.node(bi).requires_grad) g.grad_buffer(bi) += gy;
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    check_same_graph(a, b);
    check_same_shape(a, b, "mul");
    Graph<S>& g = *a.graph;
    const int ai = a.id, bi = b.id;
    return g.emplace(a.value().cwiseProduct(b.value()), g.requires_grad(a) || g.requires_grad(b),
                     [ai, bi](Graph<S>& g, int self) {
                         const Mat<S>& gy = g.node(self).grad;
                         if (g.node(ai).requires_grad) g.grad_buffer(ai) += gy.cwiseProduct(g.node(bi).value);
                         if (g.node(bi).requires_grad) g.grad_buffer(bi) += gy.cwiseProduct(g.node(ai).value);
                     });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
    Graph<S>& g = *a.graph;
    const int ai = a.id;
    return g.emplace(a.value() * factor, g.requires_grad(a), [ai, factor](Graph<S>& g, int self) {
        g.grad_buffer(ai) += g.node(self).grad * factor;
    });
}

template <typename S>
Var<S> modulate(const Var<S>& x, const Var<S>& shift, const Var<S>& scl) {
    check_same_graph(x, shift);
    check_same_graph(x, scl);
    check_same_shape(x, shift, "modulate");
    check_same_shape(x, scl, "modulate");
    Graph<S>& g = *x.graph;
    Mat<S> out = (x.value().array() * (scl.value().array() + S(1)) + shift.value().array()).matrix();
    const bool rg = g.requires_grad(x) || g.requires_grad(shift) || g.requires_grad(scl);
    const int xi = x.id, hi = shift.id, si = scl.id;
    return g.emplace(std::move(out), rg, [xi, hi, si](Graph<S>& g, int self) {
        const Mat<S>& gy = g.node(self).grad;
        if (g.node(xi).requires_grad) {
            g.grad_buffer(xi).array() += gy.array() * (g.node(si).value.array() + S(1));
        }
        if (g.node(hi).requires_grad) g.grad_buffer(hi) += gy;
        if (g.node(si).requires_grad) g.grad_buffer(si) += gy.cwiseProduct(g.node(xi).value);
    });
}

template <typename S>
Var<S> gather_rows(const Var<S>& a, std::shared_ptr<const std::vector<int>> index) {
    Graph<S>& g = *a.graph;
    const Mat<S>& av = a.value();
    Mat<S> out(static_cast<Eigen::Index>(index->size()), av.cols());
    for (std::size_t i = 0; i < index->size(); ++i) {
        const int r = (*index)[i];
        if (r < 0 || r >= av.rows()) throw std::out_of_range("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = av.row(r);
    }
    const int ai = a.id;
    return g.emplace(std::move(out), g.requires_grad(a), [ai, index](Graph<S>& g, int self) {
        const Mat<S>& gy = g.node(self).grad;
        Mat<S>& ga = g.grad_buffer(ai);
        for (std::size_t i = 0; i < index->size(); ++i) ga.row((*index)[i]) += gy.row(static_cast<Eigen::Index>(i));
    });
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index begin, Eigen::Index count) {
    if (begin < 0 || count < 0 || begin + count > a.cols()) throw std::out_of_range("slice_cols: bad range");
    Graph<S>& g = *a.graph;
    const int ai = a.id;
    return g.emplace(a.value().middleCols(begin, count), g.requires_grad(a), [ai, begin, count](Graph<S>& g, int self) {
        g.grad_buffer(ai).middleCols(begin, count) += g.node(self).grad;
    });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, S eps) {
    Graph<S>& g = *x.graph;
    const Mat<S>& xv = x.value();
    const Eigen::Index n = xv.cols();
    Mat<S> out(xv.rows(), n);
    auto inv_std = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, 1>>(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const S mean = xv.row(r).mean();
        const auto centered = (xv.row(r).array() - mean).eval();
        const S var = centered.square().mean();
        const S is = S(1) / std::sqrt(var + eps);
        (*inv_std)(r) = is;
        out.row(r) = centered * is;
    }
    const int xi = x.id;
    return g.emplace(std::move(out), g.requires_grad(x), [xi, inv_std](Graph<S>& g, int self) {
        const Mat<S>& gy = g.node(self).grad;
        const Mat<S>& y = g.node(self).value;
        Mat<S>& gx = g.grad_buffer(xi);
        for (Eigen::Index r = 0; r < gy.rows(); ++r) {
            const S mean_g = gy.row(r).mean();
            const S mean_gy = gy.row(r).dot(y.row(r)) / static_cast<S>(gy.cols());
            gx.row(r).array() += (*inv_std)(r) * (gy.row(r).array() - mean_g - y.row(r).array() * mean_gy);
        }
    });
}

template <typename S>
Var<S> silu(const Var<S>& x) {
    Graph<S>& g = *x.graph;
    const auto sig = (S(1) / (S(1) + (-x.value().array()).exp())).eval();
    Mat<S> out = (x.value().array() * sig).matrix();
    const int xi = x.id;
    return g.emplace(std::move(out), g.requires_grad(x), [xi](Graph<S>& g, int self) {
        const auto& xv = g.node(xi).value.array();
        const auto s = (S(1) / (S(1) + (-xv).exp())).eval();
        g.grad_buffer(xi).array() += g.node(self).grad.array() * (s * (S(1) + xv * (S(1) - s)));
    });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
    Graph<S>& g = *x.graph;
    constexpr S c = static_cast<S>(0.79788456080286535588);  // sqrt(2/pi)
    constexpr S k = static_cast<S>(0.044715);
    const auto xa = x.value().array();
    const auto t = (c * (xa + k * xa.cube())).tanh().eval();
    Mat<S> out = (S(0.5) * xa * (S(1) + t)).matrix();
    const int xi = x.id;
    return g.emplace(std::move(out), g.requires_grad(x), [xi, c, k](Graph<S>& g, int self) {
        const auto xa = g.node(xi).value.array();
        const auto t = (c * (xa + k * xa.cube())).tanh().eval();
        const auto d = S(0.5) * (S(1) + t) + S(0.5) * xa * (S(1) - t.square()) * c * (S(1) + S(3) * k * xa.square());
        g.grad_buffer(xi).array() += g.node(self).grad.array() * d;
    });
}

namespace {

template <typename S>
void rotate_rows(Mat<S>& out, const Mat<S>& in, const Mat<S>& angles, int head_dim, S sign) {
    const Eigen::Index half = head_dim / 2;
    const Eigen::Index heads = in.cols() / head_dim;
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
        for (Eigen::Index j = 0; j < half; ++j) {
            const S a = angles(r, j);
            const S cs = std::cos(a), sn = sign * std::sin(a);
            for (Eigen::Index h = 0; h < heads; ++h) {
                const Eigen::Index c0 = h * head_dim + 2 * j;
                const S x0 = in(r, c0), x1 = in(r, c0 + 1);
                out(r, c0) = x0 * cs - x1 * sn;
                out(r, c0 + 1) = x0 * sn + x1 * cs;
            }
        }
    }
}

}  // namespace

template <typename S>
Var<S> rotate_pairs(const Var<S>& x, std::shared_ptr<const Mat<S>> angles, int head_dim) {
    if (head_dim <= 0 || head_dim % 2 != 0 || x.cols() % head_dim != 0) {
        throw std::invalid_argument("rotate_pairs: width must be a multiple of an even head_dim");
    }
    if (angles->rows() != x.rows() || angles->cols() != head_dim / 2) {
        throw std::invalid_argument("rotate_pairs: angle table shape mismatch");
    }
    Graph<S>& g = *x.graph;
    Mat<S> out(x.rows(), x.cols());
    rotate_rows<S>(out, x.value(), *angles, head_dim, S(1));
    const int xi = x.id;
    return g.emplace(std::move(out), g.requires_grad(x), [xi, angles, head_dim](Graph<S>& g, int self) {
        const Mat<S>& gy = g.node(self).grad;
        Mat<S> back(gy.rows(), gy.cols());
        rotate_rows<S>(back, gy, *angles, head_dim, S(-1));
        g.grad_buffer(xi) += back;
    });
}

template <typename S>
Var<S> segment_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads,
                         std::shared_ptr<const std::vector<Segment>> segments) {
    check_same_graph(q, k);
    check_same_graph(q, v);
    if (q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows()) {
        throw std::invalid_argument("segment_attention: q/k/v shape mismatch");
    }
    if (heads <= 0 || q.cols() % heads != 0) throw std::invalid_argument("segment_attention: bad head count");
    const Eigen::Index dh = q.cols() / heads;
    const S scl = S(1) / std::sqrt(static_cast<S>(dh));
    Graph<S>& g = *q.graph;
    const Mat<S>& Q = q.value();
    const Mat<S>& K = k.value();
    const Mat<S>& V = v.value();

    Mat<S> out = Mat<S>::Zero(Q.rows(), Q.cols());
    auto probs = std::make_shared<std::vector<Mat<S>>>();
    probs->reserve(segments->size() * static_cast<std::size_t>(heads));
    for (const auto& seg : *segments) {
        const Eigen::Index nq = seg.q_end - seg.q_begin, nk = seg.k_end - seg.k_begin;
        if (nq < 0 || nk <= 0 || seg.q_end > Q.rows() || seg.k_end > K.rows() || seg.q_begin < 0 || seg.k_begin < 0) {
            throw std::invalid_argument("segment_attention: invalid segment");
        }
        for (int h = 0; h < heads; ++h) {
            Mat<S> P(nq, nk);
            P.noalias() = Q.block(seg.q_begin, h * dh, nq, dh) * K.block(seg.k_begin, h * dh, nk, dh).transpose();
            P *= scl;
            for (Eigen::Index r = 0; r < nq; ++r) {
                const S mx = P.row(r).maxCoeff();
                P.row(r) = (P.row(r).array() - mx).exp();
                P.row(r) /= P.row(r).sum();
            }
            out.block(seg.q_begin, h * dh, nq, dh).noalias() = P * V.block(seg.k_begin, h * dh, nk, dh);
            probs->push_back(std::move(P));
        }
    }

    const bool rg = g.requires_grad(q) || g.requires_grad(k) || g.requires_grad(v);
    const int qi = q.id, ki = k.id, vi = v.id;
    return g.emplace(std::move(out), rg, [qi, ki, vi, heads, dh, scl, segments, probs](Graph<S>& g, int self) {
        const Mat<S>& gy = g.node(self).grad;
        const Mat<S>& Q = g.node(qi).value;
        const Mat<S>& K = g.node(ki).value;
        const Mat<S>& V = g.node(vi).value;
        const bool gq = g.node(qi).requires_grad, gk = g.node(ki).requires_grad, gv = g.node(vi).requires_grad;
        Mat<S>* GQ = gq ? &g.grad_buffer(qi) : nullptr;
        Mat<S>* GK = gk ? &g.grad_buffer(ki) : nullptr;
        Mat<S>* GV = gv ? &g.grad_buffer(vi) : nullptr;
        std::size_t idx = 0;
        for (const auto& seg : *segments) {
            const Eigen::Index nq = seg.q_end - seg.q_begin, nk = seg.k_end - seg.k_begin;
            for (int h = 0; h < heads; ++h, ++idx) {
                const Mat<S>& P = (*probs)[idx];
                const auto dO = gy.block(seg.q_begin, h * dh, nq, dh);
                if (gv) GV->block(seg.k_begin, h * dh, nk, dh).noalias() += P.transpose() * dO;
                if (!gq && !gk) continue;
                Mat<S> dP(nq, nk);
                dP.noalias() = dO * V.block(seg.k_begin, h * dh, nk, dh).transpose();
                const auto rowdot = (dP.cwiseProduct(P)).rowwise().sum().eval();
                Mat<S> dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * scl;
                if (gq) GQ->block(seg.q_begin, h * dh, nq, dh).noalias() += dS * K.block(seg.k_begin, h * dh, nk, dh);
                if (gk) GK->block(seg.k_begin, h * dh, nk, dh).noalias() += dS.transpose() * Q.block(seg.q_begin, h * dh, nq, dh);
            }
        }
    });
}

template <typename S>
Var<S> mse(const Var<S>& pred, const Mat<S>& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw std::invalid_argument("mse: shape mismatch");
    Graph<S>& g = *pred.graph;
    auto diff = std::make_shared<Mat<S>>(pred.value() - target);
    Mat<S> out(1, 1);
    out(0, 0) = diff->squaredNorm() / static_cast<S>(diff->size());
    const int pi = pred.id;
    return g.emplace(std::move(out), g.requires_grad(pred), [pi, diff](Graph<S>& g, int self) {
        const S gy = g.node(self).grad(0, 0);
        g.grad_buffer(pi) += (*diff) * (S(2) * gy / static_cast<S>(diff->size()));
    });
}

#define ACE_INSTANTIATE_AG(S)                                                                                       \
    template class Graph<S>;                                                                                        \
    template Var<S> linear<S>(const Var<S>&, const Var<S>&, const Var<S>&);                                         \
    template Var<S> add<S>(const Var<S>&, const Var<S>&);                                                           \
    template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                                           \
    template Var<S> scale<S>(const Var<S>&, S);                                                                     \
    template Var<S> modulate<S>(const Var<S>&, const Var<S>&, const Var<S>&);                                       \
    template Var<S> gather_rows<S>(const Var<S>&, std::shared_ptr<const std::vector<int>>);                         \
    template Var<S> slice_cols<S>(const Var<S>&, Eigen::Index, Eigen::Index);                                       \
    template Var<S> layer_norm<S>(const Var<S>&, S);                                                                \
    template Var<S> silu<S>(const Var<S>&);                                                                         \
    template Var<S> gelu<S>(const Var<S>&);                                                                         \
    template Var<S> rotate_pairs<S>(const Var<S>&, std::shared_ptr<const Mat<S>>, int);                             \
    template Var<S> segment_attention<S>(const Var<S>&, const Var<S>&, const Var<S>&, int,                          \
                                         std::shared_ptr<const std::vector<Segment>>);                              \
    template Var<S> mse<S>(const Var<S>&, const Mat<S>&);

ACE_INSTANTIATE_AG(float)
ACE_INSTANTIATE_AG(double)

#undef ACE_INSTANTIATE_AG

}  // namespace ace::ag
