#pragma once

// Permutation-invariant set decoder: maps a variable-size set of voxel tokens
// [w_k, beta_k] to a unit-norm stimulus embedding.
//
// Pipeline per forward pass:
//   tokens -> linear embed -> residual MLP (LayerNorm, Linear, LeakyReLU,
//   dropout, Linear, skip) -> append R registers -> `layers` pre-norm blocks
//   (LayerNorm, multi-head attention with logits scaled by ln(max(l, 2)),
//   dropout residual, LayerNorm, SwiGLU residual) -> keep registers ->
//   LayerNorm -> concat -> MLP head -> L2 normalize.
//
// There is no positional table anywhere; attention is the only place tokens
// interact, so the map is invariant to token order.

#include "icd/core.hpp"

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

namespace icd {

struct DecoderConfig {
    Index d = 32;
    Index width = 64;
    Index layers = 4;
    Index heads = 4;
    Index registers = 4;
    Index ffn_hidden = 128;
    double dropout = 0.1;

    Index head_dim() const { return width / heads; }

    void validate() const {
        require(d >= 1, "decoder: d must be >= 1");
        require(width >= 1, "decoder: width must be >= 1");
        require(heads >= 1 && width % heads == 0, "decoder: width must be divisible by heads");
        require(layers >= 1, "decoder: layers must be >= 1");
        require(registers >= 1, "decoder: registers must be >= 1");
        require(ffn_hidden >= 1, "decoder: ffn_hidden must be >= 1");
        require(dropout >= 0.0 && dropout < 1.0, "decoder: dropout must lie in [0, 1)");
    }

    friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

/// Attention logit multiplier for a sequence of length l.
inline double logit_scale(Index l) { return std::log(static_cast<double>(std::max<Index>(l, 2))); }

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// All trainable tensors. Biases and norm parameters are stored as 1 x n
/// matrices so every tensor has the same type.
template <typename Scalar>
struct DecoderParams {
    using Mat = MatrixT<Scalar>;

    struct Block {
        Mat norm1_g, norm1_b;
        Mat wq, wk, wv, wo, bo;
        Mat norm2_g, norm2_b;
        Mat w_gate, b_gate, w_up, b_up, w_down, b_down;

        friend bool operator==(const Block&, const Block&) = default;
    };

    DecoderConfig config;
    Mat embed_w, embed_b;
    Mat proj_norm_g, proj_norm_b;
    Mat proj_w1, proj_b1, proj_w2, proj_b2;
    Mat registers;
    std::vector<Block> blocks;
    Mat out_norm_g, out_norm_b;
    Mat head_w1, head_b1, head_w2, head_b2;

    /// Visits every tensor in a fixed order: f(name, tensor, decays).
    /// `decays` marks matrices that receive decoupled weight decay.
    template <typename F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <typename F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](std::string_view, const Mat& m, bool) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

    friend bool operator==(const DecoderParams&, const DecoderParams&) = default;

private:
    template <typename Self, typename F>
    static void visit_impl(Self& p, F& f) {
        f("embed_w", p.embed_w, true);
        f("embed_b", p.embed_b, false);
        f("proj_norm_g", p.proj_norm_g, false);
        f("proj_norm_b", p.proj_norm_b, false);
        f("proj_w1", p.proj_w1, true);
        f("proj_b1", p.proj_b1, false);
        f("proj_w2", p.proj_w2, true);
        f("proj_b2", p.proj_b2, false);
        f("registers", p.registers, false);
        for (std::size_t i = 0; i < p.blocks.size(); ++i) {
            auto& b = p.blocks[i];
            const std::string pre = "block" + std::to_string(i) + ".";
            f(pre + "norm1_g", b.norm1_g, false);
            f(pre + "norm1_b", b.norm1_b, false);
            f(pre + "wq", b.wq, true);
            f(pre + "wk", b.wk, true);
            f(pre + "wv", b.wv, true);
            f(pre + "wo", b.wo, true);
            f(pre + "bo", b.bo, false);
            f(pre + "norm2_g", b.norm2_g, false);
            f(pre + "norm2_b", b.norm2_b, false);
            f(pre + "w_gate", b.w_gate, true);
            f(pre + "b_gate", b.b_gate, false);
            f(pre + "w_up", b.w_up, true);
            f(pre + "b_up", b.b_up, false);
            f(pre + "w_down", b.w_down, true);
            f(pre + "b_down", b.b_down, false);
        }
        f("out_norm_g", p.out_norm_g, false);
        f("out_norm_b", p.out_norm_b, false);
        f("head_w1", p.head_w1, true);
        f("head_b1", p.head_b1, false);
        f("head_w2", p.head_w2, true);
        f("head_b2", p.head_b2, false);
    }
};

using Decoder = DecoderParams<double>;

/// Collects pointers to every tensor, in visit order.
template <typename Scalar>
std::vector<MatrixT<Scalar>*> tensor_list(DecoderParams<Scalar>& p) {
    std::vector<MatrixT<Scalar>*> out;
    p.visit([&](std::string_view, MatrixT<Scalar>& m, bool) { out.push_back(&m); });
    return out;
}

/// Same shapes as `p`, all entries zero.
template <typename Scalar>
DecoderParams<Scalar> zeros_like(const DecoderParams<Scalar>& p) {
    DecoderParams<Scalar> z = p;
    z.visit([](std::string_view, MatrixT<Scalar>& m, bool) { m.setZero(); });
    return z;
}

template <typename To, typename From>
DecoderParams<To> cast_params(const DecoderParams<From>& p) {
    DecoderParams<To> out;
    out.config = p.config;
    out.blocks.resize(p.blocks.size());
    std::vector<const MatrixT<From>*> src;
    p.visit([&](std::string_view, const MatrixT<From>& m, bool) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](std::string_view, MatrixT<To>& m, bool) { m = src[i++]->template cast<To>(); });
    return out;
}

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains and
/// standard-normal registers, all drawn from `seed`.
template <typename Scalar = double>
DecoderParams<Scalar> init_params(std::uint64_t seed, const DecoderConfig& cfg) {
    cfg.validate();
    using Mat = MatrixT<Scalar>;
    Rng rng(seed);
    auto uniform = [&](Index fan_in, Index fan_out) {
        const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-a, a);
        Mat m(fan_in, fan_out);
        for (Index j = 0; j < fan_out; ++j)
            for (Index i = 0; i < fan_in; ++i) m(i, j) = static_cast<Scalar>(u(rng));
        return m;
    };
    auto zeros = [](Index n) { return Mat::Zero(1, n); };
    auto ones = [](Index n) { return Mat::Ones(1, n); };

    const Index w = cfg.width;
    DecoderParams<Scalar> p;
    p.config = cfg;
    p.embed_w = uniform(cfg.d + 1, w);
    p.embed_b = zeros(w);
    p.proj_norm_g = ones(w);
    p.proj_norm_b = zeros(w);
    p.proj_w1 = uniform(w, w);
    p.proj_b1 = zeros(w);
    p.proj_w2 = uniform(w, w);
    p.proj_b2 = zeros(w);
    {
        std::normal_distribution<double> normal(0.0, 1.0);
        p.registers.resize(cfg.registers, w);
        for (Index j = 0; j < w; ++j)
            for (Index i = 0; i < cfg.registers; ++i) p.registers(i, j) = static_cast<Scalar>(normal(rng));
    }
    p.blocks.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& b : p.blocks) {
        b.norm1_g = ones(w);
        b.norm1_b = zeros(w);
        b.wq = uniform(w, w);
        b.wk = uniform(w, w);
        b.wv = uniform(w, w);
        b.wo = uniform(w, w);
        b.bo = zeros(w);
        b.norm2_g = ones(w);
        b.norm2_b = zeros(w);
        b.w_gate = uniform(w, cfg.ffn_hidden);
        b.b_gate = zeros(cfg.ffn_hidden);
        b.w_up = uniform(w, cfg.ffn_hidden);
        b.b_up = zeros(cfg.ffn_hidden);
        b.w_down = uniform(cfg.ffn_hidden, w);
        b.b_down = zeros(w);
    }
    p.out_norm_g = ones(w);
    p.out_norm_b = zeros(w);
    p.head_w1 = uniform(cfg.registers * w, w);
    p.head_b1 = zeros(w);
    p.head_w2 = uniform(w, cfg.d);
    p.head_b2 = zeros(cfg.d);
    return p;
}

/// Token k = [weights.row(k), responses(k)].
inline Matrix build_tokens(const Matrix& weights, const Vector& responses) {
    require(weights.rows() == responses.size(), "build_tokens: weights and responses disagree on voxel count");
    require(weights.allFinite() && responses.allFinite(), "build_tokens: entries must be finite");
    Matrix tokens(weights.rows(), weights.cols() + 1);
    tokens.leftCols(weights.cols()) = weights;
    tokens.col(weights.cols()) = responses;
    return tokens;
}

/// Single-head attention with an explicit logit multiplier:
/// softmax(multiplier * q k^T / sqrt(d_h)) v.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> scaled_attention_with_multiplier(
    const Eigen::MatrixBase<Derived>& q, const Eigen::MatrixBase<Derived>& k, const Eigen::MatrixBase<Derived>& v,
    double multiplier) {
    using Scalar = typename Derived::Scalar;
    require(q.cols() == k.cols() && q.cols() > 0, "scaled_attention: query/key dimension mismatch");
    require(k.rows() == v.rows(), "scaled_attention: key/value count mismatch");
    const Scalar c = static_cast<Scalar>(multiplier / std::sqrt(static_cast<double>(q.cols())));
    MatrixT<Scalar> s = c * (q * k.transpose());
    for (Index i = 0; i < s.rows(); ++i) {
        const Scalar m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
    }
    return s * v;
}

/// Attention for a context of length l: the multiplier is ln(max(l, 2)).
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> scaled_attention(
    const Eigen::MatrixBase<Derived>& q, const Eigen::MatrixBase<Derived>& k, const Eigen::MatrixBase<Derived>& v,
    Index context_len) {
    require(context_len >= 1, "scaled_attention: context length must be >= 1");
    return scaled_attention_with_multiplier(q, k, v, logit_scale(context_len));
}

namespace detail {

template <typename Scalar>
struct NormCache {
    MatrixT<Scalar> xhat;
    VectorT<Scalar> rstd;
};

template <typename Scalar>
void layer_norm_forward(const MatrixT<Scalar>& x, const MatrixT<Scalar>& g, const MatrixT<Scalar>& b,
                        MatrixT<Scalar>& y, NormCache<Scalar>& c) {
    const Index rows = x.rows();
    const Index cols = x.cols();
    c.xhat.resize(rows, cols);
    c.rstd.resize(rows);
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(cols);
    for (Index i = 0; i < rows; ++i) {
        const Scalar mu = x.row(i).sum() * inv_n;
        const auto diff = (x.row(i).array() - mu).eval();
        const Scalar var = diff.square().sum() * inv_n;
        const Scalar r = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kNormEps));
        c.xhat.row(i) = diff * r;
        c.rstd(i) = r;
    }
    y = (c.xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

template <typename Scalar>
void layer_norm_backward(const MatrixT<Scalar>& dy, const MatrixT<Scalar>& g, const NormCache<Scalar>& c,
                         MatrixT<Scalar>& dx, MatrixT<Scalar>& dg, MatrixT<Scalar>& db) {
    db.row(0) += dy.colwise().sum();
    dg.row(0) += (dy.array() * c.xhat.array()).matrix().colwise().sum();
    const MatrixT<Scalar> dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
    dx.resize(dy.rows(), dy.cols());
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(dy.cols());
    for (Index i = 0; i < dy.rows(); ++i) {
        const Scalar m1 = dxhat.row(i).sum() * inv_n;
        const Scalar m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).sum() * inv_n;
        dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
    }
}

template <typename Scalar>
MatrixT<Scalar> affine(const MatrixT<Scalar>& x, const MatrixT<Scalar>& w, const MatrixT<Scalar>& b) {
    MatrixT<Scalar> y(x.rows(), w.cols());
    y.noalias() = x * w;
    y.rowwise() += b.row(0);
    return y;
}

template <typename Scalar>
MatrixT<Scalar> leaky(const MatrixT<Scalar>& x) {
    const Scalar s = static_cast<Scalar>(kLeakySlope);
    return x.unaryExpr([s](Scalar v) { return v > Scalar(0) ? v : s * v; });
}

template <typename Scalar>
MatrixT<Scalar> leaky_grad(const MatrixT<Scalar>& pre, const MatrixT<Scalar>& dy) {
    const Scalar s = static_cast<Scalar>(kLeakySlope);
    return dy.binaryExpr(pre, [s](Scalar g, Scalar v) { return v > Scalar(0) ? g : s * g; });
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
MatrixT<Scalar> dropout_mask(Rng& rng, Index rows, Index cols, double rate) {
    std::bernoulli_distribution keep(1.0 - rate);
    const Scalar scale = static_cast<Scalar>(1.0 / (1.0 - rate));
    MatrixT<Scalar> m(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = keep(rng) ? scale : Scalar(0);
    return m;
}

}  // namespace detail

/// Intermediates of one forward pass, kept for the backward pass and for
/// attention extraction.
template <typename Scalar>
struct ForwardCache {
    using Mat = MatrixT<Scalar>;

    struct BlockCache {
        detail::NormCache<Scalar> norm1;
        Mat n1, q, k, v;
        std::vector<Mat> probs;  // one l x l matrix per head
        Mat mixed;               // concatenated head outputs
        Mat attn_mask;           // empty when dropout is off
        Mat mid;                 // residual stream after attention
        detail::NormCache<Scalar> norm2;
        Mat n2, gate, up, act;
    };

    Index voxels = 0;
    Index length = 0;
    Scalar scale = 0;
    Mat tokens;
    Mat h0;
    detail::NormCache<Scalar> proj_norm;
    Mat proj_n, proj_pre, proj_mask, proj_act;
    std::vector<Mat> stream;  // residual stream entering each block, plus the final one
    std::vector<BlockCache> blocks;
    detail::NormCache<Scalar> out_norm;
    Mat flat, head_pre, head_act, raw;
    Scalar raw_norm = 0;
    VectorT<Scalar> pred;
};

/// Runs the decoder and fills `cache`. Dropout is active only when
/// `train_mode` is set and the configured rate is positive; its masks come
/// from `seed`.
template <typename Scalar>
const VectorT<Scalar>& forward(const DecoderParams<Scalar>& p, const Matrix& tokens, bool train_mode,
                               std::uint64_t seed, ForwardCache<Scalar>& c) {
    using Mat = MatrixT<Scalar>;
    const DecoderConfig& cfg = p.config;
    require(tokens.rows() >= 1, "decode: token set is empty");
    require(tokens.cols() == cfg.d + 1, "decode: token dimension " + std::to_string(tokens.cols()) +
                                            " does not match d + 1 = " + std::to_string(cfg.d + 1));
    const bool drop = train_mode && cfg.dropout > 0.0;
    Rng rng(seed);

    const Index K = tokens.rows();
    const Index R = cfg.registers;
    const Index L = K + R;
    const Index w = cfg.width;
    const Index dh = cfg.head_dim();
    c.voxels = K;
    c.length = L;
    c.scale = static_cast<Scalar>(logit_scale(L) / std::sqrt(static_cast<double>(dh)));

    c.tokens = tokens.cast<Scalar>();
    c.h0 = detail::affine(c.tokens, p.embed_w, p.embed_b);
    detail::layer_norm_forward(c.h0, p.proj_norm_g, p.proj_norm_b, c.proj_n, c.proj_norm);
    c.proj_pre = detail::affine(c.proj_n, p.proj_w1, p.proj_b1);
    c.proj_act = detail::leaky(c.proj_pre);
    if (drop) {
        c.proj_mask = detail::dropout_mask<Scalar>(rng, K, w, cfg.dropout);
        c.proj_act.array() *= c.proj_mask.array();
    } else {
        c.proj_mask.resize(0, 0);
    }

    c.stream.assign(p.blocks.size() + 1, Mat());
    Mat& z0 = c.stream[0];
    z0.resize(L, w);
    z0.topRows(K) = c.h0 + detail::affine(c.proj_act, p.proj_w2, p.proj_b2);
    z0.bottomRows(R) = p.registers;

    c.blocks.resize(p.blocks.size());
    for (std::size_t li = 0; li < p.blocks.size(); ++li) {
        const auto& b = p.blocks[li];
        auto& bc = c.blocks[li];
        const Mat& z = c.stream[li];

        detail::layer_norm_forward(z, b.norm1_g, b.norm1_b, bc.n1, bc.norm1);
        bc.q.noalias() = bc.n1 * b.wq;
        bc.k.noalias() = bc.n1 * b.wk;
        bc.v.noalias() = bc.n1 * b.wv;
        bc.probs.resize(static_cast<std::size_t>(cfg.heads));
        bc.mixed.resize(L, w);
        for (Index h = 0; h < cfg.heads; ++h) {
            Mat& P = bc.probs[static_cast<std::size_t>(h)];
            P.noalias() = bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose();
            P *= c.scale;
            for (Index i = 0; i < L; ++i) {
                const Scalar m = P.row(i).maxCoeff();
                P.row(i) = (P.row(i).array() - m).exp();
                P.row(i) /= P.row(i).sum();
            }
            bc.mixed.middleCols(h * dh, dh).noalias() = P * bc.v.middleCols(h * dh, dh);
        }
        Mat attn = detail::affine(bc.mixed, b.wo, b.bo);
        if (drop) {
            bc.attn_mask = detail::dropout_mask<Scalar>(rng, L, w, cfg.dropout);
            attn.array() *= bc.attn_mask.array();
        } else {
            bc.attn_mask.resize(0, 0);
        }
        bc.mid = z + attn;

        detail::layer_norm_forward(bc.mid, b.norm2_g, b.norm2_b, bc.n2, bc.norm2);
        bc.gate = detail::affine(bc.n2, b.w_gate, b.b_gate);
        bc.up = detail::affine(bc.n2, b.w_up, b.b_up);
        bc.act = bc.gate.binaryExpr(bc.up, [](Scalar g, Scalar u) { return g * detail::sigmoid(g) * u; });
        c.stream[li + 1] = bc.mid + detail::affine(bc.act, b.w_down, b.b_down);
    }

    Mat regs_n;
    const Mat regs = c.stream.back().bottomRows(R);
    detail::layer_norm_forward(regs, p.out_norm_g, p.out_norm_b, regs_n, c.out_norm);
    c.flat.resize(1, R * w);
    for (Index r = 0; r < R; ++r) c.flat.block(0, r * w, 1, w) = regs_n.row(r);
    c.head_pre = detail::affine(c.flat, p.head_w1, p.head_b1);
    c.head_act = detail::leaky(c.head_pre);
    c.raw = detail::affine(c.head_act, p.head_w2, p.head_b2);
    c.raw_norm = c.raw.norm();
    const Scalar denom = c.raw_norm > Scalar(0) ? c.raw_norm : Scalar(1);
    c.pred = c.raw.row(0).transpose() / denom;
    return c.pred;
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(prediction).
template <typename Scalar>
void backward(const DecoderParams<Scalar>& p, const ForwardCache<Scalar>& c, const VectorT<Scalar>& dpred,
              DecoderParams<Scalar>& grad) {
    using Mat = MatrixT<Scalar>;
    const DecoderConfig& cfg = p.config;
    const Index K = c.voxels;
    const Index R = cfg.registers;
    const Index L = c.length;
    const Index w = cfg.width;
    const Index dh = cfg.head_dim();

    // Through the final normalization.
    const Scalar denom = c.raw_norm > Scalar(0) ? c.raw_norm : Scalar(1);
    Mat draw = ((dpred - c.pred * c.pred.dot(dpred)) / denom).transpose();

    grad.head_w2.noalias() += c.head_act.transpose() * draw;
    grad.head_b2 += draw;
    const Mat dhead = detail::leaky_grad<Scalar>(c.head_pre, draw * p.head_w2.transpose());
    grad.head_w1.noalias() += c.flat.transpose() * dhead;
    grad.head_b1 += dhead;
    const Mat dflat = dhead * p.head_w1.transpose();
    Mat dregs_n(R, w);
    for (Index r = 0; r < R; ++r) dregs_n.row(r) = dflat.block(0, r * w, 1, w);
    Mat dregs;
    detail::layer_norm_backward(dregs_n, p.out_norm_g, c.out_norm, dregs, grad.out_norm_g, grad.out_norm_b);

    Mat dz = Mat::Zero(L, w);
    dz.bottomRows(R) = dregs;

    Mat tmp, dn;
    for (std::size_t li = p.blocks.size(); li-- > 0;) {
        const auto& b = p.blocks[li];
        const auto& bc = c.blocks[li];
        auto& gb = grad.blocks[li];

        // SwiGLU residual.
        gb.w_down.noalias() += bc.act.transpose() * dz;
        gb.b_down.row(0) += dz.colwise().sum();
        const Mat dact = dz * b.w_down.transpose();
        Mat dgate(L, cfg.ffn_hidden), dup(L, cfg.ffn_hidden);
        for (Index j = 0; j < cfg.ffn_hidden; ++j) {
            for (Index i = 0; i < L; ++i) {
                const Scalar g = bc.gate(i, j);
                const Scalar s = detail::sigmoid(g);
                const Scalar silu = g * s;
                dup(i, j) = dact(i, j) * silu;
                dgate(i, j) = dact(i, j) * bc.up(i, j) * s * (Scalar(1) + g * (Scalar(1) - s));
            }
        }
        gb.w_gate.noalias() += bc.n2.transpose() * dgate;
        gb.b_gate.row(0) += dgate.colwise().sum();
        gb.w_up.noalias() += bc.n2.transpose() * dup;
        gb.b_up.row(0) += dup.colwise().sum();
        dn.noalias() = dgate * b.w_gate.transpose();
        dn.noalias() += dup * b.w_up.transpose();
        detail::layer_norm_backward(dn, b.norm2_g, bc.norm2, tmp, gb.norm2_g, gb.norm2_b);
        dz += tmp;

        // Attention residual.
        Mat dattn = dz;
        if (bc.attn_mask.size() > 0) dattn.array() *= bc.attn_mask.array();
        gb.wo.noalias() += bc.mixed.transpose() * dattn;
        gb.bo.row(0) += dattn.colwise().sum();
        const Mat dmixed = dattn * b.wo.transpose();
        Mat dq(L, w), dk(L, w), dv(L, w);
        for (Index h = 0; h < cfg.heads; ++h) {
            const Mat& P = bc.probs[static_cast<std::size_t>(h)];
            const auto dout = dmixed.middleCols(h * dh, dh);
            dv.middleCols(h * dh, dh).noalias() = P.transpose() * dout;
            Mat dP = dout * bc.v.middleCols(h * dh, dh).transpose();
            const VectorT<Scalar> rowdot = (dP.array() * P.array()).rowwise().sum();
            dP = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * c.scale;
            dq.middleCols(h * dh, dh).noalias() = dP * bc.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh).noalias() = dP.transpose() * bc.q.middleCols(h * dh, dh);
        }
        gb.wq.noalias() += bc.n1.transpose() * dq;
        gb.wk.noalias() += bc.n1.transpose() * dk;
        gb.wv.noalias() += bc.n1.transpose() * dv;
        dn.noalias() = dq * b.wq.transpose();
        dn.noalias() += dk * b.wk.transpose();
        dn.noalias() += dv * b.wv.transpose();
        detail::layer_norm_backward(dn, b.norm1_g, bc.norm1, tmp, gb.norm1_g, gb.norm1_b);
        dz += tmp;
    }

    grad.registers += dz.bottomRows(R);

    // Token projection.
    const Mat dh_tok = dz.topRows(K);
    grad.proj_w2.noalias() += c.proj_act.transpose() * dh_tok;
    grad.proj_b2.row(0) += dh_tok.colwise().sum();
    Mat dact = dh_tok * p.proj_w2.transpose();
    if (c.proj_mask.size() > 0) dact.array() *= c.proj_mask.array();
    const Mat dpre = detail::leaky_grad<Scalar>(c.proj_pre, dact);
    grad.proj_w1.noalias() += c.proj_n.transpose() * dpre;
    grad.proj_b1.row(0) += dpre.colwise().sum();
    dn.noalias() = dpre * p.proj_w1.transpose();
    detail::layer_norm_backward(dn, p.proj_norm_g, c.proj_norm, tmp, grad.proj_norm_g, grad.proj_norm_b);
    const Mat dh0 = dh_tok + tmp;
    grad.embed_w.noalias() += c.tokens.transpose() * dh0;
    grad.embed_b.row(0) += dh0.colwise().sum();
}

/// Predicted unit-norm embedding for a set of voxel tokens (K x (d + 1)).
template <typename Scalar>
Vector decode(const Matrix& tokens, const DecoderParams<Scalar>& params, bool train_mode = false,
              std::uint64_t seed = 0) {
    ForwardCache<Scalar> cache;
    return forward(params, tokens, train_mode, seed, cache).template cast<double>();
}

/// Last-layer attention mass each voxel token receives from the register
/// queries, averaged over heads and registers and renormalized over voxels.
template <typename Scalar>
Vector attention_map(const Matrix& tokens, const DecoderParams<Scalar>& params) {
    ForwardCache<Scalar> c;
    forward(params, tokens, false, 0, c);
    const auto& last = c.blocks.back();
    const Index K = c.voxels;
    const Index R = params.config.registers;
    Vector mass = Vector::Zero(K);
    for (const auto& P : last.probs)
        mass += P.bottomRows(R).leftCols(K).colwise().sum().transpose().template cast<double>();
    const double total = mass.sum();
    if (total > 0.0) mass /= total;
    return mass;
}

}  // namespace icd
