#pragma once

// Hybrid cosine + InfoNCE objective over a batch of unit-norm predictions.

#include "icd/core.hpp"

namespace icd {

struct LossConfig {
    double alpha = 1.0;  // InfoNCE weight
    double tau = 0.1;    // InfoNCE temperature

    void validate() const {
        require(tau > 0.0 && std::isfinite(tau), "loss: tau must be > 0");
        require(alpha >= 0.0 && std::isfinite(alpha), "loss: alpha must be finite and >= 0");
    }

    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

namespace detail {

inline void require_unit_rows(const Matrix& m, const char* who) {
    for (Index i = 0; i < m.rows(); ++i)
        if (std::abs(m.row(i).norm() - 1.0) > 1e-6)
            throw ParameterError(std::string(who) + ": rows must be unit norm (row " + std::to_string(i) + ")");
}

}  // namespace detail

/// 1 - pred . target, in [0, 2].
inline double cosine_loss(const Vector& pred, const Vector& target) {
    require(pred.size() == target.size(), "cosine_loss: dimension mismatch");
    if (std::abs(pred.norm() - 1.0) > 1e-6 || std::abs(target.norm() - 1.0) > 1e-6)
        throw ParameterError("cosine_loss: inputs must be unit norm");
    return 1.0 - pred.dot(target);
}

struct LossValue {
    double total = 0.0;
    double cosine = 0.0;   // mean cosine loss
    double infonce = 0.0;  // InfoNCE term before weighting
    Matrix grad;           // d total / d preds, N x d
};

/// Value and gradient w.r.t. the predictions of
/// mean_i (1 - p_i . t_i) + alpha * mean_i -log softmax_j(p_i . t_j / tau)_i.
inline LossValue total_loss_with_grad(const Matrix& preds, const Matrix& targets, const LossConfig& cfg) {
    cfg.validate();
    require(preds.rows() >= 1, "total_loss: batch is empty");
    require(preds.rows() == targets.rows() && preds.cols() == targets.cols(), "total_loss: shape mismatch");
    detail::require_unit_rows(preds, "total_loss");
    detail::require_unit_rows(targets, "total_loss");

    const Index N = preds.rows();
    const double inv_n = 1.0 / static_cast<double>(N);
    LossValue out;
    out.grad = -inv_n * targets;
    for (Index i = 0; i < N; ++i) out.cosine += 1.0 - preds.row(i).dot(targets.row(i));
    out.cosine *= inv_n;

    const Matrix logits = (preds * targets.transpose()) / cfg.tau;
    for (Index i = 0; i < N; ++i) {
        const double m = logits.row(i).maxCoeff();
        const RowVector e = (logits.row(i).array() - m).exp();
        const double z = e.sum();
        out.infonce += m + std::log(z) - logits(i, i);
        RowVector dlogit = e / z;
        dlogit(i) -= 1.0;
        out.grad.row(i) += (cfg.alpha * inv_n / cfg.tau) * (dlogit * targets);
    }
    out.infonce *= inv_n;
    out.total = out.cosine + cfg.alpha * out.infonce;
    return out;
}

/// Mean over rows of -log(exp(p_i . t_i / tau) / sum_j exp(p_i . t_j / tau)).
inline double infonce_loss(const Matrix& preds, const Matrix& targets, double tau) {
    require(tau > 0.0, "infonce_loss: tau must be > 0");
    return total_loss_with_grad(preds, targets, LossConfig{1.0, tau}).infonce;
}

inline double total_loss(const Matrix& preds, const Matrix& targets, const LossConfig& cfg) {
    return total_loss_with_grad(preds, targets, cfg).total;
}

}  // namespace icd
