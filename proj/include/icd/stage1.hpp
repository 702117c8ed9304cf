#pragma once

// Per-voxel encoder-weight estimation from an image context. The estimator is
// closed-form ridge regression; any learned estimator with the same
// (stimuli, responses) -> weights signature can replace it.

#include "icd/core.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <functional>
#include <optional>
#include <sstream>
#include <vector>

namespace icd {

/// Stimuli (n x d) paired with the responses of K voxels to them (K x n).
struct ImageContext {
    Matrix stimuli;
    Matrix responses;

    Index size() const { return stimuli.rows(); }
    Index dim() const { return stimuli.cols(); }
    Index voxels() const { return responses.rows(); }
};

/// Default ridge strength for a context of n stimuli.
inline double default_ridge(Index n) { return 1e-3 * static_cast<double>(n); }

/// Cholesky factor of Phi^T Phi + ridge * I, shared by every voxel of a context.
class RidgeSystem {
public:
    RidgeSystem(const Matrix& stimuli, double ridge) : stimuli_(stimuli) {
        require(stimuli.rows() >= 1, "ridge: context must contain at least one stimulus");
        require(ridge >= 0.0 && std::isfinite(ridge), "ridge: strength must be finite and >= 0");
        require(stimuli.allFinite(), "ridge: stimuli must be finite");
        Matrix gram = stimuli.transpose() * stimuli;
        if (ridge == 0.0) {
            Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
            const double lo = eig.eigenvalues().minCoeff();
            const double hi = eig.eigenvalues().maxCoeff();
            if (!(lo > 0.0) || hi / lo > kConditionLimit) {
                std::ostringstream msg;
                msg << "ridge: unregularized design is rank-deficient (condition number of Phi^T Phi "
                    << (lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity())
                    << " exceeds threshold " << kConditionLimit << ")";
                throw SingularityError(msg.str());
            }
        }
        gram.diagonal().array() += ridge;
        llt_.compute(gram);
        if (llt_.info() != Eigen::Success)
            throw SingularityError("ridge: normal-equation matrix is not positive definite (threshold 1e10)");
    }

    Vector solve(const Eigen::Ref<const Vector>& responses) const {
        require(responses.size() == stimuli_.rows(), "ridge: response count does not match context size");
        const Vector rhs = stimuli_.transpose() * responses;
        return llt_.solve(rhs);
    }

private:
    Matrix stimuli_;
    Eigen::LLT<Matrix> llt_;
};

/// Minimizer of sum_t (w . phi_t - beta_t)^2 + ridge * |w|^2.
inline Vector estimate_voxel_weights(const Matrix& stimuli, const Vector& responses, double ridge) {
    return RidgeSystem(stimuli, ridge).solve(responses);
}

/// Row q is estimate_voxel_weights(ctx.stimuli, ctx.responses.row(q), ridge).
inline Matrix estimate_all_voxels(const ImageContext& ctx, double ridge) {
    require(ctx.responses.cols() == ctx.stimuli.rows(),
            "estimate_all_voxels: responses must have one column per context stimulus");
    const RidgeSystem system(ctx.stimuli, ridge);
    Matrix out(ctx.voxels(), ctx.dim());
    for (Index q = 0; q < ctx.voxels(); ++q) {
        const Vector beta = ctx.responses.row(q).transpose();
        out.row(q) = system.solve(beta).transpose();
    }
    return out;
}

/// Ascending indices with snr >= threshold. Zero-noise voxels (sentinel SNR)
/// survive any finite threshold.
inline std::vector<Index> select_voxels(const Vector& snr, double threshold) {
    std::vector<Index> out;
    for (Index k = 0; k < snr.size(); ++k)
        if (snr(k) >= threshold) out.push_back(k);
    return out;
}

/// Pluggable stage-1 estimator: (context stimuli, K x n responses) -> K x d weights.
using WeightEstimator = std::function<Matrix(const ImageContext&)>;

inline WeightEstimator ridge_estimator(std::optional<double> ridge = std::nullopt) {
    return [ridge](const ImageContext& ctx) {
        return estimate_all_voxels(ctx, ridge.value_or(default_ridge(ctx.size())));
    };
}

}  // namespace icd
