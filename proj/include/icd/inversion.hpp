#pragma once

// Non-learned inversion of a linear encoding model: recover the stimulus
// embedding I from responses beta = W I.

#include "icd/core.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <sstream>
#include <vector>

namespace icd {

struct InversionResult {
    Vector unit;  // L2-normalized solution
    Vector raw;   // solution before normalization
};

namespace detail {

inline Vector normalized_or_throw(const Vector& raw, const char* who) {
    const double n = raw.norm();
    if (!(n > 0.0) || !std::isfinite(n))
        throw ParameterError(std::string(who) + ": solution has zero or non-finite norm");
    return raw / n;
}

}  // namespace detail

/// argmin_I |W I - beta|^2 + ridge |I|^2. With ridge = 0 and K < d the
/// minimum-norm interpolant is returned.
inline InversionResult invert_least_squares(const Matrix& weights, const Vector& responses, double ridge) {
    require(weights.rows() >= 1, "invert_least_squares: need at least one voxel");
    require(responses.size() == weights.rows(), "invert_least_squares: response count must equal voxel count");
    require(ridge >= 0.0 && std::isfinite(ridge), "invert_least_squares: ridge must be finite and >= 0");
    const Index K = weights.rows();
    const Index d = weights.cols();

    InversionResult out;
    if (ridge == 0.0 && K < d) {
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(weights);
        out.raw = cod.solve(responses);
    } else {
        Matrix gram = weights.transpose() * weights;
        if (ridge == 0.0) {
            Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
            const double lo = eig.eigenvalues().minCoeff();
            const double hi = eig.eigenvalues().maxCoeff();
            if (!(lo > 0.0) || hi / lo > kConditionLimit) {
                std::ostringstream msg;
                msg << "invert_least_squares: W^T W condition number exceeds " << kConditionLimit;
                throw SingularityError(msg.str());
            }
        }
        gram.diagonal().array() += ridge;
        out.raw = gram.llt().solve(weights.transpose() * responses);
    }
    out.unit = detail::normalized_or_throw(out.raw, "invert_least_squares");
    return out;
}

inline double inversion_objective(const Matrix& weights, const Vector& responses, const Vector& x) {
    return (weights * x - responses).squaredNorm();
}

/// Largest eigenvalue of W^T W by power iteration from a seeded start.
inline double lambda_max(const Matrix& weights, int iterations = 50, std::uint64_t seed = 0) {
    const Index d = weights.cols();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(d);
    for (Index i = 0; i < d; ++i) v(i) = normal(rng);
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < iterations; ++it) {
        Vector w = weights.transpose() * (weights * v);
        lambda = v.dot(w);
        const double n = w.norm();
        if (n == 0.0) return 0.0;
        v = w / n;
    }
    return lambda;
}

/// Step size 0.9 / lambda_max, inside the monotone-descent region.
inline double stable_step_size(const Matrix& weights) {
    const double lm = lambda_max(weights);
    require(lm > 0.0, "stable_step_size: W^T W is zero");
    return 0.9 / lm;
}

struct GradientInversionResult {
    InversionResult solution;
    std::vector<double> trace;  // objective before the first step and after each step
};

/// Gradient descent I <- I - step * 2 W^T (W I - beta).
inline GradientInversionResult invert_gradient(const Matrix& weights, const Vector& responses, const Vector& init,
                                               std::size_t steps, double step_size) {
    require(step_size > 0.0, "invert_gradient: step_size must be > 0");
    require(responses.size() == weights.rows(), "invert_gradient: response count must equal voxel count");
    require(init.size() == weights.cols(), "invert_gradient: init dimension must equal embedding dimension");

    GradientInversionResult out;
    out.trace.reserve(steps + 1);
    Vector x = init;
    out.trace.push_back(inversion_objective(weights, responses, x));
    for (std::size_t s = 1; s <= steps; ++s) {
        const Vector residual = weights * x - responses;
        x -= step_size * 2.0 * (weights.transpose() * residual);
        const double obj = inversion_objective(weights, responses, x);
        if (!std::isfinite(obj) || !x.allFinite()) {
            std::ostringstream msg;
            msg << "invert_gradient: objective diverged at step " << s << " (step size " << step_size << ")";
            throw DivergenceError(msg.str(), s);
        }
        out.trace.push_back(obj);
    }
    out.solution.raw = x;
    out.solution.unit = detail::normalized_or_throw(x, "invert_gradient");
    return out;
}

}  // namespace icd
