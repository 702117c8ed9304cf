#pragma once

// Synthetic subjects, stimulus embeddings and noisy linear voxel responses.

#include "icd/core.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace icd {

/// Ground-truth encoder for one synthetic subject. Row k of `weights` is the
/// linear readout of voxel k.
struct SubjectModel {
    Matrix weights;                 // K x d
    Vector noise_std;               // K
    std::vector<int> roi_labels;    // K, values in [0, roi_count)
    int roi_count = 1;
    std::uint64_t seed = 0;

    Index voxels() const { return weights.rows(); }
    Index dim() const { return weights.cols(); }

    friend bool operator==(const SubjectModel&, const SubjectModel&) = default;
};

/// Voxel responses, one row per voxel and one column per stimulus.
struct ResponseMatrix {
    Matrix values;  // K x n
    bool is_zscored = false;

    friend bool operator==(const ResponseMatrix&, const ResponseMatrix&) = default;
};

struct SubjectSpec {
    Index voxels = 200;
    Index dim = 16;
    int roi_count = 8;
    double roi_tightness = 0.3;
    double noise_lo = 0.0;
    double noise_hi = 0.0;
};

namespace detail {

inline Vector random_unit(Rng& rng, Index d) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(d);
    double norm = 0.0;
    // A zero draw has probability zero, but resample rather than divide by it.
    while (norm == 0.0) {
        for (Index i = 0; i < d; ++i) v(i) = normal(rng);
        norm = v.norm();
    }
    return v / norm;
}

}  // namespace detail

/// Draws a clustered synthetic subject. Each voxel row is
/// gain * normalize(t * centroid + (1 - t) * u) with u an independent random
/// direction, t = roi_tightness and gain ~ U[0.5, 2].
inline SubjectModel sample_subject(std::uint64_t seed, const SubjectSpec& spec) {
    require(spec.dim >= 1, "sample_subject: d must be >= 1");
    require(spec.roi_count >= 1, "sample_subject: roi_count must be >= 1");
    require(spec.voxels >= spec.roi_count, "sample_subject: K must be >= roi_count");
    require(spec.roi_tightness >= 0.0 && spec.roi_tightness <= 1.0,
            "sample_subject: roi_tightness must lie in [0, 1]");
    require(spec.noise_lo >= 0.0 && spec.noise_hi >= spec.noise_lo,
            "sample_subject: noise range must satisfy 0 <= lo <= hi");

    Rng rng(seed);
    const Index K = spec.voxels;
    const Index d = spec.dim;

    std::vector<Vector> centroids;
    centroids.reserve(static_cast<std::size_t>(spec.roi_count));
    for (int r = 0; r < spec.roi_count; ++r) centroids.push_back(detail::random_unit(rng, d));

    SubjectModel s;
    s.seed = seed;
    s.roi_count = spec.roi_count;
    s.roi_labels.resize(static_cast<std::size_t>(K));
    for (Index k = 0; k < K; ++k) s.roi_labels[static_cast<std::size_t>(k)] = static_cast<int>(k % spec.roi_count);
    std::shuffle(s.roi_labels.begin(), s.roi_labels.end(), rng);

    std::uniform_real_distribution<double> gain_dist(0.5, 2.0);
    const double t = spec.roi_tightness;
    s.weights.resize(K, d);
    for (Index k = 0; k < K; ++k) {
        const Vector u = detail::random_unit(rng, d);
        const double gain = gain_dist(rng);
        const Vector& c = centroids[static_cast<std::size_t>(s.roi_labels[static_cast<std::size_t>(k)])];
        Vector mix = t * c + (1.0 - t) * u;
        const double n = mix.norm();
        if (n > 0.0) mix /= n;
        s.weights.row(k) = gain * mix.transpose();
    }

    std::uniform_real_distribution<double> noise_dist(spec.noise_lo, spec.noise_hi);
    s.noise_std.resize(K);
    for (Index k = 0; k < K; ++k)
        s.noise_std(k) = spec.noise_hi > spec.noise_lo ? noise_dist(rng) : spec.noise_lo;
    return s;
}

/// n i.i.d. uniform unit vectors on the (d-1)-sphere, one per row.
inline Matrix sample_stimuli(std::uint64_t seed, Index n, Index d) {
    require(n >= 1, "sample_stimuli: n must be >= 1");
    require(d >= 2, "sample_stimuli: d must be >= 2 for sphere sampling");
    Rng rng(seed);
    Matrix out(n, d);
    for (Index t = 0; t < n; ++t) out.row(t) = detail::random_unit(rng, d).transpose();
    return out;
}

/// values = weights * stimuli^T + eps with eps_kt ~ N(0, noise_std_k^2).
inline ResponseMatrix simulate_responses(const SubjectModel& subject, const Matrix& stimuli,
                                         std::uint64_t seed) {
    require(stimuli.cols() == subject.dim(),
            "simulate_responses: stimulus dimension " + std::to_string(stimuli.cols()) +
                " does not match subject dimension " + std::to_string(subject.dim()));
    ResponseMatrix out;
    out.values.noalias() = subject.weights * stimuli.transpose();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index k = 0; k < out.values.rows(); ++k) {
        const double sd = subject.noise_std(k);
        for (Index t = 0; t < out.values.cols(); ++t) {
            const double z = normal(rng);
            if (sd > 0.0) out.values(k, t) += sd * z;
        }
    }
    return out;
}

/// Row-wise (x - mean) / std with the population std. Rows whose std is
/// below 1e-12 become zeros.
inline Matrix zscore_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    const double n = static_cast<double>(m.cols());
    for (Index k = 0; k < m.rows(); ++k) {
        const double mean = m.row(k).sum() / n;
        const double var = (m.row(k).array() - mean).square().sum() / n;
        const double sd = std::sqrt(var);
        if (sd < 1e-12)
            out.row(k).setZero();
        else
            out.row(k) = (m.row(k).array() - mean) / sd;
    }
    return out;
}

inline ResponseMatrix zscore_responses(const ResponseMatrix& m) {
    if (m.is_zscored) return m;
    return ResponseMatrix{zscore_rows(m.values), true};
}

/// Largest representable value, used as the SNR of a noiseless voxel.
inline constexpr double kSnrSentinel = std::numeric_limits<double>::max();

/// Per-voxel signal std (population, over the given stimuli) divided by
/// noise std. Zero signal gives 0; zero noise with nonzero signal gives the
/// sentinel.
inline Vector voxel_snr(const SubjectModel& subject, const Matrix& stimuli) {
    require(stimuli.rows() >= 2, "voxel_snr: need at least 2 stimuli");
    require(stimuli.cols() == subject.dim(), "voxel_snr: stimulus dimension mismatch");
    const Matrix clean = subject.weights * stimuli.transpose();
    const double n = static_cast<double>(clean.cols());
    Vector snr(subject.voxels());
    for (Index k = 0; k < clean.rows(); ++k) {
        const double mean = clean.row(k).sum() / n;
        const double sd = std::sqrt((clean.row(k).array() - mean).square().sum() / n);
        if (sd == 0.0)
            snr(k) = 0.0;
        else if (subject.noise_std(k) == 0.0)
            snr(k) = kSnrSentinel;
        else
            snr(k) = sd / subject.noise_std(k);
    }
    return snr;
}

}  // namespace icd
