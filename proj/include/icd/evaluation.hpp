#pragma once

// Retrieval scoring and the experiment layer: per-subject evaluation,
// context-size sweeps, ROI dropout and attention selectivity.

#include "icd/decoder.hpp"
#include "icd/inversion.hpp"
#include "icd/stage1.hpp"
#include "icd/synthetic_cortex.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string_view>
#include <vector>

namespace icd {

struct RetrievalReport {
    double top1 = 0.0;
    double top5 = 0.0;
    double mean_rank = 0.0;
    double mean_cosine = 0.0;
    Index gallery_size = 0;
    Index trials = 0;

    friend bool operator==(const RetrievalReport&, const RetrievalReport&) = default;
};

/// Rank of gallery[truth] among all gallery rows by descending cosine with
/// `pred`. Ties go to the lower index: an equal-scoring item ranks ahead of
/// the truth only if its index is smaller.
inline Index retrieval_rank(const Vector& scores, Index truth) {
    const double s = scores(truth);
    Index rank = 1;
    for (Index j = 0; j < scores.size(); ++j)
        if (scores(j) > s || (scores(j) == s && j < truth)) ++rank;
    return rank;
}

/// Top-1/top-5 accuracy, mean rank and mean cosine of M predictions against
/// an N-item gallery; truth[i] is the gallery row of prediction i.
inline RetrievalReport retrieval_metrics(const Matrix& preds, const Matrix& gallery, const std::vector<Index>& truth,
                                         bool require_top5 = true) {
    require(preds.rows() >= 1, "retrieval_metrics: no predictions");
    require(static_cast<Index>(truth.size()) == preds.rows(), "retrieval_metrics: one truth index per prediction");
    require(preds.cols() == gallery.cols(), "retrieval_metrics: dimension mismatch");
    require(!require_top5 || gallery.rows() >= 5, "retrieval_metrics: top-5 needs a gallery of at least 5 items");
    RetrievalReport r;
    r.gallery_size = gallery.rows();
    r.trials = preds.rows();
    const Matrix scores = preds * gallery.transpose();
    for (Index i = 0; i < preds.rows(); ++i) {
        const Index t = truth[static_cast<std::size_t>(i)];
        require(t >= 0 && t < gallery.rows(), "retrieval_metrics: truth index out of range");
        const Index rank = retrieval_rank(scores.row(i).transpose(), t);
        r.top1 += rank <= 1 ? 1.0 : 0.0;
        r.top5 += rank <= 5 ? 1.0 : 0.0;
        r.mean_rank += static_cast<double>(rank);
        r.mean_cosine += scores(i, t);
    }
    const double m = static_cast<double>(preds.rows());
    r.top1 /= m;
    r.top5 /= m;
    r.mean_rank /= m;
    r.mean_cosine /= m;
    return r;
}

/// Maps (voxel weights K x d, responses K) to a unit embedding estimate.
using Predictor = std::function<Vector(const Matrix& weights, const Vector& responses)>;

inline Predictor learned_predictor(const Decoder& params) {
    return [&params](const Matrix& w, const Vector& b) { return decode(build_tokens(w, b), params); };
}

/// Closed-form inversion used in place of the learned decoder. Rank-deficient
/// estimates (image context smaller than d) fall back to the pseudo-inverse.
inline Predictor oracle_predictor(double ridge = 0.0) {
    return [ridge](const Matrix& w, const Vector& b) -> Vector {
        try {
            return invert_least_squares(w, b, ridge).unit;
        } catch (const SingularityError&) {
            const Vector raw = Eigen::CompleteOrthogonalDecomposition<Matrix>(w).solve(b);
            return raw.normalized();
        }
    };
}

/// Gradient inversion from the origin with the power-iteration step size.
inline Predictor gradient_predictor(std::size_t steps = 2000) {
    return [steps](const Matrix& w, const Vector& b) {
        return invert_gradient(w, b, Vector::Zero(w.cols()), steps, stable_step_size(w)).solution.unit;
    };
}

struct EvalSetup {
    SubjectSpec subject{200, 16, 8, 0.3, 0.0, 0.0};
    Index support = 64;   // image-context size for stage 1
    Index gallery = 100;  // held-out test stimuli per subject
    std::optional<double> ridge;

    double ridge_for(Index n) const { return ridge.value_or(default_ridge(n)); }
};

/// One held-out subject with its support and test stimuli.
struct EvalInstance {
    SubjectModel subject;
    ImageContext support;
    Matrix test_stimuli;   // gallery x d
    Matrix test_responses; // K x gallery
};

/// Evaluation subjects come from seeds at or above kEvalSeedBase, so they are
/// never drawn by training episodes. Support and test stimuli use separate
/// streams of the subject seed.
inline EvalInstance make_eval_instance(const EvalSetup& setup, std::uint64_t eval_seed) {
    EvalInstance e;
    const std::uint64_t subject_seed = kEvalSeedBase + (eval_seed % kEvalSeedBase);
    e.subject = sample_subject(subject_seed, setup.subject);
    e.support.stimuli = sample_stimuli(derive_seed(subject_seed, 11), setup.support, setup.subject.dim);
    e.support.responses = simulate_responses(e.subject, e.support.stimuli, derive_seed(subject_seed, 12)).values;
    e.test_stimuli = sample_stimuli(derive_seed(subject_seed, 13), setup.gallery, setup.subject.dim);
    e.test_responses = simulate_responses(e.subject, e.test_stimuli, derive_seed(subject_seed, 14)).values;
    return e;
}

inline std::vector<Index> all_voxels(Index K) {
    std::vector<Index> v(static_cast<std::size_t>(K));
    std::iota(v.begin(), v.end(), Index{0});
    return v;
}

namespace detail {

inline Matrix take_rows(const Matrix& m, const std::vector<Index>& rows) {
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
}

}  // namespace detail

/// Stage-1 estimates from the support context on `voxels`, then one
/// prediction per test stimulus scored against the whole test gallery.
inline RetrievalReport evaluate_subject(const Predictor& predictor, const ImageContext& support,
                                        const Matrix& test_stimuli, const Matrix& test_responses, double ridge,
                                        const std::vector<Index>& voxels) {
    require(!voxels.empty(), "evaluate_subject: voxel subset is empty");
    require(test_responses.cols() == test_stimuli.rows(), "evaluate_subject: one response column per test stimulus");
    ImageContext ctx;
    ctx.stimuli = support.stimuli;
    ctx.responses = detail::take_rows(support.responses, voxels);
    const Matrix weights = estimate_all_voxels(ctx, ridge);
    const Matrix responses = detail::take_rows(test_responses, voxels);
    const Index M = test_stimuli.rows();
    Matrix preds(M, test_stimuli.cols());
    std::vector<Index> truth(static_cast<std::size_t>(M));
    for (Index t = 0; t < M; ++t) {
        preds.row(t) = predictor(weights, responses.col(t)).transpose();
        truth[static_cast<std::size_t>(t)] = t;
    }
    return retrieval_metrics(preds, test_stimuli, truth, test_stimuli.rows() >= 5);
}

inline RetrievalReport evaluate_subject(const Predictor& predictor, const EvalInstance& e, const EvalSetup& setup,
                                        const std::vector<Index>& voxels) {
    return evaluate_subject(predictor, e.support, e.test_stimuli, e.test_responses, setup.ridge_for(e.support.size()),
                            voxels);
}

/// Spearman rank correlation with average ranks for ties; nullopt when
/// either side has no variation.
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size(), "spearman: length mismatch");
    if (x.size() < 2) return std::nullopt;
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

enum class AxisKind { image_context, voxel_context, noise, ridge };

inline std::string_view to_string(AxisKind a) {
    switch (a) {
        case AxisKind::image_context: return "image-context";
        case AxisKind::voxel_context: return "voxel-context";
        case AxisKind::noise: return "noise";
        case AxisKind::ridge: return "ridge";
    }
    return "unknown";
}

struct SweepCell {
    double value = 0.0;
    std::uint64_t seed = 0;
    RetrievalReport report;

    friend bool operator==(const SweepCell&, const SweepCell&) = default;
};

/// One report per (axis value, seed), cells ordered value-major.
struct SweepTable {
    AxisKind axis = AxisKind::voxel_context;
    std::vector<double> values;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepCell> cells;

    /// Spearman correlation between axis value and per-seed top-1.
    std::optional<double> top1_correlation() const {
        std::vector<double> x, y;
        for (const auto& c : cells) {
            x.push_back(c.value);
            y.push_back(c.report.top1);
        }
        return spearman(x, y);
    }

    /// Mean of `field` over seeds for each axis value.
    std::vector<double> mean_over_seeds(double RetrievalReport::*field) const {
        std::vector<double> out;
        for (double v : values) {
            double s = 0.0;
            int n = 0;
            for (const auto& c : cells)
                if (c.value == v) {
                    s += c.report.*field;
                    ++n;
                }
            out.push_back(n ? s / n : 0.0);
        }
        return out;
    }

    friend bool operator==(const SweepTable&, const SweepTable&) = default;
};

struct ContextSweep {
    SweepTable image_axis;  // support size varies, all setup voxels used
    SweepTable voxel_axis;  // voxel count varies, setup.support images used
};

/// Sweeps image-context size and voxel-context size separately. For each
/// seed one evaluation subject is drawn; smaller contexts are nested
/// prefixes of larger ones (support stimuli in draw order, voxels in a
/// seeded random order).
inline ContextSweep context_sweep(const Predictor& predictor, const EvalSetup& setup,
                                  const std::vector<Index>& image_sizes, const std::vector<Index>& voxel_sizes,
                                  const std::vector<std::uint64_t>& seeds) {
    require(std::is_sorted(image_sizes.begin(), image_sizes.end()), "context_sweep: image sizes must be ascending");
    require(std::is_sorted(voxel_sizes.begin(), voxel_sizes.end()), "context_sweep: voxel sizes must be ascending");
    EvalSetup big = setup;
    if (!image_sizes.empty()) big.support = std::max(setup.support, image_sizes.back());
    if (!voxel_sizes.empty())
        require(voxel_sizes.back() <= setup.subject.voxels, "context_sweep: voxel size exceeds subject voxel count");

    ContextSweep out;
    out.image_axis.axis = AxisKind::image_context;
    out.voxel_axis.axis = AxisKind::voxel_context;
    out.image_axis.seeds = out.voxel_axis.seeds = seeds;
    for (Index n : image_sizes) out.image_axis.values.push_back(static_cast<double>(n));
    for (Index k : voxel_sizes) out.voxel_axis.values.push_back(static_cast<double>(k));

    std::vector<std::vector<SweepCell>> image_cells(image_sizes.size()), voxel_cells(voxel_sizes.size());
    for (std::uint64_t seed : seeds) {
        const EvalInstance e = make_eval_instance(big, seed);
        const std::vector<Index> every = all_voxels(setup.subject.voxels);

        for (std::size_t i = 0; i < image_sizes.size(); ++i) {
            ImageContext sub;
            sub.stimuli = e.support.stimuli.topRows(image_sizes[i]);
            sub.responses = e.support.responses.leftCols(image_sizes[i]);
            const auto r = evaluate_subject(predictor, sub, e.test_stimuli, e.test_responses,
                                            setup.ridge_for(image_sizes[i]), every);
            image_cells[i].push_back({static_cast<double>(image_sizes[i]), seed, r});
        }

        std::vector<Index> order = every;
        Rng rng(derive_seed(seed, 21));
        std::shuffle(order.begin(), order.end(), rng);
        ImageContext sub;
        sub.stimuli = e.support.stimuli.topRows(setup.support);
        sub.responses = e.support.responses.leftCols(setup.support);
        for (std::size_t i = 0; i < voxel_sizes.size(); ++i) {
            std::vector<Index> chosen(order.begin(), order.begin() + voxel_sizes[i]);
            std::sort(chosen.begin(), chosen.end());
            const auto r = evaluate_subject(predictor, sub, e.test_stimuli, e.test_responses,
                                            setup.ridge_for(setup.support), chosen);
            voxel_cells[i].push_back({static_cast<double>(voxel_sizes[i]), seed, r});
        }
    }
    for (auto& v : image_cells) out.image_axis.cells.insert(out.image_axis.cells.end(), v.begin(), v.end());
    for (auto& v : voxel_cells) out.voxel_axis.cells.insert(out.voxel_axis.cells.end(), v.begin(), v.end());
    return out;
}

struct RoiDropoutReport {
    RetrievalReport full;
    RetrievalReport masked;
    double top1_delta = 0.0;  // full.top1 - masked.top1
    Index masked_voxels = 0;
};

/// Evaluates with all voxels and again with every voxel whose ROI label is
/// in `masked_labels` removed.
inline RoiDropoutReport roi_dropout_eval(const Predictor& predictor, const EvalInstance& e, const EvalSetup& setup,
                                         const std::vector<int>& masked_labels) {
    const std::set<int> masked(masked_labels.begin(), masked_labels.end());
    for (int label : masked)
        require(label >= 0 && label < e.subject.roi_count, "roi_dropout_eval: label does not exist");
    std::vector<Index> kept;
    for (Index k = 0; k < e.subject.voxels(); ++k)
        if (!masked.contains(e.subject.roi_labels[static_cast<std::size_t>(k)])) kept.push_back(k);
    require(!kept.empty(), "roi_dropout_eval: masking leaves no voxels");
    RoiDropoutReport r;
    r.full = evaluate_subject(predictor, e, setup, all_voxels(e.subject.voxels()));
    r.masked = kept.size() == static_cast<std::size_t>(e.subject.voxels())
                   ? r.full
                   : evaluate_subject(predictor, e, setup, kept);
    r.top1_delta = r.full.top1 - r.masked.top1;
    r.masked_voxels = e.subject.voxels() - static_cast<Index>(kept.size());
    return r;
}

struct SelectivityReport {
    Vector mean_attention;  // per voxel, averaged over test stimuli
    Vector snr;
    std::optional<double> correlation;  // nullopt when degenerate
};

/// Spearman correlation between last-layer register attention (averaged over
/// test stimuli) and voxel SNR.
inline SelectivityReport attention_selectivity(const Decoder& params, const EvalInstance& e, const EvalSetup& setup) {
    const Matrix weights = estimate_all_voxels(e.support, setup.ridge_for(e.support.size()));
    SelectivityReport r;
    r.mean_attention = Vector::Zero(e.subject.voxels());
    for (Index t = 0; t < e.test_stimuli.rows(); ++t)
        r.mean_attention += attention_map(build_tokens(weights, e.test_responses.col(t)), params);
    r.mean_attention /= static_cast<double>(e.test_stimuli.rows());
    r.snr = voxel_snr(e.subject, e.test_stimuli);
    std::vector<double> a(r.mean_attention.data(), r.mean_attention.data() + r.mean_attention.size());
    std::vector<double> s(r.snr.data(), r.snr.data() + r.snr.size());
    r.correlation = spearman(a, s);
    return r;
}

}  // namespace icd
