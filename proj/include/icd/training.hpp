#pragma once

// Optimization of the set decoder: episodes, AdamW with cosine annealing,
// the three-stage curriculum, and finite-difference gradient verification.

#include "icd/decoder.hpp"
#include "icd/loss.hpp"
#include "icd/stage1.hpp"
#include "icd/synthetic_cortex.hpp"

#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace icd {

enum class StageKind { pretrain, context_extension, finetune };

inline std::string_view to_string(StageKind k) {
    switch (k) {
        case StageKind::pretrain: return "pretrain";
        case StageKind::context_extension: return "context_extension";
        case StageKind::finetune: return "finetune";
    }
    return "unknown";
}

inline std::optional<StageKind> parse_stage_kind(std::string_view s) {
    if (s == "pretrain") return StageKind::pretrain;
    if (s == "context_extension") return StageKind::context_extension;
    if (s == "finetune") return StageKind::finetune;
    return std::nullopt;
}

/// Inclusive voxel-count range; lo == hi is a fixed context.
struct VoxelContext {
    Index lo = 50;
    Index hi = 50;

    bool fixed() const { return lo == hi; }
    friend bool operator==(const VoxelContext&, const VoxelContext&) = default;
};

struct CurriculumStage {
    StageKind kind = StageKind::pretrain;
    std::size_t steps = 0;
    Index batch_size = 32;
    VoxelContext voxel_context;
    std::vector<Index> image_context_sizes;  // finetune only
    double lr_initial = 1e-3;
    double lr_floor = 1e-4;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;

    void validate() const {
        if (voxel_context.lo < 1 || voxel_context.lo > voxel_context.hi)
            throw ConfigError("stage " + std::string(to_string(kind)) + ": voxel_context must satisfy 1 <= lo <= hi");
        if (batch_size < 1) throw ConfigError("stage: batch_size must be >= 1");
        if (!(lr_initial > 0.0) || !(lr_floor > 0.0)) throw ConfigError("stage: learning rates must be > 0");
        if (weight_decay < 0.0) throw ConfigError("stage: weight_decay must be >= 0");
        const bool has_images = !image_context_sizes.empty();
        if (kind == StageKind::finetune && !has_images)
            throw ConfigError("stage finetune: image_context_sizes must be non-empty (weights come from stage-1 estimates)");
        if (kind != StageKind::finetune && has_images)
            throw ConfigError("stage " + std::string(to_string(kind)) +
                              ": image_context_sizes is only valid for finetune (this stage uses ground-truth weights)");
        for (Index n : image_context_sizes)
            if (n < 1) throw ConfigError("stage finetune: image context sizes must be >= 1");
    }

    friend bool operator==(const CurriculumStage&, const CurriculumStage&) = default;
};

/// Learning rate at `step`, cosine-annealed from lr_initial (step 0) to
/// lr_floor (step steps - 1).
inline double cosine_lr(const CurriculumStage& stage, std::size_t step) {
    if (stage.steps <= 1) return stage.lr_initial;
    const double progress = static_cast<double>(step) / static_cast<double>(stage.steps - 1);
    return stage.lr_floor +
           0.5 * (stage.lr_initial - stage.lr_floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// The synthetic population that training episodes are drawn from.
struct TaskDistribution {
    Index d = 16;
    int roi_count = 8;
    double roi_tightness = 0.3;
    double noise_lo = 0.0;
    double noise_hi = 0.5;
    std::optional<double> ridge;  // stage-1 ridge; default_ridge(n) when unset

    SubjectSpec subject_spec(Index voxels) const {
        return SubjectSpec{voxels, d, static_cast<int>(std::min<Index>(roi_count, voxels)), roi_tightness, noise_lo,
                           noise_hi};
    }

    friend bool operator==(const TaskDistribution&, const TaskDistribution&) = default;
};

/// One (subject, novel stimulus) decoding problem.
struct Episode {
    Matrix tokens;   // K x (d + 1)
    Vector target;   // unit stimulus embedding
};

/// Builds the episode for `episode_seed` under the stage's context rule.
/// Subjects are drawn from the training seed range only.
inline Episode make_episode(const TaskDistribution& task, const CurriculumStage& stage, std::uint64_t episode_seed) {
    Rng rng(derive_seed(episode_seed, 0));
    std::uniform_int_distribution<Index> voxel_dist(stage.voxel_context.lo, stage.voxel_context.hi);
    const Index K = voxel_dist(rng);
    const std::uint64_t subject_seed = derive_seed(episode_seed, 1) % kEvalSeedBase;
    const SubjectModel subject = sample_subject(subject_seed, task.subject_spec(K));
    const Matrix stimulus = sample_stimuli(derive_seed(episode_seed, 2), 1, task.d);
    const ResponseMatrix response = simulate_responses(subject, stimulus, derive_seed(episode_seed, 3));

    Episode ep;
    ep.target = stimulus.row(0).transpose();
    if (stage.kind == StageKind::finetune) {
        std::uniform_int_distribution<std::size_t> pick(0, stage.image_context_sizes.size() - 1);
        const Index n = stage.image_context_sizes[pick(rng)];
        ImageContext ctx;
        ctx.stimuli = sample_stimuli(derive_seed(episode_seed, 4), n, task.d);
        ctx.responses = simulate_responses(subject, ctx.stimuli, derive_seed(episode_seed, 5)).values;
        const Matrix estimated = estimate_all_voxels(ctx, task.ridge.value_or(default_ridge(n)));
        ep.tokens = build_tokens(estimated, response.values.col(0));
    } else {
        ep.tokens = build_tokens(subject.weights, response.values.col(0));
    }
    return ep;
}

/// Decoupled-weight-decay Adam.
template <typename Scalar>
class AdamW {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamW(const DecoderParams<Scalar>& like) : m_(zeros_like(like)), v_(zeros_like(like)) {}

    void step(DecoderParams<Scalar>& params, DecoderParams<Scalar>& grad, double lr, double weight_decay) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        auto ps = tensor_list(params);
        auto gs = tensor_list(grad);
        auto ms = tensor_list(m_);
        auto vs = tensor_list(v_);
        std::vector<bool> decays;
        params.visit([&](std::string_view, MatrixT<Scalar>&, bool dec) { decays.push_back(dec); });
        const Scalar b1 = static_cast<Scalar>(beta1), b2 = static_cast<Scalar>(beta2);
        const Scalar step_scale = static_cast<Scalar>(lr / c1);
        const Scalar inv_c2 = static_cast<Scalar>(1.0 / c2);
        const Scalar e = static_cast<Scalar>(eps);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto& p = *ps[i];
            const auto& g = *gs[i];
            auto& m = *ms[i];
            auto& v = *vs[i];
            if (decays[i] && weight_decay > 0.0) p *= static_cast<Scalar>(1.0 - lr * weight_decay);
            m = b1 * m + (Scalar(1) - b1) * g;
            v.array() = b2 * v.array() + (Scalar(1) - b2) * g.array().square();
            p.array() -= step_scale * m.array() / ((v.array() * inv_c2).sqrt() + e);
        }
    }

private:
    DecoderParams<Scalar> m_, v_;
    std::size_t t_ = 0;
};

struct LogRecord {
    std::size_t step = 0;
    StageKind stage = StageKind::pretrain;
    double loss = 0.0;
    double lr = 0.0;

    friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

/// Loss and accumulated gradient of a batch of episodes.
template <typename Scalar>
double batch_gradient(const DecoderParams<Scalar>& params, const std::vector<Episode>& batch, const LossConfig& loss,
                      bool train_mode, const std::vector<std::uint64_t>& dropout_seeds, DecoderParams<Scalar>& grad) {
    const Index N = static_cast<Index>(batch.size());
    const Index d = params.config.d;
    std::vector<ForwardCache<Scalar>> caches(batch.size());
    Matrix preds(N, d), targets(N, d);
    for (Index i = 0; i < N; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        preds.row(i) = forward(params, batch[ui].tokens, train_mode, dropout_seeds[ui], caches[ui])
                           .template cast<double>()
                           .transpose();
        targets.row(i) = batch[ui].target.transpose();
    }
    const LossValue lv = total_loss_with_grad(preds, targets, loss);
    for (Index i = 0; i < N; ++i) {
        const VectorT<Scalar> g = lv.grad.row(i).transpose().template cast<Scalar>();
        backward(params, caches[static_cast<std::size_t>(i)], g, grad);
    }
    return lv.total;
}

template <typename Scalar>
struct StageResult {
    DecoderParams<Scalar> params;
    std::vector<LogRecord> log;
};

/// Runs `stage.steps` AdamW updates on fresh synthetic batches.
template <typename Scalar>
StageResult<Scalar> run_stage(DecoderParams<Scalar> params, const CurriculumStage& stage, const TaskDistribution& task,
                              const LossConfig& loss,
                              const std::function<void(const LogRecord&)>& on_step = nullptr) {
    stage.validate();
    loss.validate();
    if (task.d != params.config.d)
        throw ConfigError("run_stage: task embedding dimension " + std::to_string(task.d) +
                          " does not match decoder d = " + std::to_string(params.config.d));
    StageResult<Scalar> out;
    if (stage.steps == 0) {
        out.params = std::move(params);
        return out;
    }
    AdamW<Scalar> opt(params);
    DecoderParams<Scalar> grad = zeros_like(params);
    std::vector<Episode> batch(static_cast<std::size_t>(stage.batch_size));
    std::vector<std::uint64_t> dropout_seeds(batch.size());
    out.log.reserve(stage.steps);
    for (std::size_t s = 0; s < stage.steps; ++s) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const std::uint64_t es = derive_seed(stage.seed, s, i);
            batch[i] = make_episode(task, stage, es);
            dropout_seeds[i] = derive_seed(es, 99);
        }
        grad.visit([](std::string_view, MatrixT<Scalar>& m, bool) { m.setZero(); });
        const double value = batch_gradient(params, batch, loss, true, dropout_seeds, grad);
        const double lr = cosine_lr(stage, s);
        opt.step(params, grad, lr, stage.weight_decay);
        out.log.push_back(LogRecord{s, stage.kind, value, lr});
        if (on_step) on_step(out.log.back());
    }
    out.params = std::move(params);
    return out;
}

/// Threads parameters through the stages in order. `on_stage_end` receives
/// each stage's result (for checkpointing) and `first_stage` allows resuming
/// from a checkpoint taken after stage `first_stage - 1`.
template <typename Scalar>
DecoderParams<Scalar> run_curriculum(
    DecoderParams<Scalar> params, const std::vector<CurriculumStage>& stages, const TaskDistribution& task,
    const LossConfig& loss,
    const std::type_identity_t<std::function<void(const CurriculumStage&, const StageResult<Scalar>&)>>& on_stage_end =
        nullptr,
    std::size_t first_stage = 0, const std::function<void(const LogRecord&)>& on_step = nullptr) {
    for (std::size_t i = 1; i < stages.size(); ++i)
        if (static_cast<int>(stages[i].kind) < static_cast<int>(stages[i - 1].kind))
            throw ConfigError("curriculum: stages must run pretrain -> context_extension -> finetune");
    for (std::size_t i = first_stage; i < stages.size(); ++i) {
        StageResult<Scalar> r = run_stage(std::move(params), stages[i], task, loss, on_step);
        if (on_stage_end) on_stage_end(stages[i], r);
        params = std::move(r.params);
    }
    return params;
}

/// Curriculum from a fresh initialization drawn from `seed`.
template <typename Scalar = double>
DecoderParams<Scalar> run_curriculum(const std::vector<CurriculumStage>& stages, std::uint64_t seed,
                                     const DecoderConfig& decoder, const TaskDistribution& task, const LossConfig& loss) {
    return run_curriculum(init_params<Scalar>(seed, decoder), stages, task, loss);
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    Index worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

/// max over entries of |g_fd - g| / max(|g_fd|, |g|, 1e-8) where g_fd is the
/// central difference of `loss` at `x` with step eps.
inline double max_relative_error(double numeric, double analytic) {
    return std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-8});
}

/// Compares backpropagated gradients of the batch loss against central
/// finite differences for every parameter. Dropout is disabled.
inline GradCheckResult grad_check(const Decoder& params, const std::vector<Episode>& batch, const LossConfig& loss,
                                  double epsilon) {
    require(epsilon >= 1e-6 && epsilon <= 1e-3, "grad_check: epsilon must lie in [1e-6, 1e-3]");
    require(!batch.empty(), "grad_check: batch is empty");
    const std::vector<std::uint64_t> seeds(batch.size(), 0);
    Decoder grad = zeros_like(params);
    batch_gradient(params, batch, loss, false, seeds, grad);

    auto eval = [&](const Decoder& p) {
        Matrix preds(static_cast<Index>(batch.size()), p.config.d), targets(preds.rows(), preds.cols());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            preds.row(static_cast<Index>(i)) = decode(batch[i].tokens, p).transpose();
            targets.row(static_cast<Index>(i)) = batch[i].target.transpose();
        }
        return total_loss(preds, targets, loss);
    };

    Decoder probe = params;
    std::vector<std::string> names;
    probe.visit([&](std::string_view n, Matrix&, bool) { names.emplace_back(n); });
    auto probe_tensors = tensor_list(probe);
    auto grad_tensors = tensor_list(grad);

    GradCheckResult out;
    for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
        Matrix& m = *probe_tensors[t];
        for (Index i = 0; i < m.size(); ++i) {
            const double orig = m.data()[i];
            m.data()[i] = orig + epsilon;
            const double up = eval(probe);
            m.data()[i] = orig - epsilon;
            const double down = eval(probe);
            m.data()[i] = orig;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double analytic = grad_tensors[t]->data()[i];
            const double err = max_relative_error(numeric, analytic);
            ++out.checked;
            if (err > out.max_rel_error) {
                out.max_rel_error = err;
                out.worst_tensor = names[t];
                out.worst_index = i;
                out.analytic = analytic;
                out.numeric = numeric;
            }
        }
    }
    return out;
}

}  // namespace icd
