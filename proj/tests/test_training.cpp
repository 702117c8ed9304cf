#include "icd/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace icd;

namespace {

DecoderConfig tiny() { return DecoderConfig{4, 8, 1, 2, 2, 8, 0.1}; }

TaskDistribution tiny_task() {
    TaskDistribution t;
    t.d = 4;
    t.roi_count = 2;
    return t;
}

CurriculumStage stage(StageKind kind, std::size_t steps, std::uint64_t seed) {
    CurriculumStage s;
    s.kind = kind;
    s.steps = steps;
    s.batch_size = 4;
    s.voxel_context = {3, 9};
    s.seed = seed;
    if (kind == StageKind::finetune) s.image_context_sizes = {8, 16};
    return s;
}

bool same_params(Decoder a, Decoder b) {
    const auto ta = tensor_list(a), tb = tensor_list(b);
    for (std::size_t i = 0; i < ta.size(); ++i)
        if (*ta[i] != *tb[i]) return false;
    return true;
}

}  // namespace

TEST(CosineLr, Endpoints) {
    CurriculumStage s;
    s.steps = 11;
    s.lr_initial = 1e-3;
    s.lr_floor = 1e-4;
    EXPECT_DOUBLE_EQ(cosine_lr(s, 0), 1e-3);
    EXPECT_NEAR(cosine_lr(s, 10), 1e-4, 1e-18);
    EXPECT_NEAR(cosine_lr(s, 5), 0.5 * (1e-3 + 1e-4), 1e-15);
    s.steps = 1;
    EXPECT_DOUBLE_EQ(cosine_lr(s, 0), 1e-3);
}

TEST(StageValidation, ImageContextRules) {
    CurriculumStage s = stage(StageKind::finetune, 1, 0);
    s.image_context_sizes.clear();
    EXPECT_THROW(s.validate(), ConfigError);
    CurriculumStage p = stage(StageKind::pretrain, 1, 0);
    p.image_context_sizes = {10};
    EXPECT_THROW(p.validate(), ConfigError);
    p.image_context_sizes.clear();
    p.voxel_context = {5, 4};
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(MakeEpisode, ShapesAndTrainingSeedRange) {
    const TaskDistribution task = tiny_task();
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Episode e = make_episode(task, stage(StageKind::pretrain, 1, 0), s);
        EXPECT_GE(e.tokens.rows(), 3);
        EXPECT_LE(e.tokens.rows(), 9);
        EXPECT_EQ(e.tokens.cols(), 5);
        EXPECT_NEAR(e.target.norm(), 1.0, 1e-12);
    }
    const Episode f = make_episode(task, stage(StageKind::finetune, 1, 0), 3);
    EXPECT_EQ(f.tokens.cols(), 5);
}

TEST(MakeEpisode, PretrainUsesTrueWeightsFinetuneUsesEstimates) {
    TaskDistribution task = tiny_task();
    task.noise_lo = task.noise_hi = 0.0;
    const Episode p = make_episode(task, stage(StageKind::pretrain, 1, 0), 5);
    // noiseless: response column equals W . target
    const Matrix w = p.tokens.leftCols(4);
    EXPECT_LT((w * p.target - p.tokens.col(4)).norm(), 1e-12);
    for (Index k = 0; k < w.rows(); ++k) {
        EXPECT_GE(w.row(k).norm(), 0.5 - 1e-12);
        EXPECT_LE(w.row(k).norm(), 2.0 + 1e-12);
    }
    task.noise_lo = 0.3;
    task.noise_hi = 0.5;
    const Episode f = make_episode(task, stage(StageKind::finetune, 1, 0), 5);
    const Matrix wf = f.tokens.leftCols(4);
    EXPECT_GT((wf * f.target - f.tokens.col(4)).norm(), 1e-6);
}

TEST(RunStage, ZeroStepsIsIdentity) {
    const Decoder init = init_params<double>(1, tiny());
    const StageResult<double> r = run_stage(init, stage(StageKind::pretrain, 0, 0), tiny_task(), LossConfig{});
    EXPECT_TRUE(r.log.empty());
    EXPECT_TRUE(same_params(r.params, init));
}

TEST(RunStage, Deterministic) {
    const Decoder init = init_params<double>(1, tiny());
    const auto a = run_stage(init, stage(StageKind::pretrain, 5, 3), tiny_task(), LossConfig{});
    const auto b = run_stage(init, stage(StageKind::pretrain, 5, 3), tiny_task(), LossConfig{});
    EXPECT_EQ(a.log, b.log);
    EXPECT_TRUE(same_params(a.params, b.params));
    EXPECT_FALSE(same_params(a.params, init));
    EXPECT_DOUBLE_EQ(a.log.front().lr, 1e-3);
}

TEST(RunStage, DimensionMismatchIsConfigError) {
    TaskDistribution task = tiny_task();
    task.d = 5;
    EXPECT_THROW(run_stage(init_params<double>(1, tiny()), stage(StageKind::pretrain, 1, 0), task, LossConfig{}),
                 ConfigError);
}

TEST(RunStage, LossDecreases) {
    DecoderConfig cfg{4, 16, 1, 2, 2, 16, 0.0};
    CurriculumStage s = stage(StageKind::pretrain, 300, 1);
    s.batch_size = 16;
    s.voxel_context = {12, 12};
    s.lr_initial = 3e-3;
    TaskDistribution task = tiny_task();
    task.noise_hi = 0.0;
    const auto r = run_stage(init_params<double>(2, cfg), s, task, LossConfig{});
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 50; ++i) {
        first += r.log[i].loss;
        last += r.log[r.log.size() - 1 - i].loss;
    }
    EXPECT_LT(last, 0.75 * first);
}

TEST(RunCurriculum, AllZeroStepsReturnsInit) {
    const Decoder init = init_params<double>(4, tiny());
    const std::vector<CurriculumStage> stages = {stage(StageKind::pretrain, 0, 0),
                                                 stage(StageKind::context_extension, 0, 1),
                                                 stage(StageKind::finetune, 0, 2)};
    EXPECT_TRUE(same_params(run_curriculum(stages, 4, tiny(), tiny_task(), LossConfig{}), init));
}

TEST(RunCurriculum, ResumeMatchesUninterrupted) {
    const std::vector<CurriculumStage> stages = {stage(StageKind::pretrain, 3, 0),
                                                 stage(StageKind::context_extension, 2, 1),
                                                 stage(StageKind::finetune, 2, 2)};
    const Decoder init = init_params<double>(4, tiny());
    Decoder after_first;
    const Decoder full = run_curriculum(init, stages, tiny_task(), LossConfig{},
                                        [&](const CurriculumStage& s, const StageResult<double>& r) {
                                            if (s.kind == StageKind::pretrain) after_first = r.params;
                                        });
    const Decoder resumed = run_curriculum(after_first, stages, tiny_task(), LossConfig{}, nullptr, 1);
    EXPECT_TRUE(same_params(full, resumed));
}

TEST(RunCurriculum, RejectsOutOfOrderStages) {
    const std::vector<CurriculumStage> stages = {stage(StageKind::finetune, 0, 0), stage(StageKind::pretrain, 0, 1)};
    EXPECT_THROW(run_curriculum(stages, 1, tiny(), tiny_task(), LossConfig{}), ConfigError);
}

TEST(AdamW, FirstStepMovesBySignTimesLr) {
    Decoder p = init_params<double>(1, tiny());
    Decoder g = zeros_like(p);
    g.embed_b.setConstant(3.0);
    const Matrix before = p.embed_b;
    AdamW<double> opt(p);
    opt.step(p, g, 0.01, 0.0);
    // bias-corrected first step is lr * g / (|g| + eps)
    EXPECT_LT((p.embed_b - (before.array() - 0.01 * 3.0 / (3.0 + 1e-8)).matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AdamW, DecayOnlyOnMatrices) {
    Decoder p = init_params<double>(1, tiny());
    p.embed_b.setConstant(1.0);
    const Matrix w_before = p.embed_w;
    Decoder g = zeros_like(p);
    AdamW<double> opt(p);
    opt.step(p, g, 0.1, 0.5);
    EXPECT_EQ(p.embed_b, Matrix::Constant(1, p.embed_b.cols(), 1.0));
    EXPECT_LT((p.embed_w - 0.95 * w_before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GradCheck, SmallDecoderFullLoss) {
    const Decoder p = init_params<double>(3, DecoderConfig{8, 16, 2, 4, 2, 16, 0.1});
    TaskDistribution task;
    task.d = 8;
    task.roi_count = 2;
    std::vector<Episode> batch;
    for (std::uint64_t i = 0; i < 3; ++i) batch.push_back(make_episode(task, stage(StageKind::pretrain, 1, 0), i));
    const GradCheckResult r = grad_check(p, batch, LossConfig{}, 1e-5);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor << "[" << r.worst_index << "]";
    EXPECT_EQ(r.checked, p.parameter_count());
}

TEST(GradCheck, EpsilonOutOfRange) {
    const Decoder p = init_params<double>(3, tiny());
    const std::vector<Episode> batch = {make_episode(tiny_task(), stage(StageKind::pretrain, 1, 0), 0)};
    EXPECT_THROW(grad_check(p, batch, LossConfig{}, 1e-2), ParameterError);
}

TEST(MaxRelativeError, Definition) {
    EXPECT_DOUBLE_EQ(max_relative_error(1.0, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(max_relative_error(2.0, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(max_relative_error(0.0, 0.0), 0.0);
}
