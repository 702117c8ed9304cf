#include "icd/evaluation.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace icd;

namespace {

std::vector<Index> identity_truth(Index n) { return all_voxels(n); }

EvalSetup small_setup(double noise = 0.0) {
    EvalSetup s;
    s.subject = SubjectSpec{40, 6, 4, 0.3, noise, noise};
    s.support = 24;
    s.gallery = 20;
    return s;
}

}  // namespace

TEST(RetrievalRank, CompetitionRanking) {
    const Vector scores = (Vector(4) << 0.5, 0.9, 0.5, 0.1).finished();
    EXPECT_EQ(retrieval_rank(scores, 1), 1);
    // a tie ranks ahead of the truth only when it has the lower index
    EXPECT_EQ(retrieval_rank(scores, 0), 2);
    EXPECT_EQ(retrieval_rank(scores, 2), 3);
    EXPECT_EQ(retrieval_rank(scores, 3), 4);
}

TEST(RetrievalMetrics, PerfectPredictions) {
    const Matrix g = sample_stimuli(1, 30, 8);
    const RetrievalReport r = retrieval_metrics(g, g, identity_truth(30));
    EXPECT_DOUBLE_EQ(r.top1, 1.0);
    EXPECT_DOUBLE_EQ(r.top5, 1.0);
    EXPECT_DOUBLE_EQ(r.mean_rank, 1.0);
    EXPECT_NEAR(r.mean_cosine, 1.0, 1e-12);
    EXPECT_EQ(r.gallery_size, 30);
}

TEST(RetrievalMetrics, HandComputedRanks) {
    Matrix gallery = Matrix::Identity(3, 3);
    Matrix preds(2, 3);
    preds << 0.0, 0.6, 0.8,   // truth 0 scores 0 and ranks 3
        0.0, 1.0, 0.0;        // truth 1 ranks 1
    const RetrievalReport r = retrieval_metrics(preds, gallery, {0, 1}, false);
    EXPECT_DOUBLE_EQ(r.top1, 0.5);
    EXPECT_DOUBLE_EQ(r.mean_rank, 2.0);
    EXPECT_DOUBLE_EQ(r.mean_cosine, 0.5);
}

TEST(RetrievalMetrics, RandomPredictionsHitChance) {
    for (Index N : {20, 100}) {
        const Index trials = 1000;
        const Matrix gallery = sample_stimuli(static_cast<std::uint64_t>(N), N, 8);
        const Matrix preds = sample_stimuli(static_cast<std::uint64_t>(N) + 1, trials, 8);
        std::vector<Index> truth(static_cast<std::size_t>(trials));
        for (Index i = 0; i < trials; ++i) truth[static_cast<std::size_t>(i)] = i % N;
        const RetrievalReport r = retrieval_metrics(preds, gallery, truth);
        const double chance = 1.0 / static_cast<double>(N);
        EXPECT_NEAR(r.mean_rank, (N + 1) / 2.0, 0.05 * (N + 1) / 2.0);
        // binomial sd of top1 over 1000 trials is ~0.007 at N = 20
        EXPECT_NEAR(r.top1, chance, 4.0 * std::sqrt(chance * (1 - chance) / trials));
    }
}

TEST(Spearman, KnownValues) {
    EXPECT_DOUBLE_EQ(*spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
    EXPECT_DOUBLE_EQ(*spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
    // ranks x = 1,2,3 and y = 1.5,1.5,3: Pearson of the ranks is sqrt(3)/2
    EXPECT_NEAR(*spearman({1, 2, 3}, {5, 5, 9}), std::sqrt(3.0) / 2.0, 1e-12);
    EXPECT_FALSE(spearman({1, 2, 3}, {2, 2, 2}).has_value());
    EXPECT_FALSE(spearman({1}, {2}).has_value());
}

TEST(EvaluateSubject, OracleIsPerfectWhenNoiseless) {
    const EvalSetup s = small_setup();
    const EvalInstance e = make_eval_instance(s, 0);
    const RetrievalReport r = evaluate_subject(oracle_predictor(), e, s, all_voxels(40));
    EXPECT_DOUBLE_EQ(r.top1, 1.0);
}

TEST(EvaluateSubject, SingleVoxelRuns) {
    const EvalSetup s = small_setup(0.2);
    const EvalInstance e = make_eval_instance(s, 1);
    const Decoder p = init_params<double>(1, DecoderConfig{6, 8, 1, 2, 2, 8, 0.0});
    const RetrievalReport r = evaluate_subject(learned_predictor(p), e, s, {3});
    EXPECT_GE(r.top1, 0.0);
    EXPECT_LE(r.top1, 1.0);
    EXPECT_GE(r.mean_rank, 1.0);
    EXPECT_LE(r.mean_rank, 20.0);
    const RetrievalReport o = evaluate_subject(oracle_predictor(), e, s, {3});
    EXPECT_TRUE(std::isfinite(o.mean_cosine));
}

TEST(EvaluateSubject, Deterministic) {
    const EvalSetup s = small_setup(0.3);
    const Decoder p = init_params<double>(1, DecoderConfig{6, 8, 1, 2, 2, 8, 0.0});
    const auto a = evaluate_subject(learned_predictor(p), make_eval_instance(s, 2), s, all_voxels(40));
    const auto b = evaluate_subject(learned_predictor(p), make_eval_instance(s, 2), s, all_voxels(40));
    EXPECT_EQ(a, b);
}

TEST(MakeEvalInstance, DisjointFromTrainingSeeds) {
    const EvalSetup s = small_setup();
    EXPECT_EQ(make_eval_instance(s, 3).subject.seed, kEvalSeedBase + 3);
}

TEST(ContextSweep, SinglePointHasUndefinedCorrelation) {
    const EvalSetup s = small_setup(0.1);
    const ContextSweep sw = context_sweep(oracle_predictor(), s, {24}, {}, {0});
    EXPECT_EQ(sw.image_axis.cells.size(), 1u);
    EXPECT_FALSE(sw.image_axis.top1_correlation().has_value());
    EXPECT_TRUE(sw.voxel_axis.cells.empty());
}

TEST(ContextSweep, OneCellPerValueAndSeed) {
    const EvalSetup s = small_setup(0.3);
    const ContextSweep sw = context_sweep(oracle_predictor(), s, {8, 16}, {5, 10, 40}, {0, 1});
    EXPECT_EQ(sw.image_axis.cells.size(), 4u);
    EXPECT_EQ(sw.voxel_axis.cells.size(), 6u);
    EXPECT_EQ(sw.voxel_axis.mean_over_seeds(&RetrievalReport::top1).size(), 3u);
    EXPECT_THROW(context_sweep(oracle_predictor(), s, {}, {80}, {0}), ParameterError);
    EXPECT_THROW(context_sweep(oracle_predictor(), s, {16, 8}, {}, {0}), ParameterError);
}

TEST(RoiDropout, EmptyMaskGivesIdenticalReports) {
    const EvalSetup s = small_setup(0.2);
    const EvalInstance e = make_eval_instance(s, 4);
    const RoiDropoutReport r = roi_dropout_eval(oracle_predictor(), e, s, {});
    EXPECT_EQ(r.full, r.masked);
    EXPECT_EQ(r.top1_delta, 0.0);
    EXPECT_EQ(r.masked_voxels, 0);
    EXPECT_THROW(roi_dropout_eval(oracle_predictor(), e, s, {9}), ParameterError);
}

TEST(RoiDropout, MasksWholeClusters) {
    const EvalSetup s = small_setup(0.2);
    const EvalInstance e = make_eval_instance(s, 4);
    const RoiDropoutReport r = roi_dropout_eval(oracle_predictor(), e, s, {0, 1});
    EXPECT_EQ(r.masked_voxels, 20);  // round-robin labels, 40 voxels over 4 clusters
}

TEST(AttentionSelectivity, UntrainedRunsAndLogs) {
    EvalSetup s = small_setup();
    s.subject.noise_lo = 0.0;
    s.subject.noise_hi = 1.0;
    const EvalInstance e = make_eval_instance(s, 5);
    const Decoder p = init_params<double>(2, DecoderConfig{6, 8, 1, 2, 2, 8, 0.0});
    const SelectivityReport r = attention_selectivity(p, e, s);
    EXPECT_EQ(r.mean_attention.size(), 40);
    EXPECT_NEAR(r.mean_attention.sum(), 1.0, 1e-9);
    ASSERT_TRUE(r.correlation.has_value());
    std::cout << "untrained attention/SNR spearman: " << *r.correlation << '\n';
}

TEST(AttentionSelectivity, EqualSnrIsDegenerate) {
    const EvalSetup s = small_setup();  // noiseless: every voxel has the sentinel SNR
    const EvalInstance e = make_eval_instance(s, 6);
    const Decoder p = init_params<double>(2, DecoderConfig{6, 8, 1, 2, 2, 8, 0.0});
    EXPECT_FALSE(attention_selectivity(p, e, s).correlation.has_value());
}
