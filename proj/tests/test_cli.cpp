#include "icd/icd.hpp"

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace icd;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "icd_cli_test";

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Writes configs/tiny.yaml with textual substitutions and returns its path.
fs::path make_config(const std::string& name, const std::vector<std::pair<std::string, std::string>>& edits = {}) {
    std::string text = read_text(fs::path(ICD_SOURCE_DIR) / "configs" / "tiny.yaml");
    for (const auto& [from, to] : edits) {
        const auto pos = text.find(from);
        EXPECT_NE(pos, std::string::npos) << from;
        if (pos != std::string::npos) text.replace(pos, from.size(), to);
    }
    fs::create_directories(kRoot);
    const fs::path p = kRoot / (name + ".yaml");
    std::ofstream(p) << text;
    return p;
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

RunResult run(const std::string& args, const std::string& tag) {
    const fs::path out = kRoot / (tag + ".stdout"), err = kRoot / (tag + ".stderr");
    const std::string cmd = std::string(ICD_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_text(out);
    r.err = read_text(err);
    return r;
}

std::string cfg_args(const fs::path& config, const fs::path& out) {
    return "--config " + config.string() + " --out " + out.string();
}

}  // namespace

TEST(Cli, SimulateWritesReloadableDeterministicFiles) {
    const fs::path cfg = make_config("sim");
    const fs::path a = kRoot / "sim_a", b = kRoot / "sim_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const RunResult r = run("simulate " + cfg_args(cfg, a), "sim_a");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("K=24 d=4 roi_count=4"), std::string::npos) << r.out;
    ASSERT_EQ(run("simulate " + cfg_args(cfg, b), "sim_b").code, 0);
    for (const char* f : {"subject.bin", "stimuli.bin", "responses.bin", "responses_zscored.bin", "weights_estimated.bin"}) {
        ASSERT_TRUE(fs::exists(a / f)) << f;
        EXPECT_EQ(read_text(a / f), read_text(b / f)) << f;
    }
    const SubjectModel s = load_subject((a / "subject.bin").string());
    EXPECT_EQ(s.voxels(), 24);
    EXPECT_EQ(load_stimuli((a / "stimuli.bin").string()).rows(), 20);
    EXPECT_TRUE(load_responses((a / "responses_zscored.bin").string()).is_zscored);
}

TEST(Cli, MissingSeedExitsTwoNamingField) {
    const fs::path cfg = make_config("noseed", {{"seed: 5\n", ""}});
    const RunResult r = run("simulate " + cfg_args(cfg, kRoot / "noseed"), "noseed");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("'seed'"), std::string::npos) << r.err;
}

TEST(Cli, ZeroStepTrainingKeepsInitialization) {
    const fs::path cfg = make_config("zero", {{"steps: 4", "steps: 0"}, {"steps: 3", "steps: 0"}, {"steps: 3", "steps: 0"}});
    const fs::path out = kRoot / "zero";
    fs::remove_all(out);
    ASSERT_EQ(run("train " + cfg_args(cfg, out), "zero").code, 0);
    const Checkpoint init = load_checkpoint((out / "checkpoint_init.bin").string());
    const Checkpoint last = load_checkpoint((out / "checkpoint.bin").string());
    Decoder a = init.params, b = last.params;
    const auto ta = tensor_list(a), tb = tensor_list(b);
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i], *tb[i]);
}

TEST(Cli, ResumeMatchesUninterruptedRun) {
    const fs::path cfg = make_config("resume");
    const fs::path full = kRoot / "resume_full", split = kRoot / "resume_split";
    fs::remove_all(full);
    fs::remove_all(split);
    ASSERT_EQ(run("train " + cfg_args(cfg, full), "resume_full").code, 0);
    ASSERT_EQ(run("train " + cfg_args(cfg, split) + " --stop-after pretrain", "resume_a").code, 0);
    EXPECT_FALSE(fs::exists(split / "checkpoint.bin"));
    ASSERT_EQ(run("train " + cfg_args(cfg, split) + " --resume", "resume_b").code, 0);
    EXPECT_EQ(read_text(full / "checkpoint.bin"), read_text(split / "checkpoint.bin"));
    EXPECT_EQ(read_text(full / "train_log.jsonl"), read_text(split / "train_log.jsonl"));
}

TEST(Cli, PtOnlyPresetStopsBeforeFinetune) {
    const fs::path cfg = make_config("pt");
    const fs::path full = kRoot / "pt_full", pt = kRoot / "pt_only";
    fs::remove_all(full);
    fs::remove_all(pt);
    ASSERT_EQ(run("train " + cfg_args(cfg, full), "pt_full").code, 0);
    ASSERT_EQ(run("train " + cfg_args(cfg, pt) + " --preset pt-only", "pt_only").code, 0);
    EXPECT_EQ(load_checkpoint_header((pt / "checkpoint.bin").string()).stage, CheckpointStage::context_extension);
    EXPECT_FALSE(fs::exists(pt / "checkpoint_stage2_finetune.bin"));
    // same weights as the full run's context-extension checkpoint
    Decoder a = load_checkpoint((pt / "checkpoint.bin").string()).params;
    Decoder b = load_checkpoint((full / "checkpoint_stage1_context_extension.bin").string()).params;
    const auto ta = tensor_list(a), tb = tensor_list(b);
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i], *tb[i]);
}

TEST(Cli, OracleEvaluateIsPerfectWhenNoiseless) {
    const fs::path cfg = make_config("oracle", {{"noise_range: [0.0, 0.3]", "noise_range: [0.0, 0.0]"}});
    const fs::path out = kRoot / "oracle";
    const RunResult r = run("evaluate " + cfg_args(cfg, out) + " --oracle", "oracle");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("top1=1 "), std::string::npos) << r.out;
    EXPECT_TRUE(fs::exists(out / "evaluate.csv"));
    EXPECT_TRUE(fs::exists(out / "evaluate.json"));
}

TEST(Cli, SweepWritesOneRowPerValueAndSeed) {
    const fs::path cfg = make_config("sweep");
    const fs::path out = kRoot / "sweep";
    ASSERT_EQ(run("sweep " + cfg_args(cfg, out) + " --oracle", "sweep").code, 0);
    std::ifstream in(out / "sweep.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, kReportCsvHeader);
    int image_rows = 0, voxel_rows = 0;
    while (std::getline(in, line)) {
        image_rows += line.rfind("image-context,", 0) == 0;
        voxel_rows += line.rfind("voxel-context,", 0) == 0;
    }
    EXPECT_EQ(image_rows, 3 * 2);
    EXPECT_EQ(voxel_rows, 3 * 2);
}

TEST(Cli, CheckpointCompatibility) {
    const fs::path cfg = make_config("compat");
    const fs::path out = kRoot / "compat";
    fs::remove_all(out);
    ASSERT_EQ(run("train " + cfg_args(cfg, out), "compat_train").code, 0);
    const std::string ck = (out / "checkpoint.bin").string();

    const RunResult ok = run("evaluate " + cfg_args(cfg, out) + " --checkpoint " + ck, "compat_ok");
    EXPECT_EQ(ok.code, 0) << ok.err;

    const fs::path wide = make_config("compat_wide", {{"width: 8", "width: 12"}});
    const RunResult dim = run("evaluate " + cfg_args(wide, out) + " --checkpoint " + ck, "compat_dim");
    EXPECT_EQ(dim.code, 3);
    EXPECT_NE(dim.err.find("checkpoint: {d=4, width=8"), std::string::npos) << dim.err;
    EXPECT_NE(dim.err.find("config:     {d=4, width=12"), std::string::npos) << dim.err;
    EXPECT_EQ(run("evaluate " + cfg_args(wide, out) + " --checkpoint " + ck + " --force", "compat_dimf").code, 3);

    const fs::path reseeded = make_config("compat_seed", {{"seed: 5\n", "seed: 6\n"}});
    EXPECT_EQ(run("evaluate " + cfg_args(reseeded, out) + " --checkpoint " + ck, "compat_hash").code, 3);
    EXPECT_EQ(run("evaluate " + cfg_args(reseeded, out) + " --checkpoint " + ck + " --force", "compat_force").code, 0);
}

TEST(Cli, AttnOnUntrainedCheckpoint) {
    const fs::path cfg = make_config("attn", {{"steps: 4", "steps: 0"}, {"steps: 3", "steps: 0"}, {"steps: 3", "steps: 0"}});
    const fs::path out = kRoot / "attn";
    fs::remove_all(out);
    ASSERT_EQ(run("train " + cfg_args(cfg, out), "attn_train").code, 0);
    const RunResult r = run("attn " + cfg_args(cfg, out) + " --checkpoint " + (out / "checkpoint.bin").string(), "attn");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("spearman(attention, snr)="), std::string::npos);
    EXPECT_TRUE(fs::exists(out / "attn.csv"));
}

TEST(Cli, InvertWritesReportAndTrace) {
    const fs::path cfg = make_config("invert");
    const fs::path out = kRoot / "invert";
    const RunResult r = run("invert " + cfg_args(cfg, out), "invert");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(read_text(out / "invert.csv").find("gradient_ground_truth"), std::string::npos);
    EXPECT_NE(read_text(out / "invert_trace.jsonl").find("\"objective\""), std::string::npos);
}

TEST(Cli, GradcheckPasses) {
    const fs::path cfg = make_config("gc");
    const RunResult r = run("gradcheck " + cfg_args(cfg, kRoot / "gc"), "gc");
    EXPECT_EQ(r.code, 0) << r.out << r.err;
}
