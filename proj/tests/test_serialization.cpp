#include "icd/serialization.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace icd;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "icd_serialization_test";
    fs::create_directories(dir);
    return dir / name;
}

std::vector<char> file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Containers, SubjectRoundTrip) {
    const SubjectModel s = sample_subject(3, SubjectSpec{25, 5, 4, 0.3, 0.1, 0.4});
    const fs::path p = temp_file("subject.bin");
    save_subject(p.string(), s);
    EXPECT_EQ(load_subject(p.string()), s);
}

TEST(Containers, HeaderLayout) {
    const Matrix stim = sample_stimuli(4, 7, 3);
    const fs::path p = temp_file("stimuli.bin");
    save_stimuli(p.string(), stim, 99);
    const auto bytes = file_bytes(p);
    ASSERT_EQ(bytes.size(), 64u + 7u * 3u * sizeof(double));
    EXPECT_EQ(std::string(bytes.data(), 4), "ICDC");
    std::uint64_t rows = 0, cols = 0, seed = 0;
    std::memcpy(&rows, bytes.data() + 16, 8);
    std::memcpy(&cols, bytes.data() + 24, 8);
    std::memcpy(&seed, bytes.data() + 32, 8);
    EXPECT_EQ(rows, 7u);
    EXPECT_EQ(cols, 3u);
    EXPECT_EQ(seed, 99u);
    double first = 0.0, second = 0.0;
    std::memcpy(&first, bytes.data() + 64, 8);
    std::memcpy(&second, bytes.data() + 72, 8);
    EXPECT_EQ(first, stim(0, 0));
    EXPECT_EQ(second, stim(0, 1));  // row-major payload
    EXPECT_EQ(load_stimuli(p.string()), stim);
}

TEST(Containers, ResponsesKeepZscoreFlag) {
    const SubjectModel s = sample_subject(3, SubjectSpec{6, 4, 2, 0.3, 0.1, 0.4});
    const ResponseMatrix r = zscore_responses(simulate_responses(s, sample_stimuli(5, 9, 4), 6));
    const fs::path p = temp_file("responses.bin");
    save_responses(p.string(), r, 3, 2);
    EXPECT_EQ(load_responses(p.string()), r);
}

TEST(Containers, EstimatedWeightsRoundTrip) {
    EstimatedWeights e;
    e.values = sample_stimuli(8, 5, 4);
    e.seed = 12;
    e.roi_count = 3;
    e.ridge = 0.064;
    e.context_size = 64;
    const fs::path p = temp_file("weights.bin");
    save_estimated_weights(p.string(), e);
    const EstimatedWeights back = load_estimated_weights(p.string());
    EXPECT_EQ(back.values, e.values);
    EXPECT_EQ(back.ridge, e.ridge);
    EXPECT_EQ(back.context_size, 64u);
}

TEST(Containers, KindMismatchRejected) {
    const fs::path p = temp_file("kind.bin");
    save_stimuli(p.string(), sample_stimuli(1, 3, 3), 0);
    EXPECT_THROW(load_responses(p.string()), FormatError);
}

TEST(Containers, TruncatedFileRejected) {
    const fs::path p = temp_file("short.bin");
    save_stimuli(p.string(), sample_stimuli(1, 3, 3), 0);
    fs::resize_file(p, 70);
    EXPECT_THROW(load_stimuli(p.string()), FormatError);
    EXPECT_THROW(load_stimuli(temp_file("missing.bin").string()), FormatError);
}

TEST(Checkpoint, BitExactRoundTrip) {
    Checkpoint ck{init_params<double>(5, DecoderConfig{6, 16, 2, 4, 3, 24, 0.1}), CheckpointStage::context_extension,
                  0x1234abcdULL};
    const fs::path p = temp_file("ck.bin");
    save_checkpoint(p.string(), ck);
    const Checkpoint back = load_checkpoint(p.string());
    EXPECT_EQ(back.stage, ck.stage);
    EXPECT_EQ(back.config_hash, ck.config_hash);
    EXPECT_EQ(back.params.config, ck.params.config);
    const fs::path q = temp_file("ck2.bin");
    save_checkpoint(q.string(), back);
    EXPECT_EQ(file_bytes(p), file_bytes(q));

    const CheckpointHeader h = load_checkpoint_header(p.string());
    EXPECT_EQ(h.config, ck.params.config);
    EXPECT_EQ(h.stage, CheckpointStage::context_extension);
}

TEST(Checkpoint, CorruptTensorCountRejected) {
    Checkpoint ck{init_params<double>(5, DecoderConfig{4, 8, 1, 2, 1, 8, 0.0}), CheckpointStage::init, 0};
    auto bytes = encode_checkpoint(ck);
    bytes.pop_back();
    const fs::path p = temp_file("bad.bin");
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    EXPECT_THROW(load_checkpoint(p.string()), FormatError);
}
