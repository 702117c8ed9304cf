#include "icd/config.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace icd;

namespace {

std::string tiny_text() {
    std::ifstream in(std::string(ICD_SOURCE_DIR) + "/configs/tiny.yaml");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
    const auto pos = text.find(from);
    EXPECT_NE(pos, std::string::npos) << from;
    if (pos != std::string::npos) text.replace(pos, from.size(), to);
    return text;
}

std::string error_of(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, ParsesTinyExample) {
    const ExperimentConfig c = parse_config_text(tiny_text());
    EXPECT_EQ(c.seed, 5u);
    EXPECT_EQ(c.cortex.d, 4);
    EXPECT_EQ(c.decoder.d, 4);
    EXPECT_FALSE(c.ridge.has_value());
    ASSERT_EQ(c.curriculum.size(), 3u);
    EXPECT_EQ(c.curriculum[0].voxel_context, (VoxelContext{8, 8}));
    EXPECT_EQ(c.curriculum[2].image_context_sizes, (std::vector<Index>{8, 16}));
    EXPECT_EQ(c.evaluation.gallery, 10);
}

TEST(Config, RoundTrip) {
    ExperimentConfig c = parse_config_text(tiny_text());
    EXPECT_EQ(parse_config_text(serialize_config(c)), c);
    c.ridge = 0.125;
    c.evaluation.noise_range = std::pair{0.1, 0.5};
    c.loss.tau = 0.07;
    EXPECT_EQ(parse_config_text(serialize_config(c)), c);
}

TEST(Config, MissingSeedNamesField) {
    const std::string msg = error_of(replace(tiny_text(), "seed: 5\n", ""));
    EXPECT_NE(msg.find("'seed'"), std::string::npos) << msg;
}

TEST(Config, UnknownFieldIsErrorWithLine) {
    const std::string msg = error_of(replace(tiny_text(), "  width: 8\n", "  width: 8\n  depth: 3\n"));
    EXPECT_NE(msg.find("decoder.depth"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line "), std::string::npos) << msg;
}

TEST(Config, InvalidValuesRejected) {
    EXPECT_NE(error_of(replace(tiny_text(), "heads: 2", "heads: 3")), "");
    EXPECT_NE(error_of(replace(tiny_text(), "version: 1", "version: 2")), "");
    EXPECT_NE(error_of(replace(tiny_text(), "noise_range: [0.0, 0.3]", "noise_range: [0.5, 0.3]")), "");
    EXPECT_NE(error_of(replace(tiny_text(), "    image_context_sizes: [8, 16]\n", "")), "");
    EXPECT_NE(error_of(replace(tiny_text(), "width: 8", "width: eight")), "");
    EXPECT_NE(error_of("seed: [1"), "");
    EXPECT_NE(error_of(""), "");
}

TEST(Config, HashIgnoresOutputAndEvaluation) {
    const ExperimentConfig c = parse_config_text(tiny_text());
    ExperimentConfig moved = c;
    moved.output = "elsewhere";
    moved.evaluation.gallery = 50;
    EXPECT_EQ(config_hash(c), config_hash(moved));
    ExperimentConfig reseeded = c;
    reseeded.seed = 6;
    EXPECT_NE(config_hash(c), config_hash(reseeded));
}

TEST(Config, Presets) {
    const ExperimentConfig c = parse_config_text(tiny_text());
    EXPECT_EQ(apply_preset(c.curriculum, "full"), c.curriculum);
    const auto pt = apply_preset(c.curriculum, "pt-only");
    ASSERT_EQ(pt.size(), 2u);
    EXPECT_EQ(pt.back().kind, StageKind::context_extension);
    EXPECT_THROW(apply_preset(c.curriculum, "bogus"), ConfigError);
}
