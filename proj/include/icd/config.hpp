#pragma once

// Versioned YAML experiment configuration. Unknown keys are errors; every
// error message carries the 1-based line of the offending node.

#include "icd/evaluation.hpp"
#include "icd/loss.hpp"
#include "icd/training.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace icd {

struct CortexConfig {
    Index d = 16;
    Index voxels = 200;
    int roi_count = 8;
    double roi_tightness = 0.3;
    double noise_lo = 0.0;
    double noise_hi = 0.5;
    Index stimuli = 100;

    friend bool operator==(const CortexConfig&, const CortexConfig&) = default;
};

struct EvaluationConfig {
    std::vector<std::uint64_t> subjects{0, 1, 2};
    Index support = 64;
    Index gallery = 100;
    std::optional<std::pair<double, double>> noise_range;  // defaults to the cortex range
    std::vector<Index> voxel_sizes{25, 50, 100, 200, 400};
    std::vector<Index> image_sizes{10, 20, 50, 100, 200};
    std::vector<int> masked_rois{0};
    std::size_t inversion_steps = 2000;

    friend bool operator==(const EvaluationConfig&, const EvaluationConfig&) = default;
};

struct ExperimentConfig {
    int version = 1;
    std::uint64_t seed = 0;
    std::string output = "out";
    CortexConfig cortex;
    std::optional<double> ridge;  // stage-1 ridge; "auto" = 1e-3 * n
    DecoderConfig decoder;
    LossConfig loss;
    std::vector<CurriculumStage> curriculum;
    EvaluationConfig evaluation;

    TaskDistribution task() const {
        return TaskDistribution{cortex.d, cortex.roi_count, cortex.roi_tightness, cortex.noise_lo, cortex.noise_hi, ridge};
    }

    EvalSetup eval_setup() const {
        EvalSetup s;
        const auto noise = evaluation.noise_range.value_or(std::pair{cortex.noise_lo, cortex.noise_hi});
        s.subject = SubjectSpec{cortex.voxels, cortex.d, cortex.roi_count, cortex.roi_tightness, noise.first,
                                noise.second};
        s.support = evaluation.support;
        s.gallery = evaluation.gallery;
        s.ridge = ridge;
        return s;
    }

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline constexpr int kConfigVersion = 1;

namespace detail {

inline std::string at_line(const YAML::Node& n) {
    const auto m = n.Mark();
    return m.line >= 0 ? "line " + std::to_string(m.line + 1) + ": " : "";
}

[[noreturn]] inline void config_fail(const YAML::Node& n, const std::string& msg) {
    throw ConfigError(at_line(n) + msg);
}

class Section {
public:
    Section(const YAML::Node& node, std::string name) : node_(node), name_(std::move(name)) {
        if (!node_.IsMap()) config_fail(node_, "'" + name_ + "' must be a mapping");
        for (const auto& kv : node_) keys_.insert(kv.first.as<std::string>());
    }

    bool has(const std::string& key) const { return static_cast<bool>(node_[key]); }

    YAML::Node required(const std::string& key) {
        seen_.insert(key);
        YAML::Node n = node_[key];
        if (!n) config_fail(node_, "missing required field '" + qualified(key) + "'");
        return n;
    }

    YAML::Node optional(const std::string& key) {
        seen_.insert(key);
        return node_[key];
    }

    template <typename T>
    T get(const std::string& key) {
        return convert<T>(required(key), key);
    }

    template <typename T>
    T get_or(const std::string& key, T fallback) {
        YAML::Node n = optional(key);
        return n ? convert<T>(n, key) : fallback;
    }

    template <typename T>
    T convert(const YAML::Node& n, const std::string& key) const {
        try {
            return n.as<T>();
        } catch (const YAML::Exception&) {
            config_fail(n, "field '" + qualified(key) + "' has the wrong type");
        }
    }

    void finish() const {
        for (const auto& k : keys_)
            if (!seen_.contains(k)) {
                YAML::Node bad;
                for (const auto& kv : node_)
                    if (kv.first.as<std::string>() == k) bad = kv.first;
                config_fail(bad, "unknown field '" + qualified(k) + "'");
            }
    }

    const YAML::Node& node() const { return node_; }
    std::string qualified(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

private:
    YAML::Node node_;
    std::string name_;
    std::set<std::string> keys_, seen_;
};

inline std::pair<double, double> parse_range(Section& s, const std::string& key) {
    YAML::Node n = s.required(key);
    if (!n.IsSequence() || n.size() != 2) config_fail(n, "'" + s.qualified(key) + "' must be [lo, hi]");
    const auto lo = s.convert<double>(n[0], key);
    const auto hi = s.convert<double>(n[1], key);
    if (lo < 0.0 || hi < lo) config_fail(n, "'" + s.qualified(key) + "' must satisfy 0 <= lo <= hi");
    return {lo, hi};
}

template <typename T>
std::vector<T> parse_list(Section& s, const std::string& key, std::vector<T> fallback) {
    YAML::Node n = s.optional(key);
    if (!n) return fallback;
    if (!n.IsSequence()) config_fail(n, "'" + s.qualified(key) + "' must be a list");
    std::vector<T> out;
    for (const auto& item : n) out.push_back(s.convert<T>(item, key));
    return out;
}

inline void check(bool ok, const YAML::Node& n, const std::string& msg) {
    if (!ok) config_fail(n, msg);
}

inline CurriculumStage parse_stage(const YAML::Node& node, std::size_t index) {
    Section s(node, "curriculum[" + std::to_string(index) + "]");
    CurriculumStage st;
    const YAML::Node kind_node = s.required("kind");
    const auto kind = parse_stage_kind(s.convert<std::string>(kind_node, "kind"));
    check(kind.has_value(), kind_node, "stage kind must be pretrain, context_extension or finetune");
    st.kind = *kind;
    st.steps = s.get<std::size_t>("steps");
    st.batch_size = s.get<Index>("batch_size");
    const YAML::Node vc = s.required("voxel_context");
    if (vc.IsSequence()) {
        check(vc.size() == 2, vc, "voxel_context range must be [lo, hi]");
        st.voxel_context = {s.convert<Index>(vc[0], "voxel_context"), s.convert<Index>(vc[1], "voxel_context")};
    } else {
        const auto k = s.convert<Index>(vc, "voxel_context");
        st.voxel_context = {k, k};
    }
    st.image_context_sizes = parse_list<Index>(s, "image_context_sizes", {});
    Section lr(s.required("learning_rate"), s.qualified("learning_rate"));
    st.lr_initial = lr.get<double>("initial");
    st.lr_floor = lr.get<double>("floor");
    lr.finish();
    st.weight_decay = s.get<double>("weight_decay");
    st.seed = s.get<std::uint64_t>("seed");
    s.finish();
    try {
        st.validate();
    } catch (const ConfigError& e) {
        config_fail(node, e.what());
    }
    return st;
}

}  // namespace detail

inline ExperimentConfig parse_config(const YAML::Node& root) {
    using detail::Section;
    if (!root || root.IsNull()) throw ConfigError("configuration is empty");
    Section top(root, "");
    ExperimentConfig c;
    const YAML::Node ver = top.required("version");
    c.version = top.convert<int>(ver, "version");
    detail::check(c.version == kConfigVersion, ver, "unsupported config version " + std::to_string(c.version));
    c.seed = top.get<std::uint64_t>("seed");
    c.output = top.get_or<std::string>("output", c.output);

    {
        Section s(top.required("cortex"), "cortex");
        c.cortex.d = s.get<Index>("d");
        c.cortex.voxels = s.get<Index>("voxels");
        c.cortex.roi_count = s.get<int>("roi_count");
        c.cortex.roi_tightness = s.get<double>("roi_tightness");
        std::tie(c.cortex.noise_lo, c.cortex.noise_hi) = detail::parse_range(s, "noise_range");
        c.cortex.stimuli = s.get_or<Index>("stimuli", c.cortex.stimuli);
        detail::check(c.cortex.d >= 2, s.node(), "cortex.d must be >= 2");
        detail::check(c.cortex.roi_count >= 1 && c.cortex.voxels >= c.cortex.roi_count, s.node(),
                      "cortex requires voxels >= roi_count >= 1");
        detail::check(c.cortex.roi_tightness >= 0.0 && c.cortex.roi_tightness <= 1.0, s.node(),
                      "cortex.roi_tightness must lie in [0, 1]");
        detail::check(c.cortex.stimuli >= 2, s.node(), "cortex.stimuli must be >= 2");
        s.finish();
    }
    if (YAML::Node n = top.optional("stage1")) {
        Section s(n, "stage1");
        const YAML::Node r = s.required("ridge");
        if (r.IsScalar() && r.Scalar() == "auto") {
            c.ridge.reset();
        } else {
            c.ridge = s.convert<double>(r, "ridge");
            detail::check(*c.ridge >= 0.0, r, "stage1.ridge must be >= 0");
        }
        s.finish();
    }
    {
        Section s(top.required("decoder"), "decoder");
        c.decoder.d = c.cortex.d;
        c.decoder.width = s.get<Index>("width");
        c.decoder.layers = s.get<Index>("layers");
        c.decoder.heads = s.get<Index>("heads");
        c.decoder.registers = s.get<Index>("registers");
        c.decoder.ffn_hidden = s.get<Index>("ffn_hidden");
        c.decoder.dropout = s.get<double>("dropout");
        try {
            c.decoder.validate();
        } catch (const ParameterError& e) {
            detail::config_fail(s.node(), e.what());
        }
        s.finish();
    }
    if (YAML::Node n = top.optional("loss")) {
        Section s(n, "loss");
        c.loss.alpha = s.get<double>("alpha");
        c.loss.tau = s.get<double>("tau");
        try {
            c.loss.validate();
        } catch (const ParameterError& e) {
            detail::config_fail(n, e.what());
        }
        s.finish();
    }
    if (YAML::Node n = top.optional("curriculum")) {
        detail::check(n.IsSequence(), n, "'curriculum' must be a list of stages");
        for (std::size_t i = 0; i < n.size(); ++i) c.curriculum.push_back(detail::parse_stage(n[i], i));
        for (std::size_t i = 1; i < c.curriculum.size(); ++i)
            detail::check(static_cast<int>(c.curriculum[i].kind) >= static_cast<int>(c.curriculum[i - 1].kind), n[i],
                          "stages must run pretrain -> context_extension -> finetune");
    }
    if (YAML::Node n = top.optional("evaluation")) {
        Section s(n, "evaluation");
        c.evaluation.subjects = detail::parse_list<std::uint64_t>(s, "subjects", c.evaluation.subjects);
        c.evaluation.support = s.get_or<Index>("support", c.evaluation.support);
        c.evaluation.gallery = s.get_or<Index>("gallery", c.evaluation.gallery);
        if (s.has("noise_range")) c.evaluation.noise_range = detail::parse_range(s, "noise_range");
        c.evaluation.voxel_sizes = detail::parse_list<Index>(s, "voxel_sizes", c.evaluation.voxel_sizes);
        c.evaluation.image_sizes = detail::parse_list<Index>(s, "image_sizes", c.evaluation.image_sizes);
        c.evaluation.masked_rois = detail::parse_list<int>(s, "masked_rois", c.evaluation.masked_rois);
        c.evaluation.inversion_steps = s.get_or<std::size_t>("inversion_steps", c.evaluation.inversion_steps);
        detail::check(!c.evaluation.subjects.empty(), n, "evaluation.subjects must be non-empty");
        detail::check(c.evaluation.support >= 1, n, "evaluation.support must be >= 1");
        detail::check(c.evaluation.gallery >= 5, n, "evaluation.gallery must be >= 5");
        s.finish();
    }
    top.finish();
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError("line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    return parse_config(root);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

namespace detail {

template <typename T>
void emit_flow_list(YAML::Emitter& out, const std::vector<T>& v) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& x : v) out << x;
    out << YAML::EndSeq;
}

}  // namespace detail

/// Canonical YAML text; parse_config_text(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& c) {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    out << YAML::Key << "version" << YAML::Value << c.version;
    out << YAML::Key << "seed" << YAML::Value << c.seed;
    out << YAML::Key << "output" << YAML::Value << c.output;
    out << YAML::Key << "cortex" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "d" << YAML::Value << c.cortex.d;
    out << YAML::Key << "voxels" << YAML::Value << c.cortex.voxels;
    out << YAML::Key << "roi_count" << YAML::Value << c.cortex.roi_count;
    out << YAML::Key << "roi_tightness" << YAML::Value << c.cortex.roi_tightness;
    out << YAML::Key << "noise_range" << YAML::Value;
    detail::emit_flow_list(out, std::vector<double>{c.cortex.noise_lo, c.cortex.noise_hi});
    out << YAML::Key << "stimuli" << YAML::Value << c.cortex.stimuli;
    out << YAML::EndMap;
    out << YAML::Key << "stage1" << YAML::Value << YAML::BeginMap << YAML::Key << "ridge" << YAML::Value;
    if (c.ridge)
        out << *c.ridge;
    else
        out << "auto";
    out << YAML::EndMap;
    out << YAML::Key << "decoder" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "width" << YAML::Value << c.decoder.width;
    out << YAML::Key << "layers" << YAML::Value << c.decoder.layers;
    out << YAML::Key << "heads" << YAML::Value << c.decoder.heads;
    out << YAML::Key << "registers" << YAML::Value << c.decoder.registers;
    out << YAML::Key << "ffn_hidden" << YAML::Value << c.decoder.ffn_hidden;
    out << YAML::Key << "dropout" << YAML::Value << c.decoder.dropout;
    out << YAML::EndMap;
    out << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "alpha" << YAML::Value << c.loss.alpha;
    out << YAML::Key << "tau" << YAML::Value << c.loss.tau;
    out << YAML::EndMap;
    out << YAML::Key << "curriculum" << YAML::Value << YAML::BeginSeq;
    for (const auto& st : c.curriculum) {
        out << YAML::BeginMap;
        out << YAML::Key << "kind" << YAML::Value << std::string(to_string(st.kind));
        out << YAML::Key << "steps" << YAML::Value << st.steps;
        out << YAML::Key << "batch_size" << YAML::Value << st.batch_size;
        out << YAML::Key << "voxel_context" << YAML::Value;
        if (st.voxel_context.fixed())
            out << st.voxel_context.lo;
        else
            detail::emit_flow_list(out, std::vector<Index>{st.voxel_context.lo, st.voxel_context.hi});
        out << YAML::Key << "image_context_sizes" << YAML::Value;
        detail::emit_flow_list(out, st.image_context_sizes);
        out << YAML::Key << "learning_rate" << YAML::Value << YAML::BeginMap;
        out << YAML::Key << "initial" << YAML::Value << st.lr_initial;
        out << YAML::Key << "floor" << YAML::Value << st.lr_floor;
        out << YAML::EndMap;
        out << YAML::Key << "weight_decay" << YAML::Value << st.weight_decay;
        out << YAML::Key << "seed" << YAML::Value << st.seed;
        out << YAML::EndMap;
    }
    out << YAML::EndSeq;
    const auto& e = c.evaluation;
    out << YAML::Key << "evaluation" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "subjects" << YAML::Value;
    detail::emit_flow_list(out, e.subjects);
    out << YAML::Key << "support" << YAML::Value << e.support;
    out << YAML::Key << "gallery" << YAML::Value << e.gallery;
    if (e.noise_range) {
        out << YAML::Key << "noise_range" << YAML::Value;
        detail::emit_flow_list(out, std::vector<double>{e.noise_range->first, e.noise_range->second});
    }
    out << YAML::Key << "voxel_sizes" << YAML::Value;
    detail::emit_flow_list(out, e.voxel_sizes);
    out << YAML::Key << "image_sizes" << YAML::Value;
    detail::emit_flow_list(out, e.image_sizes);
    out << YAML::Key << "masked_rois" << YAML::Value;
    detail::emit_flow_list(out, e.masked_rois);
    out << YAML::Key << "inversion_steps" << YAML::Value << e.inversion_steps;
    out << YAML::EndMap;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

/// 64-bit FNV-1a of the canonical config text with the output directory and
/// evaluation grids reset, so it identifies the trained model only.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    ExperimentConfig copy = c;
    copy.output.clear();
    copy.evaluation = EvaluationConfig{};
    const std::string text = serialize_config(copy);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Curriculum presets: "full" keeps every stage, "pt-only" drops finetune.
inline std::vector<CurriculumStage> apply_preset(const std::vector<CurriculumStage>& stages, const std::string& preset) {
    if (preset == "full" || preset.empty()) return stages;
    if (preset == "pt-only") {
        std::vector<CurriculumStage> out;
        for (const auto& s : stages)
            if (s.kind != StageKind::finetune) out.push_back(s);
        return out;
    }
    throw ConfigError("unknown training preset '" + preset + "'");
}

}  // namespace icd
