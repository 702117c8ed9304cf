// Command-line driver: simulate, train, evaluate, sweep, invert, attn, gradcheck.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
// 3 checkpoint incompatible with the configuration.

#include "icd/icd.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace icd;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMismatch = 3;

struct Options {
    std::string config;
    std::string out;
    std::string checkpoint;
    std::optional<std::uint64_t> seed;
    bool oracle = false;
    std::string preset = "full";
    bool force = false;
    bool resume = false;
    std::string stop_after;
    double epsilon = 1e-5;
};

class MismatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

ExperimentConfig load(const Options& o) {
    ExperimentConfig c = load_config(o.config);
    if (o.seed) c.seed = *o.seed;
    if (!o.out.empty()) c.output = o.out;
    return c;
}

fs::path prepare_output(const ExperimentConfig& c) {
    fs::path dir(c.output);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + p.string());
    out << text;
}

std::string describe(const DecoderConfig& c, CheckpointStage stage, std::uint64_t hash) {
    std::ostringstream s;
    s << "{d=" << c.d << ", width=" << c.width << ", layers=" << c.layers << ", heads=" << c.heads
      << ", registers=" << c.registers << ", ffn_hidden=" << c.ffn_hidden << ", dropout=" << format_number(c.dropout)
      << ", stage=" << to_string(stage) << ", config_hash=" << std::hex << hash << std::dec << "}";
    return s.str();
}

Decoder load_compatible_checkpoint(const Options& o, const ExperimentConfig& c) {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required (or pass --oracle)");
    const CheckpointHeader h = load_checkpoint_header(o.checkpoint);
    const std::uint64_t hash = config_hash(c);
    if (!(h.config == c.decoder) || (h.config_hash != hash && !o.force)) {
        std::ostringstream msg;
        msg << "checkpoint is incompatible with the configuration\n"
            << "  checkpoint: " << describe(h.config, h.stage, h.config_hash) << "\n"
            << "  config:     " << describe(c.decoder, h.stage, hash);
        if (h.config == c.decoder) msg << "\n  (config hash differs; pass --force to evaluate anyway)";
        throw MismatchError(msg.str());
    }
    return load_checkpoint(o.checkpoint).params;
}

std::string quartiles(const Vector& snr) {
    std::vector<double> v(snr.data(), snr.data() + snr.size());
    std::sort(v.begin(), v.end());
    auto q = [&](double f) { return v[static_cast<std::size_t>(f * static_cast<double>(v.size() - 1))]; };
    return "snr_q1=" + format_number(q(0.25)) + " snr_median=" + format_number(q(0.5)) +
           " snr_q3=" + format_number(q(0.75));
}

int cmd_simulate(const Options& o) {
    const ExperimentConfig c = load(o);
    const fs::path dir = prepare_output(c);
    const SubjectSpec spec{c.cortex.voxels, c.cortex.d, c.cortex.roi_count, c.cortex.roi_tightness, c.cortex.noise_lo,
                           c.cortex.noise_hi};
    const SubjectModel subject = sample_subject(c.seed, spec);
    const std::uint64_t stim_seed = derive_seed(c.seed, 1);
    const Matrix stimuli = sample_stimuli(stim_seed, c.cortex.stimuli, c.cortex.d);
    const ResponseMatrix responses = simulate_responses(subject, stimuli, derive_seed(c.seed, 2));
    const double ridge = c.ridge.value_or(default_ridge(stimuli.rows()));
    const EstimatedWeights est{estimate_all_voxels(ImageContext{stimuli, responses.values}, ridge), c.seed,
                               static_cast<std::uint64_t>(c.cortex.roi_count), ridge,
                               static_cast<std::uint64_t>(stimuli.rows())};

    save_subject((dir / "subject.bin").string(), subject);
    save_stimuli((dir / "stimuli.bin").string(), stimuli, stim_seed);
    save_responses((dir / "responses.bin").string(), responses, c.seed, static_cast<std::uint64_t>(c.cortex.roi_count));
    save_responses((dir / "responses_zscored.bin").string(), zscore_responses(responses), c.seed,
                   static_cast<std::uint64_t>(c.cortex.roi_count));
    save_estimated_weights((dir / "weights_estimated.bin").string(), est);

    std::cout << "K=" << subject.voxels() << " d=" << subject.dim() << " roi_count=" << subject.roi_count << ' '
              << quartiles(voxel_snr(subject, stimuli)) << '\n';
    return 0;
}

std::string checkpoint_name(std::size_t index, StageKind kind) {
    return "checkpoint_stage" + std::to_string(index) + "_" + std::string(to_string(kind)) + ".bin";
}

CheckpointStage checkpoint_stage(StageKind k) {
    switch (k) {
        case StageKind::pretrain: return CheckpointStage::pretrain;
        case StageKind::context_extension: return CheckpointStage::context_extension;
        case StageKind::finetune: return CheckpointStage::finetune;
    }
    return CheckpointStage::init;
}

int cmd_train(const Options& o) {
    const ExperimentConfig c = load(o);
    if (o.preset == "inversion") throw ConfigError("preset 'inversion' has no training; use it with evaluate");
    const std::vector<CurriculumStage> stages = apply_preset(c.curriculum, o.preset);
    const fs::path dir = prepare_output(c);
    const std::uint64_t hash = config_hash(c);
    const fs::path log_path = dir / "train_log.jsonl";

    Decoder params = init_params<double>(c.seed, c.decoder);
    save_checkpoint((dir / "checkpoint_init.bin").string(), Checkpoint{params, CheckpointStage::init, hash});

    std::size_t first = 0;
    std::set<std::string> done_stages;
    if (o.resume) {
        for (std::size_t i = stages.size(); i-- > 0;) {
            const fs::path p = dir / checkpoint_name(i, stages[i].kind);
            if (!fs::exists(p)) continue;
            Checkpoint ck = load_checkpoint(p.string());
            if (ck.config_hash != hash || !(ck.params.config == c.decoder))
                throw MismatchError("resume checkpoint " + p.string() + " was written under a different configuration");
            params = std::move(ck.params);
            first = i + 1;
            break;
        }
        for (std::size_t i = 0; i < first; ++i) done_stages.insert(std::string(to_string(stages[i].kind)));
        std::cout << "resuming after stage " << first << " of " << stages.size() << '\n';
    }

    // Keep log lines of completed stages, drop anything after them.
    std::vector<std::string> kept;
    if (o.resume && fs::exists(log_path)) {
        std::ifstream in(log_path);
        for (std::string line; std::getline(in, line);) {
            const auto j = nlohmann::json::parse(line);
            if (done_stages.contains(j.at("stage").get<std::string>())) kept.push_back(line);
        }
    }
    std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
    for (const auto& line : kept) log << line << '\n';

    std::size_t stage_index = first;
    std::optional<std::size_t> stop_index;
    if (!o.stop_after.empty()) {
        const auto kind = parse_stage_kind(o.stop_after);
        if (!kind) throw ConfigError("--stop-after must name a stage kind");
        for (std::size_t i = 0; i < stages.size(); ++i)
            if (stages[i].kind == *kind) stop_index = i;
        if (!stop_index) throw ConfigError("--stop-after names a stage that is not in the curriculum");
    }
    const TaskDistribution task = c.task();
    const std::size_t last = stop_index ? *stop_index + 1 : stages.size();
    for (std::size_t i = first; i < last; ++i) {
        StageResult<double> r = run_stage(std::move(params), stages[i], task, c.loss,
                                          [&](const LogRecord& rec) { log << log_line(rec) << '\n'; });
        params = std::move(r.params);
        save_checkpoint((dir / checkpoint_name(i, stages[i].kind)).string(),
                        Checkpoint{params, checkpoint_stage(stages[i].kind), hash});
        double tail = 0.0;
        const std::size_t n = std::min<std::size_t>(100, r.log.size());
        for (std::size_t k = r.log.size() - n; k < r.log.size(); ++k) tail += r.log[k].loss;
        std::cout << "stage " << i << " (" << to_string(stages[i].kind) << "): " << r.log.size() << " steps";
        if (n) std::cout << ", final-100 mean loss " << format_number(tail / static_cast<double>(n));
        std::cout << '\n';
        stage_index = i + 1;
    }
    log.close();
    if (stage_index < stages.size()) {
        std::cout << "stopped after stage " << stage_index - 1 << "; rerun with --resume to continue\n";
        return 0;
    }
    const CheckpointStage final_tag = stages.empty() ? CheckpointStage::init : checkpoint_stage(stages.back().kind);
    save_checkpoint((dir / "checkpoint.bin").string(), Checkpoint{params, final_tag, hash});
    std::cout << "wrote " << (dir / "checkpoint.bin").string() << '\n';
    return 0;
}

struct ModelChoice {
    std::string label;
    std::optional<Decoder> params;
    Predictor predictor;
};

ModelChoice choose_model(const Options& o, const ExperimentConfig& c) {
    ModelChoice m;
    if (o.oracle) {
        m.label = "oracle";
        m.predictor = oracle_predictor(0.0);
    } else if (o.preset == "inversion") {
        m.label = "inversion";
        m.predictor = gradient_predictor(c.evaluation.inversion_steps);
    } else {
        m.label = "decoder";
        m.params = load_compatible_checkpoint(o, c);
        m.predictor = learned_predictor(*m.params);
    }
    return m;
}

int cmd_evaluate(const Options& o) {
    const ExperimentConfig c = load(o);
    ModelChoice m = choose_model(o, c);
    if (m.params) m.predictor = learned_predictor(*m.params);
    const fs::path dir = prepare_output(c);
    const EvalSetup setup = c.eval_setup();
    std::ostringstream csv;
    csv << kReportCsvHeader << '\n';
    nlohmann::ordered_json doc;
    doc["model"] = m.label;
    doc["subjects"] = nlohmann::ordered_json::array();
    double top1 = 0.0, cosine = 0.0;
    for (std::uint64_t s : c.evaluation.subjects) {
        const EvalInstance e = make_eval_instance(setup, s);
        const RetrievalReport r = evaluate_subject(m.predictor, e, setup, all_voxels(e.subject.voxels()));
        write_report_row(csv, "subject", static_cast<double>(s), s, r);
        auto j = to_json(r);
        j["subject"] = s;
        doc["subjects"].push_back(j);
        top1 += r.top1;
        cosine += r.mean_cosine;
    }
    const double n = static_cast<double>(c.evaluation.subjects.size());
    doc["mean_top1"] = top1 / n;
    doc["mean_cosine"] = cosine / n;
    write_text(dir / "evaluate.csv", csv.str());
    write_text(dir / "evaluate.json", doc.dump(2) + "\n");
    std::cout << m.label << ": top1=" << format_number(top1 / n) << " mean_cosine=" << format_number(cosine / n)
              << " chance=" << format_number(1.0 / static_cast<double>(setup.gallery)) << '\n';
    return 0;
}

int cmd_sweep(const Options& o) {
    const ExperimentConfig c = load(o);
    ModelChoice m = choose_model(o, c);
    if (m.params) m.predictor = learned_predictor(*m.params);
    const fs::path dir = prepare_output(c);
    EvalSetup setup = c.eval_setup();
    auto voxels = c.evaluation.voxel_sizes;
    if (!voxels.empty()) setup.subject.voxels = std::max(setup.subject.voxels, voxels.back());
    const ContextSweep sw = context_sweep(m.predictor, setup, c.evaluation.image_sizes, voxels, c.evaluation.subjects);
    std::ostringstream csv;
    csv << kReportCsvHeader << '\n';
    write_sweep_csv(csv, sw.image_axis, false);
    write_sweep_csv(csv, sw.voxel_axis, false);
    nlohmann::ordered_json doc;
    doc["model"] = m.label;
    doc["image_axis"] = to_json(sw.image_axis);
    doc["voxel_axis"] = to_json(sw.voxel_axis);
    write_text(dir / "sweep.csv", csv.str());
    write_text(dir / "sweep.json", doc.dump(2) + "\n");
    auto rho = [](const SweepTable& t) {
        const auto r = t.top1_correlation();
        return r ? format_number(*r) : std::string("undefined");
    };
    std::cout << m.label << ": spearman(image-context, top1)=" << rho(sw.image_axis)
              << " spearman(voxel-context, top1)=" << rho(sw.voxel_axis) << '\n';
    return 0;
}

int cmd_invert(const Options& o) {
    const ExperimentConfig c = load(o);
    const fs::path dir = prepare_output(c);
    const EvalSetup setup = c.eval_setup();
    std::ostringstream csv, trace;
    csv << kReportCsvHeader << '\n';
    const std::size_t steps = c.evaluation.inversion_steps;
    for (std::uint64_t s : c.evaluation.subjects) {
        const EvalInstance e = make_eval_instance(setup, s);
        const Matrix estimated = estimate_all_voxels(e.support, setup.ridge_for(e.support.size()));
        const std::vector<std::pair<std::string, const Matrix*>> variants = {{"estimated", &estimated},
                                                                             {"ground_truth", &e.subject.weights}};
        for (const auto& [label, weights] : variants) {
            const Index M = e.test_stimuli.rows();
            Matrix closed(M, setup.subject.dim), grad(M, setup.subject.dim);
            const double step = stable_step_size(*weights);
            for (Index t = 0; t < M; ++t) {
                const Vector b = e.test_responses.col(t);
                closed.row(t) = invert_least_squares(*weights, b, 0.0).unit.transpose();
                const auto g = invert_gradient(*weights, b, Vector::Zero(setup.subject.dim), steps, step);
                grad.row(t) = g.solution.unit.transpose();
                if (t == 0) {
                    for (std::size_t k = 0; k < g.trace.size(); ++k) {
                        nlohmann::ordered_json j;
                        j["subject"] = s;
                        j["weights"] = label;
                        j["stimulus"] = t;
                        j["step"] = k;
                        j["objective"] = g.trace[k];
                        trace << j.dump() << '\n';
                    }
                }
            }
            std::vector<Index> truth(static_cast<std::size_t>(M));
            std::iota(truth.begin(), truth.end(), Index{0});
            const auto rc = retrieval_metrics(closed, e.test_stimuli, truth);
            const auto rg = retrieval_metrics(grad, e.test_stimuli, truth);
            write_report_row(csv, "closed_form_" + label, static_cast<double>(s), s, rc);
            write_report_row(csv, "gradient_" + label, static_cast<double>(s), s, rg);
            std::cout << "subject " << s << " (" << label << " weights): closed-form top1=" << format_number(rc.top1)
                      << " gradient top1=" << format_number(rg.top1) << '\n';
        }
    }
    write_text(dir / "invert.csv", csv.str());
    write_text(dir / "invert_trace.jsonl", trace.str());
    return 0;
}

int cmd_attn(const Options& o) {
    const ExperimentConfig c = load(o);
    const Decoder params = load_compatible_checkpoint(o, c);
    const fs::path dir = prepare_output(c);
    const EvalSetup setup = c.eval_setup();
    std::ostringstream csv;
    csv << "subject,voxel,roi,snr,attention\n";
    nlohmann::ordered_json doc;
    doc["subjects"] = nlohmann::ordered_json::array();
    for (std::uint64_t s : c.evaluation.subjects) {
        const EvalInstance e = make_eval_instance(setup, s);
        const SelectivityReport r = attention_selectivity(params, e, setup);
        for (Index k = 0; k < r.snr.size(); ++k)
            csv << s << ',' << k << ',' << e.subject.roi_labels[static_cast<std::size_t>(k)] << ','
                << format_number(r.snr(k)) << ',' << format_number(r.mean_attention(k)) << '\n';
        nlohmann::ordered_json j;
        j["subject"] = s;
        j["spearman_attention_snr"] = r.correlation ? nlohmann::ordered_json(*r.correlation) : nlohmann::ordered_json();
        doc["subjects"].push_back(j);
        std::cout << "subject " << s << ": spearman(attention, snr)="
                  << (r.correlation ? format_number(*r.correlation) : std::string("undefined (degenerate)")) << '\n';
    }
    write_text(dir / "attn.csv", csv.str());
    write_text(dir / "attn.json", doc.dump(2) + "\n");
    return 0;
}

int cmd_gradcheck(const Options& o) {
    const ExperimentConfig c = load(o);
    const Decoder params = init_params<double>(c.seed, c.decoder);
    require(params.parameter_count() <= 100000, "gradcheck: model too large for finite differences");
    CurriculumStage stage;
    stage.voxel_context = {4, 12};
    std::vector<Episode> batch;
    for (std::uint64_t i = 0; i < 4; ++i) batch.push_back(make_episode(c.task(), stage, derive_seed(c.seed, 31, i)));
    const GradCheckResult r = grad_check(params, batch, c.loss, o.epsilon);
    std::cout << "parameters=" << r.checked << " max_rel_error=" << format_number(r.max_rel_error) << " worst="
              << r.worst_tensor << '[' << r.worst_index << "]\n";
    return r.max_rel_error < 1e-4 ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"In-context decoding of synthetic voxel responses"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub, bool needs_checkpoint) {
        sub->add_option("--config", o.config, "Experiment configuration (YAML)")->required();
        sub->add_option("--out", o.out, "Output directory (overrides the config)");
        sub->add_option("--seed", o.seed, "Global seed override");
        if (needs_checkpoint) {
            sub->add_option("--checkpoint", o.checkpoint, "Decoder checkpoint");
            sub->add_flag("--force", o.force, "Accept a checkpoint written under a different config hash");
        }
    };
    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic subject, stimuli and responses");
    add_common(simulate, false);
    auto* train = app.add_subcommand("train", "Run the training curriculum");
    add_common(train, false);
    train->add_option("--preset", o.preset, "Curriculum preset")->check(CLI::IsMember({"full", "pt-only"}));
    train->add_flag("--resume", o.resume, "Continue from the latest stage checkpoint in the output directory");
    train->add_option("--stop-after", o.stop_after, "Stop after the named stage kind");
    auto* evaluate = app.add_subcommand("evaluate", "Retrieval evaluation on held-out subjects");
    auto* sweep = app.add_subcommand("sweep", "Image- and voxel-context scaling sweeps");
    for (auto* sub : {evaluate, sweep}) {
        add_common(sub, true);
        sub->add_flag("--oracle", o.oracle, "Use closed-form inversion instead of the learned decoder");
        sub->add_option("--preset", o.preset, "Model preset")->check(CLI::IsMember({"full", "pt-only", "inversion"}));
    }
    auto* invert = app.add_subcommand("invert", "Closed-form and gradient inversion baselines");
    add_common(invert, false);
    auto* attn = app.add_subcommand("attn", "Attention-map extraction and SNR selectivity");
    add_common(attn, true);
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the decoder gradients");
    add_common(gradcheck, false);
    gradcheck->add_option("--epsilon", o.epsilon, "Central-difference step")->check(CLI::Range(1e-6, 1e-3));

    CLI11_PARSE(app, argc, argv);

    try {
        if (*simulate) return cmd_simulate(o);
        if (*train) return cmd_train(o);
        if (*evaluate) return cmd_evaluate(o);
        if (*sweep) return cmd_sweep(o);
        if (*invert) return cmd_invert(o);
        if (*attn) return cmd_attn(o);
        if (*gradcheck) return cmd_gradcheck(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const MismatchError& e) {
        std::cerr << e.what() << '\n';
        return kExitMismatch;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
