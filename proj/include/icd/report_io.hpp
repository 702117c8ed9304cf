#pragma once

// Text emitters: CSV report rows, JSON documents and line-delimited logs.
// Numbers are written with the shortest round-trip representation so equal
// inputs always give byte-identical files.

#include "icd/evaluation.hpp"
#include "icd/training.hpp"

#include <json.hpp>

#include <charconv>
#include <ostream>
#include <string>

namespace icd {

inline std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline constexpr const char* kReportCsvHeader = "axis,value,seed,top1,top5,mean_rank,mean_cosine,N";

inline void write_report_row(std::ostream& out, std::string_view axis, double value, std::uint64_t seed,
                             const RetrievalReport& r) {
    out << axis << ',' << format_number(value) << ',' << seed << ',' << format_number(r.top1) << ','
        << format_number(r.top5) << ',' << format_number(r.mean_rank) << ',' << format_number(r.mean_cosine) << ','
        << r.gallery_size << '\n';
}

inline void write_sweep_csv(std::ostream& out, const SweepTable& table, bool header = true) {
    if (header) out << kReportCsvHeader << '\n';
    for (const auto& c : table.cells) write_report_row(out, to_string(table.axis), c.value, c.seed, c.report);
}

inline nlohmann::ordered_json to_json(const RetrievalReport& r) {
    nlohmann::ordered_json j;
    j["top1"] = r.top1;
    j["top5"] = r.top5;
    j["mean_rank"] = r.mean_rank;
    j["mean_cosine"] = r.mean_cosine;
    j["N"] = r.gallery_size;
    j["trials"] = r.trials;
    return j;
}

inline nlohmann::ordered_json to_json(const SweepTable& t) {
    nlohmann::ordered_json j;
    j["axis"] = std::string(to_string(t.axis));
    j["values"] = t.values;
    j["seeds"] = t.seeds;
    const auto rho = t.top1_correlation();
    j["spearman_top1"] = rho ? nlohmann::ordered_json(*rho) : nlohmann::ordered_json(nullptr);
    j["cells"] = nlohmann::ordered_json::array();
    for (const auto& c : t.cells) {
        auto cell = to_json(c.report);
        cell["value"] = c.value;
        cell["seed"] = c.seed;
        j["cells"].push_back(cell);
    }
    return j;
}

inline std::string log_line(const LogRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["stage"] = std::string(to_string(r.stage));
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    return j.dump();
}

}  // namespace icd
