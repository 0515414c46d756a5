#pragma once

// Per-epoch metrics and the `# metrics-v1` CSV format. Missing values are
// written as empty fields, never as zeros.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdda/domains.hpp"
#include "sdda/losses.hpp"

namespace sdda {

struct MetricsRecord {
    std::string run_id;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    LossBundle losses;
    std::optional<double> target_accuracy;
    std::optional<double> source_accuracy;
    std::optional<double> d_a_source_target;
    std::optional<double> d_a_source_generated;
    std::optional<double> d_a_target_generated;

    bool operator==(const MetricsRecord& o) const {
        return run_id == o.run_id && seed == o.seed && epoch == o.epoch && losses.values == o.losses.values
               && target_accuracy == o.target_accuracy && source_accuracy == o.source_accuracy
               && d_a_source_target == o.d_a_source_target && d_a_source_generated == o.d_a_source_generated
               && d_a_target_generated == o.d_a_target_generated;
    }
};

inline constexpr const char* kMetricsVersionLine = "# metrics-v1";
inline constexpr std::array<const char*, 15> kMetricsColumns{
    "run_id", "seed", "epoch", "lik", "adv_g", "adv_d", "crs", "dis", "cls", "mmd",
    "target_acc", "source_acc", "da_st", "da_sg", "da_tg"};

namespace detail {

inline std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline std::optional<double> parse_opt_cell(const std::string& s, const std::string& ctx) {
    if (s.empty()) return std::nullopt;
    return parse_double(s, ctx);
}

} // namespace detail

inline std::string metrics_header() {
    std::string out;
    for (std::size_t i = 0; i < kMetricsColumns.size(); ++i) {
        if (i) out += ',';
        out += kMetricsColumns[i];
    }
    return out;
}

// Run ids must not contain commas or newlines.
inline std::string metrics_row(const MetricsRecord& r) {
    if (r.run_id.find_first_of(",\n") != std::string::npos) throw FormatError("metrics: run id contains ',' or newline");
    std::ostringstream out;
    out << r.run_id << ',' << r.seed << ',' << r.epoch;
    for (std::size_t t = 0; t < kLossTermCount; ++t) out << ',' << detail::opt_cell(r.losses.values[t]);
    out << ',' << detail::opt_cell(r.target_accuracy) << ',' << detail::opt_cell(r.source_accuracy) << ','
        << detail::opt_cell(r.d_a_source_target) << ',' << detail::opt_cell(r.d_a_source_generated) << ','
        << detail::opt_cell(r.d_a_target_generated);
    return out.str();
}

inline void write_metrics_csv(const std::vector<MetricsRecord>& records, std::ostream& out, bool with_header = true) {
    if (with_header) out << kMetricsVersionLine << '\n' << metrics_header() << '\n';
    for (const MetricsRecord& r : records) out << metrics_row(r) << '\n';
}

inline void save_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_metrics_csv(records, out);
}

inline MetricsRecord parse_metrics_row(const std::string& line, const std::string& ctx) {
    const auto cells = split_csv_line(line);
    if (cells.size() != kMetricsColumns.size()) {
        throw FormatError(ctx + ": expected " + std::to_string(kMetricsColumns.size()) + " columns, got "
                          + std::to_string(cells.size()));
    }
    MetricsRecord r;
    r.run_id = cells[0];
    try {
        r.seed = std::stoull(cells[1]);
        r.epoch = std::stoul(cells[2]);
    } catch (const std::exception&) {
        throw FormatError(ctx + ": bad seed or epoch");
    }
    for (std::size_t t = 0; t < kLossTermCount; ++t) r.losses.values[t] = detail::parse_opt_cell(cells[3 + t], ctx);
    r.target_accuracy = detail::parse_opt_cell(cells[10], ctx);
    r.source_accuracy = detail::parse_opt_cell(cells[11], ctx);
    r.d_a_source_target = detail::parse_opt_cell(cells[12], ctx);
    r.d_a_source_generated = detail::parse_opt_cell(cells[13], ctx);
    r.d_a_target_generated = detail::parse_opt_cell(cells[14], ctx);
    return r;
}

inline std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kMetricsVersionLine) throw VersionError("metrics csv: missing '# metrics-v1' line");
    if (!std::getline(in, line) || line != metrics_header()) throw FormatError("metrics csv: unexpected header");
    std::vector<MetricsRecord> out;
    std::size_t line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        out.push_back(parse_metrics_row(line, "metrics csv line " + std::to_string(line_no)));
    }
    return out;
}

inline std::vector<MetricsRecord> load_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return read_metrics_csv(in);
}

} // namespace sdda
