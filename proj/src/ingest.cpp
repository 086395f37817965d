#include "quantstat/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <tuple>

#include <json.hpp>

#include "quantstat/errors.hpp"
#include "quantstat/estimators.hpp"

namespace quantstat {

namespace {

constexpr const char* kMetricsHeader = "member_id,geo,platform,page_key,load_time_ms,date";
constexpr const char* kExposuresHeader = "member_id,experiment_id,segment_id,variant,date";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
        const size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

int64_t parse_int(const std::string& field, const std::string& path, size_t line,
                  const char* what) {
    int64_t value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc{} || ptr != field.data() + field.size())
        throw ParseError(path, line, std::string("invalid ") + what + ": '" + field + "'");
    return value;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    return in;
}

} // namespace

int32_t day_from_date(const std::string& date) {
    if (date.size() != 10 || date[4] != '-' || date[7] != '-')
        throw Error("invalid date '" + date + "', expected YYYY-MM-DD");
    int year = 0, month = 0, day = 0;
    auto num = [&](size_t pos, size_t len, int& out) {
        const auto [ptr, ec] = std::from_chars(date.data() + pos, date.data() + pos + len, out);
        return ec == std::errc{} && ptr == date.data() + pos + len;
    };
    if (!num(0, 4, year) || !num(5, 2, month) || !num(8, 2, day))
        throw Error("invalid date '" + date + "', expected YYYY-MM-DD");
    const std::chrono::year_month_day ymd{std::chrono::year{year},
                                          std::chrono::month{static_cast<unsigned>(month)},
                                          std::chrono::day{static_cast<unsigned>(day)}};
    if (!ymd.ok()) throw Error("invalid calendar date '" + date + "'");
    return static_cast<int32_t>(std::chrono::sys_days{ymd}.time_since_epoch().count());
}

std::string date_from_day(int32_t day) {
    const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{day}}};
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

MetricsParseResult parse_metrics(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    MetricsParseResult out;
    std::string line;
    size_t line_no = 0;

    if (!std::getline(in, line)) throw ParseError(path, 1, "missing header");
    ++line_no;
    if (strip_cr(line) != kMetricsHeader)
        throw ParseError(path, 1, std::string("expected header '") + kMetricsHeader + "'");

    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 6)
            throw ParseError(path, line_no,
                             "expected 6 fields, got " + std::to_string(fields.size()));
        MetricRecord rec;
        rec.member_id = parse_int(fields[0], path, line_no, "member_id");
        if (rec.member_id < 0) throw ParseError(path, line_no, "member_id must be non-negative");
        rec.geo = fields[1];
        rec.platform = fields[2];
        rec.page_key = fields[3];
        rec.load_time_ms = parse_int(fields[4], path, line_no, "load_time_ms");
        try {
            rec.day = day_from_date(fields[5]);
        } catch (const Error& e) {
            throw ParseError(path, line_no, e.what());
        }
        if (rec.load_time_ms < 0) {
            ++out.rejected_negative; // dropped, but reported in the run summary
            continue;
        }
        out.records.push_back(std::move(rec));
    }
    return out;
}

std::vector<ExposureRecord> parse_exposures(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    std::vector<ExposureRecord> records;
    // (member, experiment, segment) -> index into records; used for the
    // first-trigger rule and for conflict detection.
    std::map<std::tuple<int64_t, std::string, std::string>, size_t> seen;
    std::string line;
    size_t line_no = 0;

    if (!std::getline(in, line)) throw ParseError(path, 1, "missing header");
    ++line_no;
    if (strip_cr(line) != kExposuresHeader)
        throw ParseError(path, 1, std::string("expected header '") + kExposuresHeader + "'");

    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 5)
            throw ParseError(path, line_no,
                             "expected 5 fields, got " + std::to_string(fields.size()));
        ExposureRecord rec;
        rec.member_id = parse_int(fields[0], path, line_no, "member_id");
        if (rec.member_id < 0) throw ParseError(path, line_no, "member_id must be non-negative");
        rec.experiment_id = fields[1];
        rec.segment_id = fields[2];
        rec.variant = fields[3];
        try {
            rec.day = day_from_date(fields[4]);
        } catch (const Error& e) {
            throw ParseError(path, line_no, e.what());
        }

        const auto key = std::make_tuple(rec.member_id, rec.experiment_id, rec.segment_id);
        const auto it = seen.find(key);
        if (it == seen.end()) {
            seen.emplace(key, records.size());
            records.push_back(std::move(rec));
            continue;
        }
        ExposureRecord& existing = records[it->second];
        if (existing.variant != rec.variant)
            throw ConflictingExposureError(
                path + ":" + std::to_string(line_no) + ": member " +
                std::to_string(rec.member_id) + " is in variants '" + existing.variant +
                "' and '" + rec.variant + "' of experiment " + rec.experiment_id + "/" +
                rec.segment_id);
        existing.day = std::min(existing.day, rec.day); // earliest exposure wins
    }
    return records;
}

void write_metrics_csv(const std::vector<MetricRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << kMetricsHeader << "\n";
    for (const auto& r : records)
        out << r.member_id << ',' << r.geo << ',' << r.platform << ',' << r.page_key << ','
            << r.load_time_ms << ',' << date_from_day(r.day) << "\n";
}

void write_exposures_csv(const std::vector<ExposureRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << kExposuresHeader << "\n";
    for (const auto& r : records)
        out << r.member_id << ',' << r.experiment_id << ',' << r.segment_id << ',' << r.variant
            << ',' << date_from_day(r.day) << "\n";
}

PipelineOptions RunConfig::pipeline_options() const {
    PipelineOptions opt;
    opt.quantiles = quantiles;
    opt.method = method;
    opt.fixed_halfwidth_ms = fixed_halfwidth_ms;
    opt.bootstrap_replicates = bootstrap_replicates;
    opt.seed = seed;
    opt.partitions = partitions;
    opt.workers = workers;
    opt.day_range = day_range;
    return opt;
}

std::vector<ReportRow> to_report_rows(const PipelineResult& result,
                                      const std::optional<std::string>& control_variant) {
    struct DecodedCell {
        ReportRow row;
        QuantileEstimate est;
    };
    std::vector<DecodedCell> cells;
    cells.reserve(result.cells.size());
    for (const auto& cell : result.cells) {
        const StringTriple& v = result.dictionaries.variant.decode(cell.variant.index);
        const StringTriple& d = result.dictionaries.dimension.decode(cell.dimension.index);
        DecodedCell dc;
        dc.row.experiment_id = v.a;
        dc.row.segment_id = v.b;
        dc.row.variant = v.c;
        dc.row.geo = d.a;
        dc.row.platform = d.b;
        dc.row.page_key = d.c;
        dc.row.q = cell.estimate.q;
        dc.row.quantile_ms = cell.estimate.quantile_ms;
        dc.row.stddev_ms = cell.estimate.stddev_ms;
        dc.row.n0 = cell.estimate.n0;
        dc.row.total_views = cell.estimate.total_views;
        dc.row.method = cell.estimate.method;
        dc.est = cell.estimate;
        cells.push_back(std::move(dc));
    }

    if (control_variant) {
        using GroupKey = std::tuple<std::string, std::string, std::string, std::string,
                                    std::string, double>;
        std::map<GroupKey, const DecodedCell*> controls;
        for (const auto& dc : cells)
            if (dc.row.variant == *control_variant)
                controls.emplace(GroupKey{dc.row.experiment_id, dc.row.segment_id, dc.row.geo,
                                          dc.row.platform, dc.row.page_key, dc.row.q},
                                 &dc);
        for (auto& dc : cells) {
            if (dc.row.variant == *control_variant) continue;
            const auto it = controls.find(GroupKey{dc.row.experiment_id, dc.row.segment_id,
                                                   dc.row.geo, dc.row.platform, dc.row.page_key,
                                                   dc.row.q});
            if (it == controls.end()) continue;
            dc.row.comparison = compare(it->second->est, dc.est);
        }
    }

    std::vector<ReportRow> rows;
    rows.reserve(cells.size());
    for (auto& dc : cells) rows.push_back(std::move(dc.row));
    std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
        return std::tie(a.experiment_id, a.segment_id, a.variant, a.geo, a.platform, a.page_key,
                        a.q) <
               std::tie(b.experiment_id, b.segment_id, b.variant, b.geo, b.platform, b.page_key,
                        b.q);
    });
    return rows;
}

std::string report_row_json(const ReportRow& row) {
    nlohmann::json j{
        {"experiment_id", row.experiment_id},
        {"segment_id", row.segment_id},
        {"variant", row.variant},
        {"geo", row.geo},
        {"platform", row.platform},
        {"page_key", row.page_key},
        {"q", row.q},
        {"quantile_ms", row.quantile_ms},
        {"stddev_ms", row.stddev_ms},
        {"n0", row.n0},
        {"total_views", row.total_views},
        {"method", to_string(row.method)},
    };
    if (row.comparison) {
        j["delta_ms"] = row.comparison->delta_ms;
        j["stderr_ms"] = row.comparison->stderr_ms;
        j["z"] = row.comparison->z;
        j["p_value"] = row.comparison->p_value;
    }
    return j.dump();
}

void write_report_jsonl(const std::vector<ReportRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    for (const auto& row : rows) out << report_row_json(row) << "\n";
}

void print_report_summary(const std::vector<ReportRow>& rows, std::ostream& os) {
    os << std::left << std::setw(12) << "experiment" << std::setw(9) << "segment" << std::setw(12)
       << "variant" << std::setw(5) << "geo" << std::setw(9) << "platform" << std::setw(10)
       << "page_key" << std::right << std::setw(6) << "q" << std::setw(10) << "quantile"
       << std::setw(11) << "stddev" << std::setw(9) << "n0" << std::setw(10) << "views"
       << std::setw(10) << "p_value" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(12) << r.experiment_id << std::setw(9) << r.segment_id
           << std::setw(12) << r.variant << std::setw(5) << r.geo << std::setw(9) << r.platform
           << std::setw(10) << r.page_key << std::right << std::setw(6) << std::setprecision(3)
           << r.q << std::setw(10) << r.quantile_ms << std::setw(11) << std::fixed
           << std::setprecision(3) << r.stddev_ms << std::setw(9) << r.n0 << std::setw(10)
           << r.total_views;
        if (r.comparison)
            os << std::setw(10) << std::setprecision(4) << r.comparison->p_value;
        else
            os << std::setw(10) << "-";
        os << "\n";
        os.unsetf(std::ios::fixed);
    }
}

} // namespace quantstat
