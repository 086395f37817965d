#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "quantstat/core.hpp"
#include "quantstat/pipeline.hpp"

namespace quantstat {

/// Day index (days since 1970-01-01) of an ISO-8601 date "YYYY-MM-DD".
int32_t day_from_date(const std::string& date);
std::string date_from_day(int32_t day);

struct MetricsParseResult {
    std::vector<MetricRecord> records;
    uint64_t rejected_negative = 0; // rows dropped for a negative load time
};

/// Strict CSV parsing: header `member_id,geo,platform,page_key,load_time_ms,date`,
/// one record per line. Any malformed line aborts with a ParseError naming it;
/// rows with a negative load time are the one exception - they are dropped
/// and counted, never silently.
MetricsParseResult parse_metrics(const std::string& path);

/// Header `member_id,experiment_id,segment_id,variant,date`. Duplicate
/// exposures of one member to one (experiment, segment) keep the earliest
/// day; two different variants raise ConflictingExposureError.
std::vector<ExposureRecord> parse_exposures(const std::string& path);

void write_metrics_csv(const std::vector<MetricRecord>& records, const std::string& path);
void write_exposures_csv(const std::vector<ExposureRecord>& records, const std::string& path);

/// One run of the compute command.
struct RunConfig {
    std::string metrics_path;
    std::string exposures_path;
    std::vector<double> quantiles = {0.5, 0.9};
    Method method = Method::proposed_dynamic;
    double fixed_halfwidth_ms = 50.0;
    int bootstrap_replicates = 1000;
    uint64_t seed = 42;
    int partitions = 0; // <= 0: one per worker
    int workers = 0;
    std::optional<DayRange> day_range;
    std::optional<std::string> control_variant;
    std::string output_path;

    PipelineOptions pipeline_options() const;
};

/// One report line: a cell, its quantile estimate, and (for non-control
/// variants when a control is designated) the two-sample comparison.
struct ReportRow {
    std::string experiment_id, segment_id, variant;
    std::string geo, platform, page_key;
    double q = 0.0;
    int64_t quantile_ms = 0;
    double stddev_ms = 0.0;
    uint64_t n0 = 0;
    uint64_t total_views = 0;
    Method method = Method::proposed_dynamic;
    std::optional<ComparisonResult> comparison;
};

/// Decodes pipeline cells into rows, attaches control comparisons, and sorts
/// by (experiment, segment, variant, geo, platform, page_key, q) so report
/// files are byte-stable for a given input and configuration.
std::vector<ReportRow> to_report_rows(const PipelineResult& result,
                                      const std::optional<std::string>& control_variant);

std::string report_row_json(const ReportRow& row);
void write_report_jsonl(const std::vector<ReportRow>& rows, const std::string& path);

/// Human-readable summary table.
void print_report_summary(const std::vector<ReportRow>& rows, std::ostream& os);

} // namespace quantstat
