#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace quantstat {

/// One page view: who loaded which page, where, on what day, and how long it took.
struct MetricRecord {
    int64_t member_id = 0;
    int32_t day = 0; // days since 1970-01-01
    std::string geo;
    std::string platform;
    std::string page_key;
    int64_t load_time_ms = 0;
};

/// One experiment-membership event: the member saw this variant on this day.
struct ExposureRecord {
    int64_t member_id = 0;
    std::string experiment_id;
    std::string segment_id;
    std::string variant;
    int32_t day = 0;
};

/// Dense index for an (experiment_id, segment_id, variant) triple.
struct VariantKey {
    uint32_t index = 0;
    friend auto operator<=>(VariantKey, VariantKey) = default;
};

/// Dense index for a (geo, platform, page_key) triple.
struct DimensionKey {
    uint32_t index = 0;
    friend auto operator<=>(DimensionKey, DimensionKey) = default;
};

/// Smallest rank r >= 1 such that r/total >= q; the rank of the type-1 sample
/// quantile. Every quantile in the library (histogram, bootstrap replicates,
/// report rows) goes through this one definition.
uint64_t quantile_rank(double q, uint64_t total);

/// Exact histogram of integer-millisecond load times.
///
/// The value->count map is the mergeable summary statistic of the quantile
/// phase: merging is exact integer addition, so results are independent of
/// partition count and merge order.
class SparseHistogram {
public:
    SparseHistogram() = default;

    void add(int64_t value_ms, uint64_t count = 1);
    void merge(const SparseHistogram& other);

    uint64_t total() const { return total_; }
    bool empty() const { return total_ == 0; }
    const std::map<int64_t, uint64_t>& counts() const { return counts_; }

    int64_t min_value() const; // throws EmptyDataError when empty
    int64_t max_value() const;

    /// Type-1 sample quantile: smallest value whose cumulative count reaches
    /// quantile_rank(q, total). Throws EmptyDataError on an empty histogram.
    int64_t quantile(double q) const;

    /// Number of views with lo <= value <= hi.
    uint64_t count_in_range(int64_t lo, int64_t hi) const;

    friend bool operator==(const SparseHistogram&, const SparseHistogram&) = default;

private:
    std::map<int64_t, uint64_t> counts_;
    uint64_t total_ = 0;
};

/// Per-member counts entering the moment sums: P views in total, J views at
/// or below the quantile threshold, W views inside the density interval.
struct MemberAggregate {
    int64_t member_id = 0;
    uint64_t page_views = 0;        // P_i
    uint64_t views_le_threshold = 0; // J_i
    uint64_t views_in_interval = 0;  // W_i
};

/// Mergeable integer sums over member aggregates. These six sums plus the
/// member count are all the variance phase needs; they merge by elementwise
/// addition, exactly.
struct MomentSums {
    uint64_t n0 = 0; // active members (P_i >= 1)
    uint64_t sum_j = 0;
    uint64_t sum_p = 0;
    uint64_t sum_jj = 0;
    uint64_t sum_pp = 0;
    uint64_t sum_jp = 0;
    uint64_t sum_w = 0;

    void add(const MemberAggregate& a) {
        n0 += 1;
        sum_j += a.views_le_threshold;
        sum_p += a.page_views;
        sum_jj += a.views_le_threshold * a.views_le_threshold;
        sum_pp += a.page_views * a.page_views;
        sum_jp += a.views_le_threshold * a.page_views;
        sum_w += a.views_in_interval;
    }

    void merge(const MomentSums& o) {
        n0 += o.n0;
        sum_j += o.sum_j;
        sum_p += o.sum_p;
        sum_jj += o.sum_jj;
        sum_pp += o.sum_pp;
        sum_jp += o.sum_jp;
        sum_w += o.sum_w;
    }

    friend bool operator==(const MomentSums&, const MomentSums&) = default;
};

enum class Method {
    proposed_fixed,
    proposed_dynamic,
    naive_iid,
    bootstrap,
};

const char* to_string(Method m);
Method method_from_string(const std::string& name); // throws ConfigError

/// A sample quantile with its standard deviation estimate and the
/// diagnostics of how the estimate was produced.
struct QuantileEstimate {
    double q = 0.0;
    int64_t quantile_ms = 0;
    double stddev_ms = 0.0;
    Method method = Method::proposed_dynamic;
    double density = 0.0;              // f-hat at the quantile, per ms; 0 for bootstrap
    double interval_halfwidth_ms = 0.0; // delta; 0 for bootstrap
    uint64_t n0 = 0;                   // active members
    uint64_t total_views = 0;
};

/// Two-sample normal-approximation test on a quantile delta.
struct ComparisonResult {
    double delta_ms = 0.0;  // treatment - control
    double stderr_ms = 0.0; // sqrt(var_t + var_c)
    double z = 0.0;
    double p_value = 1.0;
};

} // namespace quantstat
