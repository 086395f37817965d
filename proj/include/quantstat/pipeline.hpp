#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "quantstat/core.hpp"
#include "quantstat/estimators.hpp"

namespace quantstat {

/// Triple of string columns normalized into one dense index.
struct StringTriple {
    std::string a, b, c;
    friend bool operator==(const StringTriple&, const StringTriple&) = default;
    friend auto operator<=>(const StringTriple&, const StringTriple&) = default;
};

struct StringTripleHash {
    size_t operator()(const StringTriple& t) const {
        const std::hash<std::string> h;
        size_t x = h(t.a);
        x = x * 0x9E3779B97F4A7C15ULL + h(t.b);
        x = x * 0x9E3779B97F4A7C15ULL + h(t.c);
        return x;
    }
};

/// Bijection between string triples and dense indices, assigned in
/// first-seen order starting at 0.
class Dictionary {
public:
    uint32_t encode(const StringTriple& triple);
    std::optional<uint32_t> lookup(const StringTriple& triple) const;
    const StringTriple& decode(uint32_t index) const; // throws PipelinePhaseError
    uint32_t size() const { return static_cast<uint32_t>(reverse_.size()); }

private:
    std::unordered_map<StringTriple, uint32_t, StringTripleHash> forward_;
    std::vector<StringTriple> reverse_;
};

/// Dimension dictionary maps (geo, platform, page_key); variant dictionary
/// maps (experiment_id, segment_id, variant).
struct Dictionaries {
    Dictionary dimension;
    Dictionary variant;
};

struct NormalizedMetric {
    int64_t member_id = 0;
    int32_t day = 0;
    DimensionKey dimension;
    int64_t load_time_ms = 0;
};

struct NormalizedExposure {
    int64_t member_id = 0;
    VariantKey variant;
    int32_t day = 0;
};

struct NormalizedInputs {
    std::vector<NormalizedMetric> metrics;
    std::vector<NormalizedExposure> exposures;
    Dictionaries dictionaries;
};

/// Replaces string columns with dense indices; first-seen order.
NormalizedInputs normalize(std::span<const MetricRecord> metrics,
                           std::span<const ExposureRecord> exposures);

/// Compressed set of member ids: 64Ki-wide chunks stored as sorted arrays
/// and promoted to bitset containers when they grow dense.
class MemberBitmap {
public:
    void add(int64_t member_id);
    bool contains(int64_t member_id) const;
    uint64_t size() const { return size_; }

private:
    struct Container {
        std::vector<uint16_t> sorted; // array mode
        std::vector<uint64_t> bits;   // bitset mode when non-empty
    };
    static constexpr size_t kPromoteAt = 4096;
    static constexpr size_t kBitsetWords = 1024; // 65536 bits

    std::map<uint64_t, Container> chunks_;
    uint64_t size_ = 0;
};

/// Inclusive day interval of one analysis run.
struct DayRange {
    int32_t first = 0;
    int32_t last = 0;
    bool contains(int32_t day) const { return day >= first && day <= last; }
    int32_t length() const { return last - first + 1; }
};

/// Per (variant, day) membership with exposed-on-or-before semantics:
/// member m is in bitmap(v, d) iff some exposure (m, v, d') has
/// first <= d' <= d. Bitmaps are monotone in the day.
class ExposureBitmaps {
public:
    static ExposureBitmaps build(std::span<const NormalizedExposure> exposures, DayRange range);

    bool contains(VariantKey variant, int32_t day, int64_t member_id) const;
    const MemberBitmap& bitmap(VariantKey variant, int32_t day) const;
    DayRange day_range() const { return range_; }

    /// Variants with at least one exposure, ascending by index.
    const std::vector<VariantKey>& variants() const { return variants_; }

private:
    DayRange range_{};
    std::vector<VariantKey> variants_;
    // per variant: one cumulative bitmap per day of the range
    std::unordered_map<uint32_t, std::vector<MemberBitmap>> by_variant_;
    static const MemberBitmap empty_bitmap_;
};

/// Metrics split by hash(member_id) so that every member's records live in
/// exactly one partition; member-level aggregates can then be computed
/// without cross-partition traffic.
struct PartitionedMetrics {
    std::vector<std::vector<NormalizedMetric>> partitions;
};

PartitionedMetrics partition_metrics(std::vector<NormalizedMetric> metrics, int partition_count);

/// One analysis cell: a variant crossed with a metric dimension.
struct CellKey {
    VariantKey variant;
    DimensionKey dimension;
    friend bool operator==(CellKey, CellKey) = default;
    friend auto operator<=>(CellKey, CellKey) = default;
};

struct CellKeyHash {
    size_t operator()(CellKey k) const {
        return (static_cast<size_t>(k.variant.index) << 32) ^ k.dimension.index;
    }
};

/// Mergeable per-cell aggregates; merging combines values cell-wise.
template <typename T>
using CellAggregates = std::unordered_map<CellKey, T, CellKeyHash>;

template <typename T, typename MergeFn>
void merge_cells(CellAggregates<T>& into, CellAggregates<T>&& from, MergeFn&& merge_value) {
    for (auto& [key, value] : from) {
        auto [it, inserted] = into.try_emplace(key, std::move(value));
        if (!inserted) merge_value(it->second, std::move(value));
    }
}

/// Phase 2 summary: per-cell histograms of the bitmap-joined views. A view
/// contributes once per variant whose bitmap contains the member on that day.
CellAggregates<SparseHistogram> join_and_histogram(std::span<const NormalizedMetric> partition,
                                                   const ExposureBitmaps& bitmaps);

/// Quantile threshold and density interval for one requested quantile of one cell.
struct ThresholdSpec {
    double q = 0.0;
    int64_t threshold_ms = 0; // the phase-2 quantile
    double halfwidth_ms = 0.0;
};

using CellTargets = CellAggregates<std::vector<ThresholdSpec>>;

/// Phase 3/4 summary: per-cell moment sums, one per requested quantile,
/// aligned with the targets vector. Throws PipelinePhaseError when a
/// populated cell has no targets.
CellAggregates<std::vector<MomentSums>> moments_pass(std::span<const NormalizedMetric> partition,
                                                     const ExposureBitmaps& bitmaps,
                                                     const CellTargets& targets);

enum class PipelinePhase { normalize, bitmaps, quantile, variance, estimate };

struct PipelineOptions {
    std::vector<double> quantiles = {0.5, 0.9};
    Method method = Method::proposed_dynamic;
    double fixed_halfwidth_ms = kDefaultHalfwidthMs;
    int bootstrap_replicates = 1000;
    uint64_t seed = 42;
    int partitions = 0; // <= 0: one per worker
    int workers = 0;    // <= 0: default_workers()
    std::optional<DayRange> day_range; // default: span of all input days
};

struct CellResult {
    VariantKey variant;
    DimensionKey dimension;
    QuantileEstimate estimate;
};

struct PipelineResult {
    Dictionaries dictionaries;
    std::vector<CellResult> cells;
    uint64_t joined_views = 0; // sum of per-cell histogram totals
};

/// Full batch computation: normalize, build bitmaps, partition, per-cell
/// histograms and quantiles, then one or two variance passes depending on
/// the method. Cells are emitted for every (variant x dimension) with at
/// least one joined view.
PipelineResult run_pipeline(std::span<const MetricRecord> metrics,
                            std::span<const ExposureRecord> exposures,
                            const PipelineOptions& options);

} // namespace quantstat
