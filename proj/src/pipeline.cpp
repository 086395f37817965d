#include "quantstat/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "quantstat/bootstrap.hpp"
#include "quantstat/errors.hpp"
#include "quantstat/parallel.hpp"
#include "quantstat/rng.hpp"

namespace quantstat {

uint32_t Dictionary::encode(const StringTriple& triple) {
    auto it = forward_.find(triple);
    if (it != forward_.end()) return it->second;
    const auto index = static_cast<uint32_t>(reverse_.size());
    forward_.emplace(triple, index);
    reverse_.push_back(triple);
    return index;
}

std::optional<uint32_t> Dictionary::lookup(const StringTriple& triple) const {
    auto it = forward_.find(triple);
    if (it == forward_.end()) return std::nullopt;
    return it->second;
}

const StringTriple& Dictionary::decode(uint32_t index) const {
    if (index >= reverse_.size())
        throw PipelinePhaseError("dictionary index " + std::to_string(index) + " out of range");
    return reverse_[index];
}

NormalizedInputs normalize(std::span<const MetricRecord> metrics,
                           std::span<const ExposureRecord> exposures) {
    NormalizedInputs out;
    out.metrics.reserve(metrics.size());
    for (const auto& m : metrics) {
        NormalizedMetric n;
        n.member_id = m.member_id;
        n.day = m.day;
        n.dimension = {out.dictionaries.dimension.encode({m.geo, m.platform, m.page_key})};
        n.load_time_ms = m.load_time_ms;
        out.metrics.push_back(n);
    }
    out.exposures.reserve(exposures.size());
    for (const auto& e : exposures) {
        NormalizedExposure n;
        n.member_id = e.member_id;
        n.variant = {out.dictionaries.variant.encode({e.experiment_id, e.segment_id, e.variant})};
        n.day = e.day;
        out.exposures.push_back(n);
    }
    return out;
}

void MemberBitmap::add(int64_t member_id) {
    const auto id = static_cast<uint64_t>(member_id);
    Container& c = chunks_[id >> 16];
    const auto low = static_cast<uint16_t>(id & 0xFFFF);
    if (!c.bits.empty()) {
        uint64_t& word = c.bits[low >> 6];
        const uint64_t mask = uint64_t{1} << (low & 63);
        if (word & mask) return;
        word |= mask;
        ++size_;
        return;
    }
    auto it = std::lower_bound(c.sorted.begin(), c.sorted.end(), low);
    if (it != c.sorted.end() && *it == low) return;
    c.sorted.insert(it, low);
    ++size_;
    if (c.sorted.size() >= kPromoteAt) {
        c.bits.assign(kBitsetWords, 0);
        for (uint16_t v : c.sorted) c.bits[v >> 6] |= uint64_t{1} << (v & 63);
        c.sorted.clear();
        c.sorted.shrink_to_fit();
    }
}

bool MemberBitmap::contains(int64_t member_id) const {
    const auto id = static_cast<uint64_t>(member_id);
    const auto it = chunks_.find(id >> 16);
    if (it == chunks_.end()) return false;
    const Container& c = it->second;
    const auto low = static_cast<uint16_t>(id & 0xFFFF);
    if (!c.bits.empty()) return (c.bits[low >> 6] >> (low & 63)) & 1;
    return std::binary_search(c.sorted.begin(), c.sorted.end(), low);
}

const MemberBitmap ExposureBitmaps::empty_bitmap_{};

ExposureBitmaps ExposureBitmaps::build(std::span<const NormalizedExposure> exposures,
                                       DayRange range) {
    if (range.last < range.first) throw ConfigError("day range is empty");
    if (range.length() > 200000)
        throw ConfigError("day range spans " + std::to_string(range.length()) +
                          " days; pass an explicit analysis range");
    ExposureBitmaps out;
    out.range_ = range;

    // Members newly exposed to each variant on each in-range day.
    std::unordered_map<uint32_t, std::vector<std::vector<int64_t>>> newly;
    for (const auto& e : exposures) {
        if (!range.contains(e.day)) continue;
        auto& days = newly[e.variant.index];
        if (days.empty()) days.resize(static_cast<size_t>(range.length()));
        days[static_cast<size_t>(e.day - range.first)].push_back(e.member_id);
    }

    for (auto& [variant, _] : newly) out.variants_.push_back({variant});
    std::sort(out.variants_.begin(), out.variants_.end());

    for (const VariantKey v : out.variants_) {
        auto& days = newly[v.index];
        std::vector<MemberBitmap> cumulative(static_cast<size_t>(range.length()));
        MemberBitmap acc;
        for (size_t d = 0; d < cumulative.size(); ++d) {
            for (int64_t m : days[d]) acc.add(m);
            cumulative[d] = acc;
        }
        out.by_variant_.emplace(v.index, std::move(cumulative));
    }
    return out;
}

bool ExposureBitmaps::contains(VariantKey variant, int32_t day, int64_t member_id) const {
    if (!range_.contains(day)) return false;
    const auto it = by_variant_.find(variant.index);
    if (it == by_variant_.end()) return false;
    return it->second[static_cast<size_t>(day - range_.first)].contains(member_id);
}

const MemberBitmap& ExposureBitmaps::bitmap(VariantKey variant, int32_t day) const {
    if (!range_.contains(day))
        throw PipelinePhaseError("bitmap day " + std::to_string(day) + " outside the analysis range");
    const auto it = by_variant_.find(variant.index);
    if (it == by_variant_.end()) return empty_bitmap_;
    return it->second[static_cast<size_t>(day - range_.first)];
}

PartitionedMetrics partition_metrics(std::vector<NormalizedMetric> metrics, int partition_count) {
    if (partition_count < 1) throw ConfigError("partition count must be at least 1");
    PartitionedMetrics out;
    out.partitions.resize(static_cast<size_t>(partition_count));
    if (partition_count == 1) {
        out.partitions[0] = std::move(metrics);
        return out;
    }
    for (auto& m : metrics) {
        const uint64_t h = mix64(static_cast<uint64_t>(m.member_id));
        out.partitions[h % static_cast<uint64_t>(partition_count)].push_back(m);
    }
    return out;
}

CellAggregates<SparseHistogram> join_and_histogram(std::span<const NormalizedMetric> partition,
                                                   const ExposureBitmaps& bitmaps) {
    CellAggregates<SparseHistogram> cells;
    const auto& variants = bitmaps.variants();
    for (const auto& rec : partition) {
        if (!bitmaps.day_range().contains(rec.day)) continue;
        for (const VariantKey v : variants) {
            if (!bitmaps.contains(v, rec.day, rec.member_id)) continue;
            cells[{v, rec.dimension}].add(rec.load_time_ms);
        }
    }
    return cells;
}

namespace {

struct PreparedTarget {
    int64_t threshold_ms = 0;
    int64_t interval_lo_ms = 0;
    int64_t interval_hi_ms = 0;
};

CellAggregates<std::vector<PreparedTarget>> prepare_targets(const CellTargets& targets) {
    CellAggregates<std::vector<PreparedTarget>> prepared;
    for (const auto& [cell, specs] : targets) {
        std::vector<PreparedTarget> p;
        p.reserve(specs.size());
        for (const auto& spec : specs) {
            const auto [lo, hi] = interval_bounds(spec.threshold_ms, spec.halfwidth_ms);
            p.push_back({spec.threshold_ms, lo, hi});
        }
        prepared.emplace(cell, std::move(p));
    }
    return prepared;
}

} // namespace

CellAggregates<std::vector<MomentSums>> moments_pass(std::span<const NormalizedMetric> partition,
                                                     const ExposureBitmaps& bitmaps,
                                                     const CellTargets& targets) {
    const auto prepared = prepare_targets(targets);
    CellAggregates<std::vector<MomentSums>> sums;

    // Group the partition by member; each member's views per cell form one
    // MemberAggregate per quantile target.
    std::vector<uint32_t> order(partition.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
        return partition[a].member_id < partition[b].member_id;
    });

    const auto& variants = bitmaps.variants();
    CellAggregates<std::vector<int64_t>> member_cells;
    size_t i = 0;
    while (i < order.size()) {
        const int64_t member = partition[order[i]].member_id;
        member_cells.clear();
        for (; i < order.size() && partition[order[i]].member_id == member; ++i) {
            const auto& rec = partition[order[i]];
            if (!bitmaps.day_range().contains(rec.day)) continue;
            for (const VariantKey v : variants) {
                if (!bitmaps.contains(v, rec.day, rec.member_id)) continue;
                member_cells[{v, rec.dimension}].push_back(rec.load_time_ms);
            }
        }
        for (const auto& [cell, views] : member_cells) {
            const auto target_it = prepared.find(cell);
            if (target_it == prepared.end())
                throw PipelinePhaseError("populated cell has no quantile targets");
            auto [sums_it, inserted] = sums.try_emplace(cell);
            if (inserted) sums_it->second.resize(target_it->second.size());
            for (size_t t = 0; t < target_it->second.size(); ++t) {
                const PreparedTarget& pt = target_it->second[t];
                sums_it->second[t].add(member_aggregate(member, views, pt.threshold_ms,
                                                        pt.interval_lo_ms, pt.interval_hi_ms));
            }
        }
    }
    return sums;
}

namespace {

DayRange input_day_span(std::span<const MetricRecord> metrics,
                        std::span<const ExposureRecord> exposures) {
    bool any = false;
    int32_t lo = 0, hi = 0;
    auto fold = [&](int32_t day) {
        if (!any) {
            lo = hi = day;
            any = true;
        } else {
            lo = std::min(lo, day);
            hi = std::max(hi, day);
        }
    };
    for (const auto& m : metrics) fold(m.day);
    for (const auto& e : exposures) fold(e.day);
    return any ? DayRange{lo, hi} : DayRange{0, 0};
}

template <typename T, typename PerPartition, typename MergeValue>
CellAggregates<T> run_partitioned(const PartitionedMetrics& parts, int workers,
                                  PerPartition&& per_partition, MergeValue&& merge_value) {
    std::vector<CellAggregates<T>> partials(parts.partitions.size());
    parallel_blocks(parts.partitions.size(), workers, [&](uint64_t first, uint64_t last) {
        for (uint64_t p = first; p < last; ++p) partials[p] = per_partition(parts.partitions[p]);
    });
    CellAggregates<T> merged;
    for (auto& partial : partials)
        merge_cells(merged, std::move(partial), merge_value);
    return merged;
}

std::string describe_cell(const Dictionaries& dicts, CellKey cell) {
    const StringTriple& v = dicts.variant.decode(cell.variant.index);
    const StringTriple& d = dicts.dimension.decode(cell.dimension.index);
    return "cell (" + v.a + "," + v.b + "," + v.c + ")x(" + d.a + "," + d.b + "," + d.c + ")";
}

} // namespace

PipelineResult run_pipeline(std::span<const MetricRecord> metrics,
                            std::span<const ExposureRecord> exposures,
                            const PipelineOptions& options) {
    for (double q : options.quantiles)
        if (!(q > 0.0 && q < 1.0)) throw ConfigError("quantile fractions must be in (0, 1)");
    if (options.quantiles.empty()) throw ConfigError("at least one quantile is required");

    const int workers = options.workers > 0 ? options.workers : default_workers();
    const int partition_count = options.partitions > 0 ? options.partitions : workers;

    PipelineResult result;

    // Phase 1: normalize, build exposure bitmaps, co-partition by member.
    NormalizedInputs inputs = normalize(metrics, exposures);
    result.dictionaries = std::move(inputs.dictionaries);
    const DayRange range = options.day_range.value_or(input_day_span(metrics, exposures));
    const ExposureBitmaps bitmaps = ExposureBitmaps::build(inputs.exposures, range);
    const PartitionedMetrics parts = partition_metrics(std::move(inputs.metrics), partition_count);

    // Phase 2: per-cell histograms, then quantiles.
    CellAggregates<SparseHistogram> hists = run_partitioned<SparseHistogram>(
        parts, workers,
        [&](std::span<const NormalizedMetric> p) { return join_and_histogram(p, bitmaps); },
        [](SparseHistogram& a, SparseHistogram&& b) { a.merge(b); });

    for (const auto& [cell, hist] : hists) result.joined_views += hist.total();

    std::vector<CellKey> cell_order;
    cell_order.reserve(hists.size());
    for (const auto& [cell, hist] : hists) cell_order.push_back(cell);
    std::sort(cell_order.begin(), cell_order.end());

    if (cell_order.empty()) return result;

    CellTargets targets;
    for (const CellKey cell : cell_order) {
        std::vector<ThresholdSpec> specs;
        specs.reserve(options.quantiles.size());
        for (double q : options.quantiles)
            specs.push_back({q, empirical_quantile(hists.at(cell), q), options.fixed_halfwidth_ms});
        targets.emplace(cell, std::move(specs));
    }

    auto emit = [&](CellKey cell, const QuantileEstimate& est) {
        result.cells.push_back({cell.variant, cell.dimension, est});
    };
    // Estimator failures become phase errors naming the offending cell.
    auto for_each_cell = [&](const std::function<void(CellKey)>& fn) {
        for (const CellKey cell : cell_order) {
            try {
                fn(cell);
            } catch (const PipelinePhaseError&) {
                throw;
            } catch (const Error& e) {
                throw PipelinePhaseError(describe_cell(result.dictionaries, cell) + ": " + e.what());
            }
        }
    };

    if (options.method == Method::naive_iid) {
        for_each_cell([&](CellKey cell) {
            for (double q : options.quantiles)
                emit(cell, variance_naive_iid(hists.at(cell), q, options.fixed_halfwidth_ms));
        });
        return result;
    }

    if (options.method == Method::bootstrap) {
        // Gather each cell's views grouped by member, ordered by member id
        // so results do not depend on the partition count.
        using MemberMap = std::map<int64_t, std::vector<int64_t>>;
        CellAggregates<MemberMap> members = run_partitioned<MemberMap>(
            parts, workers,
            [&](std::span<const NormalizedMetric> p) {
                CellAggregates<MemberMap> local;
                for (const auto& rec : p) {
                    if (!bitmaps.day_range().contains(rec.day)) continue;
                    for (const VariantKey v : bitmaps.variants()) {
                        if (!bitmaps.contains(v, rec.day, rec.member_id)) continue;
                        local[{v, rec.dimension}][rec.member_id].push_back(rec.load_time_ms);
                    }
                }
                return local;
            },
            [](MemberMap& a, MemberMap&& b) {
                for (auto& [m, views] : b) {
                    auto& dst = a[m];
                    dst.insert(dst.end(), views.begin(), views.end());
                }
            });

        for_each_cell([&](CellKey cell) {
            MemberViews dataset;
            for (auto& [member, views] : members.at(cell)) dataset.push_back(std::move(views));
            const SparseHistogram& hist = hists.at(cell);
            for (size_t qi = 0; qi < options.quantiles.size(); ++qi) {
                const double q = options.quantiles[qi];
                const uint64_t cell_seed =
                    substream(substream(options.seed, cell.variant.index).next(),
                              (uint64_t{cell.dimension.index} << 8) + qi)
                        .next();
                const BootstrapResult boot =
                    bootstrap_stddev(dataset, q, options.bootstrap_replicates, cell_seed, workers);
                QuantileEstimate est;
                est.q = q;
                est.quantile_ms = empirical_quantile(hist, q);
                est.stddev_ms = boot.stddev_ms;
                est.method = Method::bootstrap;
                est.n0 = dataset.size();
                est.total_views = hist.total();
                emit(cell, est);
            }
        });
        return result;
    }

    // Phase 3: moment sums with the fixed interval.
    CellAggregates<std::vector<MomentSums>> pass1 = run_partitioned<std::vector<MomentSums>>(
        parts, workers,
        [&](std::span<const NormalizedMetric> p) { return moments_pass(p, bitmaps, targets); },
        [](std::vector<MomentSums>& a, std::vector<MomentSums>&& b) {
            for (size_t i = 0; i < a.size(); ++i) a[i].merge(b[i]);
        });

    auto assemble = [&](CellKey cell, size_t qi, const MomentSums& ms, double halfwidth,
                        Method method) {
        const DensityEstimate d = make_density(ms.sum_w, ms.sum_p, halfwidth);
        QuantileEstimate est;
        est.q = options.quantiles[qi];
        est.quantile_ms = targets.at(cell)[qi].threshold_ms;
        est.stddev_ms = variance_proposed_stddev(ms, d);
        est.method = method;
        est.density = d.density;
        est.interval_halfwidth_ms = halfwidth;
        est.n0 = ms.n0;
        est.total_views = ms.sum_p;
        return est;
    };

    if (options.method == Method::proposed_fixed) {
        for_each_cell([&](CellKey cell) {
            const auto& sums = pass1.at(cell);
            for (size_t qi = 0; qi < options.quantiles.size(); ++qi)
                emit(cell, assemble(cell, qi, sums[qi], options.fixed_halfwidth_ms,
                                    Method::proposed_fixed));
        });
        return result;
    }

    // Phase 4 (dynamic interval): re-count the density window with
    // delta = max(2 * s1, 1 ms) per cell and quantile. The quantile and
    // the J/P sums are unchanged; only sum_w differs.
    CellTargets dynamic_targets;
    for_each_cell([&](CellKey cell) {
        const auto& sums = pass1.at(cell);
        std::vector<ThresholdSpec> specs = targets.at(cell);
        for (size_t qi = 0; qi < specs.size(); ++qi) {
            const DensityEstimate d1 =
                make_density(sums[qi].sum_w, sums[qi].sum_p, options.fixed_halfwidth_ms);
            const double s1 = variance_proposed_stddev(sums[qi], d1);
            specs[qi].halfwidth_ms = std::max(2.0 * s1, kMinHalfwidthMs);
        }
        dynamic_targets.emplace(cell, std::move(specs));
    });

    CellAggregates<std::vector<MomentSums>> pass2 = run_partitioned<std::vector<MomentSums>>(
        parts, workers,
        [&](std::span<const NormalizedMetric> p) {
            return moments_pass(p, bitmaps, dynamic_targets);
        },
        [](std::vector<MomentSums>& a, std::vector<MomentSums>&& b) {
            for (size_t i = 0; i < a.size(); ++i) a[i].merge(b[i]);
        });

    for_each_cell([&](CellKey cell) {
        const auto& sums = pass2.at(cell);
        for (size_t qi = 0; qi < options.quantiles.size(); ++qi)
            emit(cell, assemble(cell, qi, sums[qi], dynamic_targets.at(cell)[qi].halfwidth_ms,
                                Method::proposed_dynamic));
    });
    return result;
}

} // namespace quantstat
