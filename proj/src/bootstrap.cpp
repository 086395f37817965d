#include "quantstat/bootstrap.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "quantstat/errors.hpp"
#include "quantstat/parallel.hpp"
#include "quantstat/rng.hpp"

namespace quantstat {

namespace {

// Dense counting is used whenever the value range fits a modest buffer;
// millisecond load times always do.
constexpr uint64_t kDenseRangeLimit = uint64_t{1} << 24;

int64_t replicate_quantile_dense(const MemberViews& dataset, double q, SplitMix64& rng,
                                 int64_t lo, std::vector<uint32_t>& counts) {
    const uint64_t n0 = dataset.size();
    uint64_t total = 0;
    std::fill(counts.begin(), counts.end(), 0);
    for (uint64_t i = 0; i < n0; ++i) {
        const uint64_t idx = rng.next_below(n0);
        for (int64_t x : dataset[idx]) ++counts[static_cast<uint64_t>(x - lo)];
        total += dataset[idx].size();
    }
    const uint64_t rank = quantile_rank(q, total);
    uint64_t cum = 0;
    for (uint64_t v = 0;; ++v) {
        cum += counts[v];
        if (cum >= rank) return lo + static_cast<int64_t>(v);
    }
}

int64_t replicate_quantile_sparse(const MemberViews& dataset, double q, SplitMix64& rng) {
    const uint64_t n0 = dataset.size();
    std::map<int64_t, uint64_t> counts;
    uint64_t total = 0;
    for (uint64_t i = 0; i < n0; ++i) {
        const uint64_t idx = rng.next_below(n0);
        for (int64_t x : dataset[idx]) ++counts[x];
        total += dataset[idx].size();
    }
    const uint64_t rank = quantile_rank(q, total);
    uint64_t cum = 0;
    for (const auto& [value, count] : counts) {
        cum += count;
        if (cum >= rank) return value;
    }
    return counts.rbegin()->first;
}

} // namespace

BootstrapResult bootstrap_stddev(const MemberViews& dataset, double q, int replicates,
                                 uint64_t seed, int workers) {
    if (dataset.empty())
        throw InsufficientMembersError("bootstrap on a dataset with no members");
    if (replicates < 2) throw ConfigError("bootstrap needs at least 2 replicates");
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("quantile fraction must be in (0, 1)");

    int64_t lo = 0, hi = -1;
    uint64_t n_views = 0;
    bool first = true;
    for (const auto& views : dataset) {
        if (views.empty())
            throw EmptyDataError("bootstrap dataset contains a member with no views");
        n_views += views.size();
        for (int64_t x : views) {
            if (first) {
                lo = hi = x;
                first = false;
            } else {
                if (x < lo) lo = x;
                if (x > hi) hi = x;
            }
        }
    }

    // Dense pays a fill per replicate, so it must not dwarf the counting work.
    const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    const bool dense = range <= kDenseRangeLimit && range / 16 <= n_views;

    BootstrapResult result;
    result.replicates = replicates;
    result.seed = seed;
    result.replicate_quantiles.assign(static_cast<size_t>(replicates), 0);

    if (workers <= 0) workers = default_workers();
    parallel_blocks(static_cast<uint64_t>(replicates), workers,
                    [&](uint64_t k_first, uint64_t k_last) {
                        std::vector<uint32_t> counts;
                        if (dense) counts.assign(range, 0);
                        for (uint64_t k = k_first; k < k_last; ++k) {
                            SplitMix64 rng = substream(seed, k);
                            result.replicate_quantiles[k] =
                                dense ? replicate_quantile_dense(dataset, q, rng, lo, counts)
                                      : replicate_quantile_sparse(dataset, q, rng);
                        }
                    });

    long double sum = 0.0L;
    for (int64_t v : result.replicate_quantiles) sum += static_cast<long double>(v);
    const long double mean = sum / static_cast<long double>(replicates);
    long double ss = 0.0L;
    for (int64_t v : result.replicate_quantiles) {
        const long double d = static_cast<long double>(v) - mean;
        ss += d * d;
    }
    result.mean_quantile_ms = static_cast<double>(mean);
    result.stddev_ms = static_cast<double>(std::sqrt(ss / static_cast<long double>(replicates - 1)));
    return result;
}

} // namespace quantstat
