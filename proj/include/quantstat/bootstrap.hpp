#pragma once

#include <cstdint>
#include <vector>

#include "quantstat/estimators.hpp"

namespace quantstat {

/// Member-level bootstrap estimate of the sample-quantile standard deviation.
struct BootstrapResult {
    double stddev_ms = 0.0;       // sample stddev (denominator B-1) of the replicates
    double mean_quantile_ms = 0.0;
    std::vector<int64_t> replicate_quantiles;
    int replicates = 0; // B
    uint64_t seed = 0;
};

inline constexpr int kDefaultBootstrapReplicates = 1000;

/// Draws n0 members with replacement B times, pooling each draw's views and
/// taking the type-1 quantile. Members, never individual views, are
/// resampled, which preserves the within-member dependence structure.
///
/// Replicate k draws from substream(seed, k), so the result is bit-identical
/// for a given (dataset, q, B, seed) regardless of the worker count.
///
/// Throws InsufficientMembersError when the dataset has no members at all;
/// a single-member dataset is allowed (every replicate then repeats that
/// member and the stddev is 0), which is useful in tests.
BootstrapResult bootstrap_stddev(const MemberViews& dataset, double q,
                                 int replicates = kDefaultBootstrapReplicates,
                                 uint64_t seed = 42, int workers = 0);

} // namespace quantstat
