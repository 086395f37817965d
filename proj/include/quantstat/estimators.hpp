#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "quantstat/core.hpp"

namespace quantstat {

/// Average density of the load-time distribution in a window around the
/// sample quantile. Estimates f(Q), the denominator of the asymptotic
/// variance.
struct DensityEstimate {
    double density = 0.0;       // per ms
    double halfwidth_ms = 0.0;  // delta
    uint64_t views_in_interval = 0;
    uint64_t total_views = 0;
};

/// A dataset grouped by the randomization unit: one vector of load times per
/// active member. Members with zero views are never materialized; the n -> n0
/// reduction makes them irrelevant to both the quantile and its variance.
using MemberViews = std::vector<std::vector<int64_t>>;

/// Integer bounds of the closed interval [center - halfwidth, center + halfwidth].
/// Shared by density estimation and per-member interval counting so that both
/// always agree on which integer load times fall inside.
std::pair<int64_t, int64_t> interval_bounds(int64_t center_ms, double halfwidth_ms);

/// Type-1 empirical quantile of a histogram (see SparseHistogram::quantile).
int64_t empirical_quantile(const SparseHistogram& hist, double q);

/// Per-member counts against a quantile threshold and a density interval.
/// Throws EmptyDataError on an empty view list (inactive members must not be
/// materialized by the caller).
MemberAggregate member_aggregate(int64_t member_id, std::span<const int64_t> views,
                                 int64_t threshold_ms, int64_t interval_lo_ms,
                                 int64_t interval_hi_ms);

/// Asymptotic variance of the ratio-of-sums empirical CDF at the quantile
/// threshold, computed from active-member moment sums:
///
///   sigma0^2 = (mu_J/mu_P)^2 (S_JJ/mu_J^2 + S_PP/mu_P^2 - 2 S_JP/(mu_J mu_P))
///
/// with means over active members and unbiased (n0 - 1) sample covariances.
/// The numerator quadratic form is evaluated in exact integer arithmetic as
/// sum_i (sum_P * J_i - sum_J * P_i)^2, so the result is non-negative by
/// construction and identical regardless of how the sums were partitioned.
/// The variance of the quantile numerator is sigma0^2 / n0.
double sigma2_pj(const MomentSums& m);

DensityEstimate make_density(uint64_t views_in_interval, uint64_t total_views,
                             double halfwidth_ms);

/// Average density of hist in the closed interval around center.
DensityEstimate density_estimate(const SparseHistogram& hist, int64_t center_ms,
                                 double halfwidth_ms);

/// Standard deviation of the sample quantile: sqrt(sigma2_pj / (n0 * f^2)).
double variance_proposed_stddev(const MomentSums& aggregates, const DensityEstimate& density);

/// Default density interval half-width (ms) for the fixed estimator and for
/// the first pass of the dynamic estimator.
inline constexpr double kDefaultHalfwidthMs = 50.0;

/// Floor for the dynamic interval half-width: the data resolution is 1 ms.
inline constexpr double kMinHalfwidthMs = 1.0;

/// Full quantile + standard deviation estimate over a member-grouped dataset.
///
/// mode proposed_fixed: one pass with delta = fixed_halfwidth_ms.
/// mode proposed_dynamic: first pass with delta = fixed_halfwidth_ms gives
/// stddev s1; the second pass re-estimates the density with
/// delta = max(2 * s1, 1 ms). The quantile is identical in both passes.
QuantileEstimate estimate(const MemberViews& dataset, double q, Method mode,
                          double fixed_halfwidth_ms = kDefaultHalfwidthMs);

/// Classical i.i.d. asymptotic estimate, which deliberately ignores the
/// member clustering: every view is treated as its own member, and the same
/// sigma2_pj / density machinery is applied to that degenerate structure.
/// On genuinely i.i.d. single-view-per-member data this coincides exactly
/// with the proposed estimator; on clustered data it underestimates.
QuantileEstimate variance_naive_iid(const SparseHistogram& hist, double q,
                                    double halfwidth_ms = kDefaultHalfwidthMs);

/// Two-sample normal-approximation test on the quantile delta.
/// p = 2 * (1 - Phi(|delta| / sqrt(var_t + var_c))).
ComparisonResult compare(const QuantileEstimate& control, const QuantileEstimate& treatment);

/// Histogram of every view in the dataset.
SparseHistogram build_histogram(const MemberViews& dataset);

/// Moment sums of the whole dataset against one threshold and interval.
MomentSums accumulate_moments(const MemberViews& dataset, int64_t threshold_ms,
                              int64_t interval_lo_ms, int64_t interval_hi_ms);

} // namespace quantstat
