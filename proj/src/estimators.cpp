#include "quantstat/estimators.hpp"

#include <cmath>
#include <cstdlib>

#include "quantstat/errors.hpp"

namespace quantstat {

std::pair<int64_t, int64_t> interval_bounds(int64_t center_ms, double halfwidth_ms) {
    const double c = static_cast<double>(center_ms);
    const auto lo = static_cast<int64_t>(std::ceil(c - halfwidth_ms));
    const auto hi = static_cast<int64_t>(std::floor(c + halfwidth_ms));
    return {lo, hi};
}

int64_t empirical_quantile(const SparseHistogram& hist, double q) {
    if (hist.empty()) throw EmptyDataError("empirical_quantile on empty histogram");
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("quantile fraction must be in (0, 1)");
    return hist.quantile(q);
}

MemberAggregate member_aggregate(int64_t member_id, std::span<const int64_t> views,
                                 int64_t threshold_ms, int64_t interval_lo_ms,
                                 int64_t interval_hi_ms) {
    if (views.empty())
        throw EmptyDataError("member_aggregate on a member with no views");
    MemberAggregate a;
    a.member_id = member_id;
    a.page_views = views.size();
    for (int64_t x : views) {
        if (x <= threshold_ms) ++a.views_le_threshold;
        if (x >= interval_lo_ms && x <= interval_hi_ms) ++a.views_in_interval;
    }
    return a;
}

double sigma2_pj(const MomentSums& m) {
    if (m.n0 < 2) throw InsufficientMembersError("sigma2_pj requires at least 2 active members");
    if (m.sum_p == 0) throw DegenerateDataError("sigma2_pj with zero total views");
    if (m.sum_j == 0)
        throw DegenerateDataError("sigma2_pj with no views at or below the threshold");

    using i128 = __int128;
    const i128 sj = static_cast<i128>(m.sum_j);
    const i128 sp = static_cast<i128>(m.sum_p);
    // sum_i (sum_P * J_i - sum_J * P_i)^2, expanded into the moment sums.
    const i128 quad = sp * sp * static_cast<i128>(m.sum_jj) -
                      i128{2} * sj * sp * static_cast<i128>(m.sum_jp) +
                      sj * sj * static_cast<i128>(m.sum_pp);

    const long double n0 = static_cast<long double>(m.n0);
    const long double sum_p = static_cast<long double>(m.sum_p);
    const long double sigma2 = static_cast<long double>(quad) * n0 * n0 /
                               (sum_p * sum_p * sum_p * sum_p * (n0 - 1.0L));
    return static_cast<double>(sigma2);
}

DensityEstimate make_density(uint64_t views_in_interval, uint64_t total_views,
                             double halfwidth_ms) {
    if (total_views == 0) throw EmptyDataError("density with zero total views");
    if (!(halfwidth_ms > 0.0)) throw ConfigError("density halfwidth must be positive");
    DensityEstimate d;
    d.views_in_interval = views_in_interval;
    d.total_views = total_views;
    d.halfwidth_ms = halfwidth_ms;
    d.density = static_cast<double>(views_in_interval) /
                (static_cast<double>(total_views) * (2.0 * halfwidth_ms));
    return d;
}

DensityEstimate density_estimate(const SparseHistogram& hist, int64_t center_ms,
                                 double halfwidth_ms) {
    const auto [lo, hi] = interval_bounds(center_ms, halfwidth_ms);
    return make_density(hist.count_in_range(lo, hi), hist.total(), halfwidth_ms);
}

double variance_proposed_stddev(const MomentSums& aggregates, const DensityEstimate& density) {
    if (!(density.density > 0.0))
        throw DegenerateDataError("variance with zero density around the quantile");
    const double sigma2 = sigma2_pj(aggregates);
    return std::sqrt(sigma2 / (static_cast<double>(aggregates.n0) * density.density * density.density));
}

SparseHistogram build_histogram(const MemberViews& dataset) {
    SparseHistogram hist;
    int64_t lo = 0, hi = -1;
    bool first = true;
    for (const auto& views : dataset) {
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
    if (first) return hist;

    // Dense staging keeps construction linear when the value range is modest,
    // which is always the case for millisecond load times.
    const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    if (range <= (1u << 24)) {
        std::vector<uint64_t> dense(range, 0);
        for (const auto& views : dataset)
            for (int64_t x : views) ++dense[static_cast<uint64_t>(x - lo)];
        for (uint64_t i = 0; i < range; ++i)
            if (dense[i] > 0) hist.add(lo + static_cast<int64_t>(i), dense[i]);
    } else {
        for (const auto& views : dataset)
            for (int64_t x : views) hist.add(x);
    }
    return hist;
}

MomentSums accumulate_moments(const MemberViews& dataset, int64_t threshold_ms,
                              int64_t interval_lo_ms, int64_t interval_hi_ms) {
    MomentSums sums;
    for (size_t i = 0; i < dataset.size(); ++i)
        sums.add(member_aggregate(static_cast<int64_t>(i), dataset[i], threshold_ms,
                                  interval_lo_ms, interval_hi_ms));
    return sums;
}

QuantileEstimate estimate(const MemberViews& dataset, double q, Method mode,
                          double fixed_halfwidth_ms) {
    if (mode != Method::proposed_fixed && mode != Method::proposed_dynamic)
        throw ConfigError("estimate() handles the proposed fixed/dynamic modes only");
    if (dataset.size() < 2)
        throw InsufficientMembersError("estimate requires at least 2 active members");

    const SparseHistogram hist = build_histogram(dataset);
    if (hist.empty()) throw EmptyDataError("estimate on a dataset with no views");
    const int64_t qhat = empirical_quantile(hist, q);

    const auto [lo1, hi1] = interval_bounds(qhat, fixed_halfwidth_ms);
    const MomentSums moments = accumulate_moments(dataset, qhat, lo1, hi1);
    const DensityEstimate d1 =
        make_density(hist.count_in_range(lo1, hi1), hist.total(), fixed_halfwidth_ms);
    const double s1 = variance_proposed_stddev(moments, d1);

    QuantileEstimate est;
    est.q = q;
    est.quantile_ms = qhat;
    est.n0 = dataset.size();
    est.total_views = hist.total();

    if (mode == Method::proposed_fixed) {
        est.method = Method::proposed_fixed;
        est.stddev_ms = s1;
        est.density = d1.density;
        est.interval_halfwidth_ms = d1.halfwidth_ms;
        return est;
    }

    // Second pass: dynamic interval. Only the density window changes; the
    // quantile and the J/P moment sums are those of the first pass.
    const double hw2 = std::max(2.0 * s1, kMinHalfwidthMs);
    const auto [lo2, hi2] = interval_bounds(qhat, hw2);
    const DensityEstimate d2 = make_density(hist.count_in_range(lo2, hi2), hist.total(), hw2);
    est.method = Method::proposed_dynamic;
    est.stddev_ms = variance_proposed_stddev(moments, d2);
    est.density = d2.density;
    est.interval_halfwidth_ms = d2.halfwidth_ms;
    return est;
}

QuantileEstimate variance_naive_iid(const SparseHistogram& hist, double q, double halfwidth_ms) {
    if (hist.empty()) throw EmptyDataError("variance_naive_iid on empty histogram");
    if (hist.total() < 2)
        throw InsufficientMembersError("variance_naive_iid requires at least 2 views");
    const int64_t qhat = empirical_quantile(hist, q);

    // Pretend every view is its own member: P_i = 1 and J_i is the indicator
    // of falling at or below the quantile. sigma2_pj then reduces to the
    // classical q(1-q) form with the empirical CDF level in place of q.
    const uint64_t n = hist.total();
    const uint64_t c = hist.count_in_range(hist.min_value(), qhat);
    MomentSums sums;
    sums.n0 = n;
    sums.sum_j = c;
    sums.sum_p = n;
    sums.sum_jj = c;
    sums.sum_pp = n;
    sums.sum_jp = c;

    const DensityEstimate d = density_estimate(hist, qhat, halfwidth_ms);
    sums.sum_w = d.views_in_interval;

    QuantileEstimate est;
    est.q = q;
    est.quantile_ms = qhat;
    est.method = Method::naive_iid;
    est.stddev_ms = variance_proposed_stddev(sums, d);
    est.density = d.density;
    est.interval_halfwidth_ms = d.halfwidth_ms;
    est.n0 = n;
    est.total_views = n;
    return est;
}

ComparisonResult compare(const QuantileEstimate& control, const QuantileEstimate& treatment) {
    if (control.q != treatment.q)
        throw ConfigError("compare requires both estimates at the same quantile");
    if (control.method != treatment.method)
        throw ConfigError("compare requires both estimates from the same method");

    ComparisonResult r;
    r.delta_ms = static_cast<double>(treatment.quantile_ms - control.quantile_ms);
    const double var = treatment.stddev_ms * treatment.stddev_ms +
                       control.stddev_ms * control.stddev_ms;
    r.stderr_ms = std::sqrt(var);
    if (r.stderr_ms == 0.0) {
        if (r.delta_ms != 0.0)
            throw DegenerateVarianceError("zero standard error with a nonzero quantile delta");
        r.z = 0.0;
        r.p_value = 1.0;
        return r;
    }
    r.z = r.delta_ms / r.stderr_ms;
    r.p_value = std::erfc(std::abs(r.z) / std::sqrt(2.0));
    return r;
}

} // namespace quantstat
