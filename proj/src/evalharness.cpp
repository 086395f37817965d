#include "quantstat/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "quantstat/errors.hpp"
#include "quantstat/parallel.hpp"

namespace quantstat {

namespace {

// Sub-purpose salts for derive_seed, so the streams used for view values,
// variant assignment, view days, bootstrap oracles and A/A splits never
// overlap.
constexpr uint64_t kPurposeViews = 0x76696577;      // "view"
constexpr uint64_t kPurposeAssign = 0x61736701;     // "asg"
constexpr uint64_t kPurposeDays = 0x64617973;       // "days"
constexpr uint64_t kPurposeBootstrap = 0x626f6f74;  // "boot"
constexpr uint64_t kPurposeSplit = 0x73706c74;      // "splt"
constexpr uint64_t kPurposeDataset = 0x64736574;    // "dset"

uint64_t zero_truncated_geometric(SplitMix64& rng, double mean) {
    if (mean <= 1.0) {
        rng.next(); // keep stream consumption independent of the parameter
        return 1;
    }
    const double p = 1.0 / mean;
    const double u = rng.next_unit();
    // 1 + number of failures before the first success: support {1, 2, ...},
    // expectation 1 + (1-p)/p = mean.
    return 1 + static_cast<uint64_t>(std::floor(std::log(u) / std::log1p(-p)));
}

std::vector<int64_t> member_views(const GeneratorSpec& spec, uint64_t member_index) {
    SplitMix64 rng = substream(derive_seed(spec.seed, kPurposeViews), member_index);
    const uint64_t p = zero_truncated_geometric(rng, spec.mean_views);
    const double effect = spec.member_effect_sd * rng.next_normal();
    std::vector<int64_t> views(p);
    for (auto& v : views) {
        const double log_x = spec.log_location + effect + spec.within_member_sd * rng.next_normal();
        v = std::max<int64_t>(0, std::llround(std::exp(log_x)));
    }
    return views;
}

} // namespace

GeneratorSpec clustered_spec(uint64_t n_members, double mean_views, double icc,
                             double log_location, double total_log_sd, uint64_t seed) {
    if (icc < 0.0 || icc > 1.0) throw ConfigError("icc must be in [0, 1]");
    GeneratorSpec spec;
    spec.n_members = n_members;
    spec.mean_views = mean_views;
    spec.log_location = log_location;
    spec.member_effect_sd = total_log_sd * std::sqrt(icc);
    spec.within_member_sd = total_log_sd * std::sqrt(1.0 - icc);
    spec.seed = seed;
    return spec;
}

MemberViews generate_dataset(const GeneratorSpec& spec, int workers) {
    if (spec.n_members < 1) throw ConfigError("generator needs at least 1 member");
    if (workers <= 0) workers = default_workers();
    MemberViews dataset(spec.n_members);
    parallel_blocks(spec.n_members, workers, [&](uint64_t first, uint64_t last) {
        for (uint64_t i = first; i < last; ++i) dataset[i] = member_views(spec, i);
    });
    return dataset;
}

SyntheticExperiment generate_experiment(const GeneratorSpec& spec, const ExperimentLayout& layout) {
    if (layout.variants.empty()) throw ConfigError("experiment needs at least one variant");
    if (layout.n_days < 1) throw ConfigError("experiment needs at least one day");

    const MemberViews dataset = generate_dataset(spec);
    SyntheticExperiment out;
    out.exposures.reserve(dataset.size() + layout.zero_view_members);

    const uint64_t assign_seed = derive_seed(spec.seed, kPurposeAssign);
    const uint64_t days_seed = derive_seed(spec.seed, kPurposeDays);

    for (uint64_t i = 0; i < dataset.size() + layout.zero_view_members; ++i) {
        SplitMix64 assign_rng = substream(assign_seed, i);
        const auto& variant = layout.variants[assign_rng.next_below(layout.variants.size())];
        out.exposures.push_back({static_cast<int64_t>(i), layout.experiment_id,
                                 layout.segment_id, variant, layout.first_day});
    }

    for (uint64_t i = 0; i < dataset.size(); ++i) {
        SplitMix64 day_rng = substream(days_seed, i);
        for (int64_t x : dataset[i]) {
            MetricRecord rec;
            rec.member_id = static_cast<int64_t>(i);
            rec.day = layout.first_day +
                      static_cast<int32_t>(day_rng.next_below(static_cast<uint64_t>(layout.n_days)));
            rec.geo = layout.geo;
            rec.platform = layout.platform;
            rec.page_key = layout.page_key;
            rec.load_time_ms = x;
            out.metrics.push_back(std::move(rec));
        }
    }
    return out;
}

int EvalReport::cases_per_method() const {
    return n_datasets * static_cast<int>(quantiles.size());
}

int EvalReport::errors(Method m) const {
    int n = 0;
    for (const auto& row : rows)
        if (row.method == m && row.is_error) ++n;
    return n;
}

GeneratorSpec protocol_spec(const EvalProtocol& proto, int dataset_id) {
    const size_t n_cells = proto.icc_grid.size() * proto.mean_views_grid.size();
    const size_t cell = static_cast<size_t>(dataset_id) % n_cells;
    const double icc = proto.icc_grid[cell / proto.mean_views_grid.size()];
    const double mean_views = proto.mean_views_grid[cell % proto.mean_views_grid.size()];
    return clustered_spec(proto.n_members, mean_views, icc, proto.log_location,
                          proto.total_log_sd,
                          derive_seed(proto.seed, kPurposeDataset + static_cast<uint64_t>(dataset_id)));
}

EvalReport evaluate_methods(const EvalProtocol& proto, int workers) {
    if (proto.n_datasets < 1) throw ConfigError("evaluation needs at least 1 dataset");
    if (proto.icc_grid.empty() || proto.mean_views_grid.empty())
        throw ConfigError("evaluation grids must be non-empty");
    if (workers <= 0) workers = default_workers();

    EvalReport report;
    report.n_datasets = proto.n_datasets;
    report.quantiles = proto.quantiles;

    const std::vector<Method> methods = {Method::proposed_fixed, Method::proposed_dynamic,
                                         Method::naive_iid};
    const size_t rows_per_dataset = proto.quantiles.size() * methods.size();
    report.rows.assign(static_cast<size_t>(proto.n_datasets) * rows_per_dataset, EvalCase{});

    parallel_blocks(static_cast<uint64_t>(proto.n_datasets), workers,
                    [&](uint64_t d_first, uint64_t d_last) {
        for (uint64_t d = d_first; d < d_last; ++d) {
            const GeneratorSpec spec = protocol_spec(proto, static_cast<int>(d));
            const MemberViews dataset = generate_dataset(spec, 1);
            const SparseHistogram hist = build_histogram(dataset);
            for (size_t qi = 0; qi < proto.quantiles.size(); ++qi) {
                const double q = proto.quantiles[qi];
                const uint64_t boot_seed = derive_seed(spec.seed, kPurposeBootstrap + qi);
                const double boot_sd =
                    bootstrap_stddev(dataset, q, proto.bootstrap_replicates, boot_seed, 1)
                        .stddev_ms;
                for (size_t mi = 0; mi < methods.size(); ++mi) {
                    EvalCase row;
                    row.dataset_id = static_cast<int>(d);
                    row.icc = spec.icc();
                    row.mean_views = spec.mean_views;
                    row.q = q;
                    row.method = methods[mi];
                    row.bootstrap_stddev_ms = boot_sd;
                    try {
                        switch (methods[mi]) {
                        case Method::proposed_fixed:
                            row.stddev_ms = estimate(dataset, q, Method::proposed_fixed).stddev_ms;
                            break;
                        case Method::proposed_dynamic:
                            row.stddev_ms = estimate(dataset, q, Method::proposed_dynamic).stddev_ms;
                            break;
                        default:
                            row.stddev_ms = variance_naive_iid(hist, q).stddev_ms;
                            break;
                        }
                        row.rel_diff = row.stddev_ms / boot_sd - 1.0;
                        row.is_error = std::abs(row.rel_diff) > kEvalErrorThreshold;
                    } catch (const Error&) {
                        row.failed = true;
                        row.is_error = true;
                        row.stddev_ms = std::numeric_limits<double>::quiet_NaN();
                        row.rel_diff = std::numeric_limits<double>::quiet_NaN();
                    }
                    report.rows[d * rows_per_dataset + qi * methods.size() + mi] = row;
                }
            }
        }
    });
    return report;
}

AaResult aa_simulation(const GeneratorSpec& spec, int replications, double alpha, Method method,
                       double q, int bootstrap_replicates, uint64_t seed, int workers) {
    if (replications < 100)
        throw ConfigError("aa_simulation needs at least 100 replications for a usable rate");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must be in (0, 1)");
    if (workers <= 0) workers = default_workers();

    AaResult result;
    result.replications = replications;
    result.p_values.assign(static_cast<size_t>(replications), 1.0);

    parallel_blocks(static_cast<uint64_t>(replications), workers,
                    [&](uint64_t r_first, uint64_t r_last) {
        for (uint64_t r = r_first; r < r_last; ++r) {
            GeneratorSpec rep_spec = spec;
            rep_spec.seed = derive_seed(seed, kPurposeDataset + r);
            const MemberViews dataset = generate_dataset(rep_spec, 1);

            // Split members, not views: member is the randomization unit.
            SplitMix64 split_rng(derive_seed(rep_spec.seed, kPurposeSplit));
            MemberViews arms[2];
            for (const auto& views : dataset) arms[split_rng.next() & 1].push_back(views);

            QuantileEstimate ests[2];
            for (int a = 0; a < 2; ++a) {
                switch (method) {
                case Method::proposed_fixed:
                case Method::proposed_dynamic:
                    ests[a] = estimate(arms[a], q, method);
                    break;
                case Method::naive_iid:
                    ests[a] = variance_naive_iid(build_histogram(arms[a]), q);
                    break;
                case Method::bootstrap: {
                    const SparseHistogram h = build_histogram(arms[a]);
                    const auto boot = bootstrap_stddev(
                        arms[a], q, bootstrap_replicates,
                        derive_seed(rep_spec.seed, kPurposeBootstrap + static_cast<uint64_t>(a)), 1);
                    ests[a].q = q;
                    ests[a].quantile_ms = empirical_quantile(h, q);
                    ests[a].stddev_ms = boot.stddev_ms;
                    ests[a].method = Method::bootstrap;
                    ests[a].n0 = arms[a].size();
                    ests[a].total_views = h.total();
                    break;
                }
                }
            }
            result.p_values[r] = compare(ests[0], ests[1]).p_value;
        }
    });

    for (double p : result.p_values)
        if (p < alpha) ++result.rejections;
    result.rate = static_cast<double>(result.rejections) / static_cast<double>(replications);
    return result;
}

} // namespace quantstat
