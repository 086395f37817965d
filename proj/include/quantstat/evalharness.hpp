#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "quantstat/bootstrap.hpp"
#include "quantstat/core.hpp"
#include "quantstat/estimators.hpp"
#include "quantstat/rng.hpp"

namespace quantstat {

/// Synthetic clustered page-load-time model.
///
/// Member i draws a view count P_i from a zero-truncated geometric law with
/// mean `mean_views`, a member effect a_i ~ Normal(0, member_effect_sd^2),
/// and views X_ij = round(exp(log_location + a_i + e_ij)) with
/// e_ij ~ Normal(0, within_member_sd^2). Load times are positive and
/// right-skewed, and views of one member are positively correlated; the
/// log-scale intraclass correlation is tau^2 / (tau^2 + sigma_w^2).
struct GeneratorSpec {
    uint64_t n_members = 5000;
    double mean_views = 10.0;
    double log_location = 5.52146091786225; // log(250): ~250 ms median
    double member_effect_sd = 0.5;          // tau
    double within_member_sd = 0.41;         // sigma_w
    uint64_t seed = 1;

    double icc() const {
        const double t2 = member_effect_sd * member_effect_sd;
        const double w2 = within_member_sd * within_member_sd;
        return t2 + w2 > 0.0 ? t2 / (t2 + w2) : 0.0;
    }
};

/// Spec with a requested log-scale ICC at a fixed total log variance.
GeneratorSpec clustered_spec(uint64_t n_members, double mean_views, double icc,
                             double log_location, double total_log_sd, uint64_t seed);

/// Deterministic in spec.seed; member i draws from its own substream, so the
/// result does not depend on the worker count.
MemberViews generate_dataset(const GeneratorSpec& spec, int workers = 0);

/// Deterministic seed for a sub-purpose (dataset id, replication id, ...).
inline uint64_t derive_seed(uint64_t seed, uint64_t purpose) {
    return substream(seed, purpose).next();
}

/// One synthetic A/B experiment in the same shape the ingest module reads:
/// every member is exposed to one uniformly drawn variant on the first day,
/// and each view lands on a uniform day of the range.
struct SyntheticExperiment {
    std::vector<MetricRecord> metrics;
    std::vector<ExposureRecord> exposures;
};

struct ExperimentLayout {
    std::string experiment_id = "exp1";
    std::string segment_id = "seg1";
    std::vector<std::string> variants = {"control", "treatment"};
    int32_t first_day = 19448; // 2023-04-01
    int n_days = 7;
    std::string geo = "us";
    std::string platform = "web";
    std::string page_key = "feed";
    uint64_t zero_view_members = 0; // exposure-only members appended at the end
};

SyntheticExperiment generate_experiment(const GeneratorSpec& spec, const ExperimentLayout& layout);

/// One evaluated (dataset, quantile, method) case against the bootstrap oracle.
struct EvalCase {
    int dataset_id = 0;
    double icc = 0.0;
    double mean_views = 0.0;
    double q = 0.0;
    Method method = Method::proposed_fixed;
    double stddev_ms = 0.0;
    double bootstrap_stddev_ms = 0.0;
    double rel_diff = 0.0; // stddev / bootstrap - 1
    bool is_error = false; // |rel_diff| > 5%
    bool failed = false;   // estimator threw; counted as an error
};

/// Differences beyond 5% count as estimation errors: anything smaller cannot
/// move a 0.04 p-value beyond 0.05 or a 0.06 p-value below it.
inline constexpr double kEvalErrorThreshold = 0.05;

struct EvalReport {
    std::vector<EvalCase> rows;
    int n_datasets = 0;
    std::vector<double> quantiles;

    int cases_per_method() const;
    int errors(Method m) const;
};

/// Evaluation protocol: datasets are assigned round-robin over the
/// (icc_grid x mean_views_grid) cells; each dataset is scored at every
/// quantile with the fixed, dynamic and naive estimators against a
/// bootstrap oracle of `bootstrap_replicates` replicates.
struct EvalProtocol {
    int n_datasets = 50;
    uint64_t n_members = 120000;
    std::vector<double> icc_grid = {0.2, 0.4, 0.6};
    std::vector<double> mean_views_grid = {3.0, 10.0};
    // Tail-latency scale (~25 s median): keeps the quantile sampling noise
    // far above the 1 ms data resolution in every grid cell.
    double log_location = 10.126631103850338;
    double total_log_sd = 0.5;
    std::vector<double> quantiles = {0.5, 0.9};
    int bootstrap_replicates = kDefaultBootstrapReplicates;
    uint64_t seed = 7;
};

GeneratorSpec protocol_spec(const EvalProtocol& proto, int dataset_id);

EvalReport evaluate_methods(const EvalProtocol& proto, int workers = 0);

/// A/A simulation: generate a dataset, split members uniformly at random
/// into two arms, compare the arms, repeat.
struct AaResult {
    int replications = 0;
    int rejections = 0;
    double rate = 0.0;
    std::vector<double> p_values;
};

AaResult aa_simulation(const GeneratorSpec& spec, int replications, double alpha, Method method,
                       double q = 0.5, int bootstrap_replicates = kDefaultBootstrapReplicates,
                       uint64_t seed = 42, int workers = 0);

} // namespace quantstat
