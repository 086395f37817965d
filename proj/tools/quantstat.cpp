#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "quantstat/bootstrap.hpp"
#include "quantstat/errors.hpp"
#include "quantstat/estimators.hpp"
#include "quantstat/evalharness.hpp"
#include "quantstat/ingest.hpp"
#include "quantstat/pipeline.hpp"

namespace qs = quantstat;

namespace {

struct ComputeArgs {
    std::string metrics_path, exposures_path, out_path;
    std::vector<double> quantiles = {0.5, 0.9};
    std::string method = "proposed_dynamic";
    double fixed_halfwidth = qs::kDefaultHalfwidthMs;
    int bootstrap_replicates = qs::kDefaultBootstrapReplicates;
    uint64_t seed = 42;
    int partitions = 0;
    int workers = 0;
    std::string from_date, to_date;
    std::string control;
};

int run_compute(const ComputeArgs& args) {
    qs::RunConfig config;
    config.metrics_path = args.metrics_path;
    config.exposures_path = args.exposures_path;
    config.quantiles = args.quantiles;
    config.method = qs::method_from_string(args.method);
    config.fixed_halfwidth_ms = args.fixed_halfwidth;
    config.bootstrap_replicates = args.bootstrap_replicates;
    config.seed = args.seed;
    config.partitions = args.partitions;
    config.workers = args.workers;
    config.output_path = args.out_path;
    if (!args.control.empty()) config.control_variant = args.control;
    if (!args.from_date.empty() || !args.to_date.empty()) {
        if (args.from_date.empty() || args.to_date.empty())
            throw qs::ConfigError("--from and --to must be given together");
        config.day_range = qs::DayRange{qs::day_from_date(args.from_date),
                                        qs::day_from_date(args.to_date)};
        if (config.day_range->last < config.day_range->first)
            throw qs::ConfigError("--to is before --from");
    }

    const qs::MetricsParseResult metrics = qs::parse_metrics(config.metrics_path);
    const std::vector<qs::ExposureRecord> exposures = qs::parse_exposures(config.exposures_path);
    if (metrics.rejected_negative > 0)
        std::cerr << "note: dropped " << metrics.rejected_negative
                  << " rows with negative load times\n";

    const qs::PipelineResult result =
        qs::run_pipeline(metrics.records, exposures, config.pipeline_options());
    const std::vector<qs::ReportRow> rows = qs::to_report_rows(result, config.control_variant);
    qs::write_report_jsonl(rows, config.output_path);
    qs::print_report_summary(rows, std::cout);
    std::cout << rows.size() << " rows written to " << config.output_path << "\n";
    return 0;
}

struct BootstrapArgs {
    std::string metrics_path, exposures_path;
    std::string experiment, segment = "seg1", variant;
    std::string geo, platform, page_key;
    double q = 0.9;
    int replicates = qs::kDefaultBootstrapReplicates;
    uint64_t seed = 42;
    int workers = 0;
};

int run_bootstrap(const BootstrapArgs& args) {
    const qs::MetricsParseResult metrics = qs::parse_metrics(args.metrics_path);

    std::optional<qs::ExposureBitmaps> bitmaps;
    std::optional<qs::VariantKey> variant_key;
    qs::Dictionaries dicts;
    std::vector<qs::ExposureRecord> exposures;
    if (!args.experiment.empty()) {
        if (args.exposures_path.empty() || args.variant.empty())
            throw qs::ConfigError("--experiment needs --exposures and --variant");
        exposures = qs::parse_exposures(args.exposures_path);
    }

    // Collect the requested cell's views grouped by member, with the same
    // exposed-on-or-before join the pipeline uses.
    qs::NormalizedInputs inputs = qs::normalize(metrics.records, exposures);
    if (!args.experiment.empty()) {
        const auto key = inputs.dictionaries.variant.lookup(
            {args.experiment, args.segment, args.variant});
        if (!key)
            throw qs::ConfigError("variant (" + args.experiment + "," + args.segment + "," +
                                  args.variant + ") not present in the exposures");
        variant_key = qs::VariantKey{*key};
        int32_t lo = inputs.exposures.front().day, hi = lo;
        for (const auto& e : inputs.exposures) {
            lo = std::min(lo, e.day);
            hi = std::max(hi, e.day);
        }
        for (const auto& m : metrics.records) hi = std::max(hi, m.day);
        bitmaps = qs::ExposureBitmaps::build(inputs.exposures, {lo, hi});
    }

    std::map<int64_t, std::vector<int64_t>> by_member;
    for (const auto& rec : metrics.records) {
        if (!args.geo.empty() && rec.geo != args.geo) continue;
        if (!args.platform.empty() && rec.platform != args.platform) continue;
        if (!args.page_key.empty() && rec.page_key != args.page_key) continue;
        if (bitmaps && !bitmaps->contains(*variant_key, rec.day, rec.member_id)) continue;
        by_member[rec.member_id].push_back(rec.load_time_ms);
    }

    qs::MemberViews dataset;
    dataset.reserve(by_member.size());
    for (auto& [member, views] : by_member) dataset.push_back(std::move(views));
    if (dataset.empty()) throw qs::EmptyDataError("no views match the requested cell");

    const qs::SparseHistogram hist = qs::build_histogram(dataset);
    const qs::BootstrapResult boot =
        qs::bootstrap_stddev(dataset, args.q, args.replicates, args.seed, args.workers);

    nlohmann::json j{
        {"q", args.q},
        {"quantile_ms", qs::empirical_quantile(hist, args.q)},
        {"stddev_ms", boot.stddev_ms},
        {"mean_replicate_quantile_ms", boot.mean_quantile_ms},
        {"replicates", boot.replicates},
        {"seed", boot.seed},
        {"n0", dataset.size()},
        {"total_views", hist.total()},
        {"method", "bootstrap"},
    };
    std::cout << j.dump() << "\n";
    return 0;
}

struct GenerateArgs {
    std::string out_metrics, out_exposures;
    uint64_t members = 5000;
    double mean_views = 10.0;
    double icc = 0.6;
    double log_location = 5.52146091786225;
    double log_sd = 0.5;
    double tau = -1.0, sigma_w = -1.0; // explicit override of the icc split
    uint64_t seed = 1;
    uint64_t zero_view_members = 0;
    std::string experiment = "exp1", segment = "seg1";
    std::vector<std::string> variants = {"control", "treatment"};
    std::string first_day = "2023-04-01";
    int days = 7;
    std::string geo = "us", platform = "web", page_key = "feed";
};

int run_generate(const GenerateArgs& args) {
    qs::GeneratorSpec spec;
    if (args.tau >= 0.0 || args.sigma_w >= 0.0) {
        if (args.tau < 0.0 || args.sigma_w < 0.0)
            throw qs::ConfigError("--tau and --sigma-w must be given together");
        spec.member_effect_sd = args.tau;
        spec.within_member_sd = args.sigma_w;
        spec.n_members = args.members;
        spec.mean_views = args.mean_views;
        spec.log_location = args.log_location;
        spec.seed = args.seed;
    } else {
        spec = qs::clustered_spec(args.members, args.mean_views, args.icc, args.log_location,
                                  args.log_sd, args.seed);
    }

    qs::ExperimentLayout layout;
    layout.experiment_id = args.experiment;
    layout.segment_id = args.segment;
    layout.variants = args.variants;
    layout.first_day = qs::day_from_date(args.first_day);
    layout.n_days = args.days;
    layout.geo = args.geo;
    layout.platform = args.platform;
    layout.page_key = args.page_key;
    layout.zero_view_members = args.zero_view_members;

    const qs::SyntheticExperiment experiment = qs::generate_experiment(spec, layout);
    qs::write_metrics_csv(experiment.metrics, args.out_metrics);
    if (!args.out_exposures.empty())
        qs::write_exposures_csv(experiment.exposures, args.out_exposures);

    std::cout << "wrote " << experiment.metrics.size() << " metric rows ("
              << spec.n_members << " members, icc " << std::setprecision(3) << spec.icc() << ")";
    if (!args.out_exposures.empty())
        std::cout << " and " << experiment.exposures.size() << " exposure rows";
    std::cout << "\n";
    return 0;
}

struct EvaluateArgs {
    int datasets = 50;
    uint64_t members = 120000;
    std::vector<double> icc_grid = {0.2, 0.4, 0.6};
    std::vector<double> pbar_grid = {3.0, 10.0};
    std::vector<double> quantiles = {0.5, 0.9};
    double log_location = 10.126631103850338;
    double log_sd = 0.5;
    int replicates = qs::kDefaultBootstrapReplicates;
    uint64_t seed = 7;
    int workers = 0;
    std::string out_path;
};

int run_evaluate(const EvaluateArgs& args) {
    qs::EvalProtocol proto;
    proto.n_datasets = args.datasets;
    proto.n_members = args.members;
    proto.icc_grid = args.icc_grid;
    proto.mean_views_grid = args.pbar_grid;
    proto.log_location = args.log_location;
    proto.total_log_sd = args.log_sd;
    proto.quantiles = args.quantiles;
    proto.bootstrap_replicates = args.replicates;
    proto.seed = args.seed;

    const qs::EvalReport report = qs::evaluate_methods(proto, args.workers);

    if (!args.out_path.empty()) {
        std::ofstream out(args.out_path);
        if (!out) throw qs::Error("cannot write " + args.out_path);
        for (const auto& row : report.rows) {
            nlohmann::json j{
                {"dataset", row.dataset_id},   {"icc", row.icc},
                {"mean_views", row.mean_views}, {"q", row.q},
                {"method", qs::to_string(row.method)},
                {"stddev_ms", row.stddev_ms},  {"bootstrap_stddev_ms", row.bootstrap_stddev_ms},
                {"rel_diff", row.rel_diff},    {"is_error", row.is_error},
            };
            out << j.dump() << "\n";
        }
    }

    // Error counts per stratum, in the shape of the evaluation tables:
    // one line per (icc, mean views, quantile), then per-method totals.
    std::map<std::tuple<double, double, double>, std::map<qs::Method, std::pair<int, int>>> strata;
    for (const auto& row : report.rows) {
        auto& cell = strata[{row.icc, row.mean_views, row.q}][row.method];
        ++cell.first;
        if (row.is_error) ++cell.second;
    }
    std::cout << std::left << std::setw(6) << "icc" << std::setw(12) << "mean_views"
              << std::setw(10) << "quantile" << std::right << std::setw(9) << "datasets"
              << std::setw(8) << "fixed" << std::setw(9) << "dynamic" << std::setw(7) << "naive"
              << "\n";
    for (const auto& [key, methods] : strata) {
        const auto& [icc, pbar, q] = key;
        std::cout << std::left << std::setw(6) << std::setprecision(2) << icc << std::setw(12)
                  << pbar << std::setw(10) << q << std::right << std::setw(9)
                  << methods.at(qs::Method::proposed_fixed).first << std::setw(8)
                  << methods.at(qs::Method::proposed_fixed).second << std::setw(9)
                  << methods.at(qs::Method::proposed_dynamic).second << std::setw(7)
                  << methods.at(qs::Method::naive_iid).second << "\n";
    }
    std::cout << std::left << std::setw(28) << "Total" << std::right << std::setw(9)
              << report.cases_per_method() << std::setw(8)
              << report.errors(qs::Method::proposed_fixed) << std::setw(9)
              << report.errors(qs::Method::proposed_dynamic) << std::setw(7)
              << report.errors(qs::Method::naive_iid) << "\n";
    return 0;
}

struct AaArgs {
    int replications = 500;
    uint64_t members = 3000;
    double mean_views = 10.0;
    double icc = 0.6;
    double log_location = 5.52146091786225;
    double log_sd = 0.5;
    double alpha = 0.05;
    double q = 0.5;
    std::string method = "proposed_dynamic";
    int replicates = qs::kDefaultBootstrapReplicates;
    uint64_t seed = 42;
    int workers = 0;
};

int run_aa(const AaArgs& args) {
    const qs::GeneratorSpec spec = qs::clustered_spec(args.members, args.mean_views, args.icc,
                                                      args.log_location, args.log_sd, args.seed);
    const qs::AaResult result =
        qs::aa_simulation(spec, args.replications, args.alpha, qs::method_from_string(args.method),
                          args.q, args.replicates, args.seed, args.workers);
    nlohmann::json j{
        {"replications", result.replications},
        {"rejections", result.rejections},
        {"rate", result.rate},
        {"alpha", args.alpha},
        {"method", args.method},
        {"q", args.q},
        {"icc", spec.icc()},
        {"mean_views", spec.mean_views},
        {"members", spec.n_members},
    };
    std::cout << j.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantstat: quantile metrics and cluster-robust variance for A/B tests"};
    app.require_subcommand(1);

    ComputeArgs compute_args;
    CLI::App* compute = app.add_subcommand(
        "compute", "Run the batch pipeline over metrics and exposure files");
    compute->add_option("--metrics", compute_args.metrics_path, "Metrics CSV")
        ->required()
        ->check(CLI::ExistingFile);
    compute->add_option("--exposures", compute_args.exposures_path, "Exposures CSV")
        ->required()
        ->check(CLI::ExistingFile);
    compute->add_option("--out", compute_args.out_path, "Output report (JSON lines)")->required();
    compute->add_option("--quantiles", compute_args.quantiles, "Quantile fractions")
        ->delimiter(',');
    compute->add_option("--method", compute_args.method,
                        "proposed_dynamic|proposed_fixed|naive_iid|bootstrap");
    compute->add_option("--fixed-halfwidth", compute_args.fixed_halfwidth,
                        "Fixed density interval half-width (ms)");
    compute->add_option("--bootstrap-B", compute_args.bootstrap_replicates,
                        "Bootstrap replicates (bootstrap method)");
    compute->add_option("--seed", compute_args.seed, "Random seed");
    compute->add_option("--partitions", compute_args.partitions, "Partition count");
    compute->add_option("--workers", compute_args.workers, "Worker threads");
    compute->add_option("--from", compute_args.from_date, "Analysis range start (YYYY-MM-DD)");
    compute->add_option("--to", compute_args.to_date, "Analysis range end (YYYY-MM-DD)");
    compute->add_option("--control", compute_args.control,
                        "Control variant name for p-value columns");

    BootstrapArgs bootstrap_args;
    CLI::App* bootstrap = app.add_subcommand(
        "bootstrap", "Member-level bootstrap stddev for one cell (the oracle)");
    bootstrap->add_option("--metrics", bootstrap_args.metrics_path, "Metrics CSV")
        ->required()
        ->check(CLI::ExistingFile);
    bootstrap->add_option("--exposures", bootstrap_args.exposures_path, "Exposures CSV")
        ->check(CLI::ExistingFile);
    bootstrap->add_option("--experiment", bootstrap_args.experiment, "Experiment id filter");
    bootstrap->add_option("--segment", bootstrap_args.segment, "Segment id filter");
    bootstrap->add_option("--variant", bootstrap_args.variant, "Variant filter");
    bootstrap->add_option("--geo", bootstrap_args.geo, "Geo filter");
    bootstrap->add_option("--platform", bootstrap_args.platform, "Platform filter");
    bootstrap->add_option("--page", bootstrap_args.page_key, "Page key filter");
    bootstrap->add_option("--q", bootstrap_args.q, "Quantile fraction");
    bootstrap->add_option("--B", bootstrap_args.replicates, "Replicates");
    bootstrap->add_option("--seed", bootstrap_args.seed, "Random seed");
    bootstrap->add_option("--workers", bootstrap_args.workers, "Worker threads");

    GenerateArgs generate_args;
    CLI::App* generate = app.add_subcommand(
        "generate", "Write a synthetic clustered dataset in the pipeline input formats");
    generate->add_option("--out-metrics", generate_args.out_metrics, "Metrics CSV to write")
        ->required();
    generate->add_option("--out-exposures", generate_args.out_exposures,
                         "Exposures CSV to write (optional)");
    generate->add_option("--members", generate_args.members, "Member count");
    generate->add_option("--mean-views", generate_args.mean_views, "Mean views per member");
    generate->add_option("--icc", generate_args.icc, "Log-scale intraclass correlation");
    generate->add_option("--log-location", generate_args.log_location, "Lognormal location");
    generate->add_option("--log-sd", generate_args.log_sd, "Total lognormal scale");
    generate->add_option("--tau", generate_args.tau, "Member effect sd (overrides --icc)");
    generate->add_option("--sigma-w", generate_args.sigma_w, "Within-member sd (with --tau)");
    generate->add_option("--seed", generate_args.seed, "Random seed");
    generate->add_option("--zero-view-members", generate_args.zero_view_members,
                         "Exposure-only members to append");
    generate->add_option("--experiment", generate_args.experiment, "Experiment id");
    generate->add_option("--segment", generate_args.segment, "Segment id");
    generate->add_option("--variants", generate_args.variants, "Variant names")->delimiter(',');
    generate->add_option("--first-day", generate_args.first_day, "First day (YYYY-MM-DD)");
    generate->add_option("--days", generate_args.days, "Number of days");
    generate->add_option("--geo", generate_args.geo, "Geo code");
    generate->add_option("--platform", generate_args.platform, "Platform code");
    generate->add_option("--page", generate_args.page_key, "Page key");

    EvaluateArgs evaluate_args;
    CLI::App* evaluate = app.add_subcommand(
        "evaluate", "Score fixed/dynamic/naive estimates against the bootstrap oracle");
    evaluate->add_option("--datasets", evaluate_args.datasets, "Dataset count");
    evaluate->add_option("--members", evaluate_args.members, "Members per dataset");
    evaluate->add_option("--icc-grid", evaluate_args.icc_grid, "ICC grid")->delimiter(',');
    evaluate->add_option("--pbar-grid", evaluate_args.pbar_grid, "Mean-views grid")
        ->delimiter(',');
    evaluate->add_option("--quantiles", evaluate_args.quantiles, "Quantile fractions")
        ->delimiter(',');
    evaluate->add_option("--log-location", evaluate_args.log_location, "Lognormal location");
    evaluate->add_option("--log-sd", evaluate_args.log_sd, "Total lognormal scale");
    evaluate->add_option("--B", evaluate_args.replicates, "Bootstrap replicates");
    evaluate->add_option("--seed", evaluate_args.seed, "Random seed");
    evaluate->add_option("--workers", evaluate_args.workers, "Worker threads");
    evaluate->add_option("--out", evaluate_args.out_path, "Per-case JSONL output");

    AaArgs aa_args;
    CLI::App* aa = app.add_subcommand("aa-sim", "A/A false-positive-rate simulation");
    aa->add_option("--replications", aa_args.replications, "Replication count");
    aa->add_option("--members", aa_args.members, "Members per replication");
    aa->add_option("--mean-views", aa_args.mean_views, "Mean views per member");
    aa->add_option("--icc", aa_args.icc, "Log-scale intraclass correlation");
    aa->add_option("--log-location", aa_args.log_location, "Lognormal location");
    aa->add_option("--log-sd", aa_args.log_sd, "Total lognormal scale");
    aa->add_option("--alpha", aa_args.alpha, "Significance level");
    aa->add_option("--q", aa_args.q, "Quantile fraction");
    aa->add_option("--method", aa_args.method, "Estimation method");
    aa->add_option("--B", aa_args.replicates, "Bootstrap replicates (bootstrap method)");
    aa->add_option("--seed", aa_args.seed, "Random seed");
    aa->add_option("--workers", aa_args.workers, "Worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(compute)) return run_compute(compute_args);
        if (app.got_subcommand(bootstrap)) return run_bootstrap(bootstrap_args);
        if (app.got_subcommand(generate)) return run_generate(generate_args);
        if (app.got_subcommand(evaluate)) return run_evaluate(evaluate_args);
        if (app.got_subcommand(aa)) return run_aa(aa_args);
    } catch (const qs::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
