// ccombat: fit, apply, check and evaluate sitewise harmonization models from
// the command line. Exit codes: 0 ok, 2 schema, 3 numeric, 4 reference errors.

#include "ccombat/clinical.hpp"
#include "ccombat/evaluation.hpp"
#include "ccombat/io.hpp"
#include "ccombat/synth.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>

using namespace ccombat;
namespace fs = std::filesystem;

namespace {

struct Globals {
    /// Set when --threads was given; it overrides the config.
    std::optional<int> threads;
    std::optional<std::uint64_t> seed;
};

io::Table read_table(const fs::path& path) { return io::parse_csv(io::read_file(path)); }

io::TableSchema schema_for(const io::ModelFile& model) {
    io::TableSchema schema;
    schema.metric_name = model.bundle.metric_name;
    schema.covariates = model.covariates;
    if (schema.covariates.empty()) {
        for (const auto& n : model.bundle.basis().covariate_names) schema.covariates.push_back({n, {}, {}});
    }
    return schema;
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        io::write_file_atomic(path, text);
    }
}

std::string provenance(const HarmonizationBundle& b) {
    return "ccombat:" + b.moving_site_id + "->" + b.reference_site_id;
}

// Harmonizes the metric cells of `table` in place; every other cell is kept
// byte for byte.
io::Table harmonize_table(const io::Table& table, const io::ModelFile& model) {
    const auto schema = schema_for(model);
    const auto records = io::table_to_records(table, schema);
    const auto harmonized = ccombat::apply(model.bundle, records);
    io::Table out = table;
    const auto regions = io::region_columns(table, schema);
    auto prov = out.column(io::kProvenanceColumn);
    if (!prov) {
        out.header.push_back(io::kProvenanceColumn);
        for (auto& row : out.rows) row.emplace_back();
        prov = out.header.size() - 1;
    }
    bool already = false;
    for (std::size_t i = 0; i < out.rows.size(); ++i) {
        auto& row = out.rows[i];
        for (const auto& r : regions) row[*out.column(r)] = io::format_double(harmonized[i].metrics.at(r));
        auto& cell = row[*prov];
        if (!cell.empty()) {
            already = true;
            cell += ";";
        }
        cell += provenance(model.bundle);
    }
    if (already)
        std::cerr << "warning: input already carries '" << io::kProvenanceColumn
                  << "' entries; harmonizing again is not idempotent\n";
    return out;
}

int cmd_fit(const Globals& g, const std::string& ref_path, const std::string& mov_path,
            const std::string& config_path, const std::string& out_path, const std::string& table_path) {
    const auto config = io::load_run_config(config_path);
    const auto reference = io::table_to_dataset(read_table(ref_path), config.schema);
    const auto moving = io::table_to_dataset(read_table(mov_path), config.schema);
    io::ModelFile model;
    model.bundle = fit_bundle(reference, moving, config.hp,
                              ExecutionOptions{g.threads.value_or(config.threads.value_or(1))});
    model.covariates = config.schema.covariates;
    io::save_model(out_path, model);

    std::ostringstream table;
    table << "region\td_b_before\td_b_after\tlambda_first\tconverged\n";
    for (const auto& [region, m] : model.bundle.models) {
        const auto& lambda = model.bundle.tuned_lambda.at(region);
        table << region << '\t' << io::format_double(model.bundle.qc_before.at(region)) << '\t'
              << io::format_double(model.bundle.qc.at(region)) << '\t'
              << io::format_double(lambda.size() ? lambda(0) : 0.0) << '\t'
              << (model.bundle.tune_converged.at(region) ? "true" : "false") << '\n';
    }
    std::cout << table.str();
    if (!table_path.empty()) emit(table_path, table.str());
    return 0;
}

int cmd_apply(const std::string& model_path, const std::string& in_path, const std::string& out_path, bool as_long) {
    const auto model = io::load_model(model_path);
    const auto input = read_table(in_path);
    const auto schema = schema_for(model);
    const auto wide = io::is_long_layout(input) ? io::long_to_wide(input, schema) : input;
    auto out = harmonize_table(wide, model);
    if (as_long) out = io::wide_to_long(out, schema);
    io::write_file_atomic(out_path, io::to_csv(out));
    return 0;
}

int cmd_qc(const std::string& model_path, const std::string& ref_path, const std::string& mov_path,
           const std::string& table_path) {
    const auto model = io::load_model(model_path);
    const auto schema = schema_for(model);
    const auto reference = io::table_to_dataset(read_table(ref_path), schema);
    const auto moving = io::table_to_dataset(read_table(mov_path), schema);
    const auto harmonized = ccombat::apply(model.bundle, moving.records);
    std::ostringstream table;
    table << "region\td_b\td_b_model\n";
    for (const auto& [region, m] : model.bundle.models) {
        const double d = qc_bhattacharyya(reference, harmonized, region, m.beta_ref, m.basis);
        table << region << '\t' << io::format_double(d) << '\t' << io::format_double(model.bundle.qc.at(region))
              << '\n';
    }
    std::cout << table.str();
    if (!table_path.empty()) emit(table_path, table.str());
    return 0;
}

int cmd_tune(const std::string& ref_path, const std::string& mov_path, const std::string& config_path,
             const std::vector<std::string>& only, const std::string& table_path) {
    const auto config = io::load_run_config(config_path);
    const auto reference = io::table_to_dataset(read_table(ref_path), config.schema);
    const auto moving = io::table_to_dataset(read_table(mov_path), config.schema);
    const auto regions = only.empty() ? reference.region_ids() : only;
    std::ostringstream summary;
    std::ostringstream trace;
    summary << "region\tmultiplier\tconverged\titerations\td_min\td_max\td_1\td_2\n";
    trace << "region\tmultiplier\tcriterion\n";
    for (const auto& region : regions) {
        TuneResult t;
        try {
            t = auto_tune(reference, moving, region, config.hp);
        } catch (const Error& e) {
            rethrow_for_region(e, region);
        }
        const auto& d = t.diagnostics;
        summary << region << '\t' << io::format_double(d.multiplier) << '\t' << (d.converged ? "true" : "false")
                << '\t' << d.iterations << '\t' << io::format_double(d.d_min) << '\t' << io::format_double(d.d_max)
                << '\t' << io::format_double(d.d_1) << '\t' << io::format_double(d.d_2) << '\n';
        for (const auto& [mult, crit] : d.lambda_trace)
            trace << region << '\t' << io::format_double(mult) << '\t' << io::format_double(crit) << '\n';
        if (!d.converged) std::cerr << "warning: region '" << region << "' did not meet the tuning criterion\n";
    }
    std::cout << summary.str();
    if (!table_path.empty()) emit(table_path, trace.str());
    return 0;
}

int cmd_simulate(const Globals& g, const std::string& spec_path, const std::string& bias_path,
                 const std::string& out_path, const std::string& truth_path, const std::string& site,
                 std::optional<std::size_t> n, bool as_long) {
    auto spec = io::generator_spec_from_json(io::json::parse(io::read_file(spec_path)));
    if (g.seed) spec.seed = *g.seed;
    if (n) spec.n_subjects = *n;
    SyntheticSite generated;
    if (bias_path.empty()) {
        if (!site.empty()) spec.site_id = site;
        generated = generate_reference(spec);
    } else {
        const auto bias = io::bias_from_json(io::json::parse(io::read_file(bias_path)));
        generated = inject_bias(spec, bias, spec.n_subjects, {spec.age_min, spec.age_max}, spec.seed,
                                site.empty() ? "moving" : site);
    }
    io::TableSchema schema;
    schema.metric_name = spec.metric_name;
    schema.covariates = {{"age", io::CovariateType::Numeric, {}}};
    auto table = io::dataset_to_table(generated.data, schema);
    if (as_long) table = io::wide_to_long(table, schema);
    io::write_file_atomic(out_path, io::to_csv(table));
    if (!truth_path.empty()) {
        io::Table t;
        t.header = {"subject_id"};
        for (const auto& r : generated.truth.region_ids) t.header.push_back(r);
        for (std::size_t j = 0; j < generated.truth.subject_ids.size(); ++j) {
            std::vector<std::string> row{generated.truth.subject_ids[j]};
            for (Eigen::Index r = 0; r < generated.truth.unbiased.cols(); ++r)
                row.push_back(io::format_double(generated.truth.unbiased(static_cast<Eigen::Index>(j), r)));
            t.rows.push_back(std::move(row));
        }
        io::write_file_atomic(truth_path, io::to_csv(t));
    }
    return 0;
}

int cmd_evaluate(const Globals& g, const std::string& name, const std::string& config_path,
                 const std::string& out_path, const std::string& csv_path, const std::string& table_path) {
    auto run = config_path.empty() ? io::RunConfig{} : io::load_run_config(config_path);
    if (g.seed) run.seed = g.seed;
    if (g.threads) run.threads = g.threads;
    const auto config = io::experiment_from_json(run);
    const auto report = io::run_experiment(name, config);
    emit(out_path, io::to_json(report).dump(2) + "\n");
    if (!csv_path.empty()) emit(csv_path, io::report_flat_csv(report));
    if (!table_path.empty()) emit(table_path, io::report_table_tsv(report));
    std::size_t failed = 0;
    for (const auto& r : report.results) {
        if (!r.error.empty()) {
            if (failed++ == 0) std::cerr << "warning: " << r.error << '\n';
        }
    }
    if (failed) std::cerr << "warning: " << failed << " repetition(s) failed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sitewise harmonization of per-region brain metrics"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    std::uint64_t seed = 0;
    int threads = 1;
    auto* threads_opt = app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
    auto* seed_opt = app.add_option("--seed", seed, "Override the configured seed");

    std::string ref, mov, config, out, model, in, table, spec, bias, truth, site, experiment, csv;
    std::vector<std::string> regions;
    std::optional<std::size_t> n_subjects;
    bool as_long = false;

    auto* fit = app.add_subcommand("fit", "Fit a moving site onto a reference site");
    fit->add_option("--reference", ref)->required()->check(CLI::ExistingFile);
    fit->add_option("--moving", mov)->required()->check(CLI::ExistingFile);
    fit->add_option("--config", config)->required()->check(CLI::ExistingFile);
    fit->add_option("--out", out, "Model file")->required();
    fit->add_option("--emit-table", table, "Per-region QC table (TSV)");

    auto* apply_cmd = app.add_subcommand("apply", "Harmonize a table with a fitted model");
    apply_cmd->add_option("--model", model)->required()->check(CLI::ExistingFile);
    apply_cmd->add_option("--in", in)->required()->check(CLI::ExistingFile);
    apply_cmd->add_option("--out", out)->required();
    apply_cmd->add_flag("--long", as_long, "Write the long layout (one row per subject and region)");

    auto* qc = app.add_subcommand("qc", "Bhattacharyya distances after harmonization");
    qc->add_option("--model", model)->required()->check(CLI::ExistingFile);
    qc->add_option("--reference", ref)->required()->check(CLI::ExistingFile);
    qc->add_option("--moving", mov)->required()->check(CLI::ExistingFile);
    qc->add_option("--emit-table", table, "QC table (TSV)");

    auto* tune = app.add_subcommand("tune", "Run regularization auto-tuning and report diagnostics");
    tune->add_option("--reference", ref)->required()->check(CLI::ExistingFile);
    tune->add_option("--moving", mov)->required()->check(CLI::ExistingFile);
    tune->add_option("--config", config)->required()->check(CLI::ExistingFile);
    tune->add_option("--region", regions, "Only these regions");
    tune->add_option("--emit-table", table, "Lambda trace (TSV)");

    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic site");
    simulate->add_option("--spec", spec, "Generator spec (JSON)")->required()->check(CLI::ExistingFile);
    simulate->add_option("--bias", bias, "Bias spec (JSON); omit for a reference site")->check(CLI::ExistingFile);
    simulate->add_option("--out", out)->required();
    simulate->add_option("--truth", truth, "Ground-truth table");
    simulate->add_option("--site", site, "Site id");
    simulate->add_option("--n", n_subjects, "Number of subjects");
    simulate->add_flag("--long", as_long, "Write the long layout");

    auto* evaluate = app.add_subcommand("evaluate", "Run an evaluation experiment");
    evaluate->add_option("--experiment", experiment, "bias_grid, sample_size, age_window or nu_sweep")
        ->required()
        ->check(CLI::IsMember({"bias_grid", "sample_size", "age_window", "nu_sweep"}));
    evaluate->add_option("--config", config)->check(CLI::ExistingFile);
    evaluate->add_option("--out", out, "Report JSON (default: stdout)");
    evaluate->add_option("--csv", csv, "Flat CSV of every repetition");
    evaluate->add_option("--emit-table", table, "Aggregate table (TSV)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    if (*seed_opt) g.seed = seed;
    if (*threads_opt) g.threads = threads;

    try {
        if (*fit) return cmd_fit(g, ref, mov, config, out, table);
        if (*apply_cmd) return cmd_apply(model, in, out, as_long);
        if (*qc) return cmd_qc(model, ref, mov, table);
        if (*tune) return cmd_tune(ref, mov, config, regions, table);
        if (*simulate) return cmd_simulate(g, spec, bias, out, truth, site, n_subjects, as_long);
        if (*evaluate) return cmd_evaluate(g, experiment, config, out, csv, table);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return io::exit_code_for(e.kind());
    } catch (const io::json::exception& e) {
        std::cerr << "error: SchemaError: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
