#ifndef CCOMBAT_IO_HPP
#define CCOMBAT_IO_HPP

#include "ccombat/error.hpp"
#include "ccombat/evaluation.hpp"
#include "ccombat/synth.hpp"
#include "ccombat/types.hpp"

#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ccombat::io {

using json = nlohmann::json;

inline constexpr int kModelSchemaVersion = 1;
inline constexpr const char* kProvenanceColumn = "harmonized_by";

/// Exit-code policy of the CLI: 2 schema, 3 numeric, 4 reference errors.
int exit_code_for(ErrorKind kind);

/// 17 significant digits, enough to read back the exact double.
std::string format_double(double v);
/// Whole-string parse; throws SchemaError on junk or non-finite values.
double parse_double(const std::string& text, const std::string& context);

/// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// Raw CSV contents with the header kept in file order.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column index or nullopt.
    std::optional<std::size_t> column(const std::string& name) const;
};

/// RFC 4180 style: quoted fields may contain commas, quotes and newlines.
Table parse_csv(const std::string& text);
std::string to_csv(const Table& table);

enum class CovariateType { Numeric, Categorical };

struct CovariateSpec {
    std::string name;
    CovariateType type = CovariateType::Numeric;
    /// Categorical only: cell text -> numeric code.
    std::map<std::string, double> encoding;

    double decode(const std::string& cell, const std::string& context) const;
    std::string encode(double value) const;
};

/// Column roles for converting a table into datasets. Every column that is
/// not subject_id, site_id, a covariate or the provenance column is a region.
struct TableSchema {
    std::vector<CovariateSpec> covariates;
    std::string metric_name = "value";
};

/// Region columns of a wide table under `schema`, in column order.
std::vector<std::string> region_columns(const Table& table, const TableSchema& schema);

/// Records of a wide table; long tables are converted first.
std::vector<SubjectRecord> table_to_records(const Table& table, const TableSchema& schema);

/// All rows of a table as one site. Mixed site_id values are rejected
/// unless `site_filter` selects one of them.
SiteDataset table_to_dataset(const Table& table, const TableSchema& schema,
                             const std::optional<std::string>& site_filter = std::nullopt);

/// Wide table: subject_id, site_id, covariates, regions.
Table dataset_to_table(const SiteDataset& data, const TableSchema& schema);

/// Long layout: subject_id, site_id, covariates, region, value.
Table wide_to_long(const Table& wide, const TableSchema& schema);
Table long_to_wide(const Table& long_table, const TableSchema& schema);
bool is_long_layout(const Table& table);

/// Throws SchemaError when `obj` has keys outside `allowed`.
void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& context);

json to_json(const Hyperparameters& hp);
Hyperparameters hyperparameters_from_json(const json& j);

json to_json(const GeneratorSpec& spec);
GeneratorSpec generator_spec_from_json(const json& j);

json to_json(const BiasSpec& bias);
BiasSpec bias_from_json(const json& j);

json to_json(const CovariateSpec& c);
CovariateSpec covariate_spec_from_json(const json& j);

/// Parsed and validated run configuration.
struct RunConfig {
    TableSchema schema;
    Hyperparameters hp;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    /// Raw "experiment" section; validated by experiment_from_json.
    json experiment = json::object();
};

RunConfig run_config_from_json(const json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Experiment settings plus the experiment-specific grid.
struct ExperimentConfig {
    ExperimentSettings settings;
    BiasGridConfig bias_grid;
    SampleSizeConfig sample_size;
    AgeWindowConfig age_window;
    NuSweepConfig nu_sweep;
};

ExperimentConfig experiment_from_json(const RunConfig& run);
ExperimentReport run_experiment(const std::string& name, const ExperimentConfig& config);

/// A fitted bundle plus the covariate encodings used to read tables.
struct ModelFile {
    HarmonizationBundle bundle;
    std::vector<CovariateSpec> covariates;
};

json to_json(const ModelFile& model);
/// Throws UnsupportedVersion for newer schema versions, SchemaError otherwise.
ModelFile model_from_json(const json& j);

/// Canonical text of the model (stable key order, exact doubles).
std::string serialize_model(const ModelFile& model);
void save_model(const std::filesystem::path& path, const ModelFile& model);
ModelFile load_model(const std::filesystem::path& path);

bool bundles_equal(const HarmonizationBundle& a, const HarmonizationBundle& b);

/// Everything needed to rerun the experiment (thread count excluded).
json to_json(const ExperimentReport& report);
/// experiment, condition, repetition, method, metric, value
std::string report_flat_csv(const ExperimentReport& report);
/// One row per condition and method: condition parameters, then mean and
/// std of every metric.
std::string report_table_tsv(const ExperimentReport& report);

}  // namespace ccombat::io

#endif
