#ifndef CCOMBAT_EVALUATION_HPP
#define CCOMBAT_EVALUATION_HPP

#include "ccombat/baseline.hpp"
#include "ccombat/parallel.hpp"
#include "ccombat/synth.hpp"
#include "ccombat/types.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ccombat {

enum class Method {
    ClinicalComBAT,
    /// Clinical-ComBAT with lambda fixed at 0, for the extrapolation contrast.
    ClinicalComBATUnregularized,
    EBComBAT,
    None,
};

std::string_view to_string(Method m);
Method method_from_string(std::string_view name);

/// Root mean squared difference between `harmonized` and truth.unbiased over
/// the given regions (all truth regions when empty). Rows are matched by
/// subject id. Throws AlignmentError on missing subjects or regions.
double rmse_to_truth(const SiteDataset& harmonized, const GroundTruth& truth,
                     const std::vector<std::string>& regions = {});

struct Condition {
    std::string label;
    std::map<std::string, double> params;
};

struct RepetitionResult {
    std::size_t condition = 0;
    int repetition = 0;
    Method method = Method::None;
    std::uint64_t seed = 0;
    /// "rmse", "d_b_before", "d_b_after" and experiment-specific extras.
    std::map<std::string, double> metrics;
    std::map<std::string, double> per_region_rmse;
    /// Empty on success.
    std::string error;
};

struct Aggregate {
    double mean = 0.0;
    /// Sample standard deviation (n - 1); 0 for a single value.
    double std = 0.0;
    std::size_t count = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct ExperimentSettings {
    GeneratorSpec spec = default_fixture();
    Hyperparameters hp;
    EBOptions eb;
    std::vector<Method> methods{Method::ClinicalComBAT, Method::EBComBAT, Method::None};
    /// Regions scored and harmonized by Clinical-ComBAT. EB-ComBAT is fit
    /// on every generated region so its priors have support.
    std::vector<std::string> regions{"wm_skeleton"};
    int repetitions = 5;
    std::uint64_t seed = 1;
    int threads = 1;
};

struct ExperimentReport {
    std::string experiment_id;
    ExperimentSettings settings;
    /// Experiment-specific scalars (bias, sizes, window width, ...).
    std::map<std::string, double> parameters;
    std::vector<Condition> conditions;
    std::vector<RepetitionResult> results;

    /// Per-repetition values of one metric, skipping failed repetitions.
    std::vector<double> values(std::size_t condition, Method method, const std::string& metric) const;
    Aggregate summary(std::size_t condition, Method method, const std::string& metric) const;
    /// Index of the condition with this label. Throws InvalidArgument.
    std::size_t condition_index(const std::string& label) const;
};

struct BiasGridConfig {
    std::vector<double> S{0.0, 0.5, 1.0, 1.5, 2.0};
    std::vector<double> M{0.25, 1.0, 1.75};
    double A = 1.1;
    std::size_t n_reference = 341;
    std::size_t n_moving = 341;
};

struct SampleSizeConfig {
    std::vector<std::size_t> sizes{5, 10, 20, 30};
    BiasSpec bias = sample_size_bias();
    std::size_t n_reference = 441;
    std::size_t n_moving = 441;
    std::size_t n_test = 100;
};

struct AgeWindowConfig {
    std::vector<double> centers{28.0, 40.0, 52.5, 65.0, 77.0};
    double half_width = 10.0;
    std::size_t n_train = 30;
    /// Tuner tolerance used for this experiment; unset keeps the settings' value.
    std::optional<double> tau = 1.75;
    BiasSpec bias = age_window_bias();
    std::size_t n_reference = 441;
    std::size_t n_moving = 441;
    std::size_t n_test = 100;
};

struct NuSweepConfig {
    std::vector<double> nu{0.0, 5.0, 10.0, 100.0};
    std::size_t n_train = 10;
    std::size_t n_test = 2000;
    BiasSpec bias = age_window_bias();
    std::size_t n_reference = 441;
};

/// Per (S, M) cell: generate, inject, fit on the whole moving site and score
/// the same subjects.
ExperimentReport run_bias_grid(const BiasGridConfig& grid, const ExperimentSettings& settings);

/// Per size: draw training subjects from a pool, fit, score a held-out test set.
ExperimentReport run_sample_size_curve(const SampleSizeConfig& config,
                                       const ExperimentSettings& settings);

/// Per center: training subjects restricted to the window, full-range test
/// set. Adds "rmse_out_of_window". Windows without enough subjects are
/// recorded as failed repetitions.
ExperimentReport run_age_window_curve(const AgeWindowConfig& config,
                                      const ExperimentSettings& settings);

/// Per nu: Clinical-ComBAT on a small moving sample; "std_ratio" is the
/// harmonized test residual std over the reference residual std.
ExperimentReport run_nu_sweep(const NuSweepConfig& config, const ExperimentSettings& settings);

/// Copy of `data` keeping only the listed regions. Throws UnknownRegion.
SiteDataset select_regions(const SiteDataset& data, const std::vector<std::string>& regions);

/// Deterministic per-job seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

}  // namespace ccombat

#endif
