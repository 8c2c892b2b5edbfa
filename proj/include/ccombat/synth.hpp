#ifndef CCOMBAT_SYNTH_HPP
#define CCOMBAT_SYNTH_HPP

#include "ccombat/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ccombat {

// Seeded synthetic cohorts: a normative reference population with
// parametric age curves per region, and moving sites with controlled
// additive (A), slope (S) and noise-scale (M) biases.

enum class AgeDistributionKind { Uniform, TruncatedGaussian };

struct AgeDistribution {
    AgeDistributionKind kind = AgeDistributionKind::Uniform;
    /// TruncatedGaussian only.
    double mean = 0.0;
    double std = 1.0;
};

struct RegionCurve {
    std::string region_id;
    /// Baseline value b.
    double intercept = 0.0;
    /// Coefficients of t, t^2, ... where t is the standardized age.
    std::vector<double> coefficients;
    double noise_std = 1.0;

    /// Age effect without the intercept.
    double age_effect(double t) const;
};

struct GeneratorSpec {
    std::string site_id = "reference";
    std::string metric_name = "md";
    std::size_t n_subjects = 441;
    double age_min = 18.0;
    double age_max = 87.0;
    AgeDistribution age_distribution;
    /// t = (age - age_center) / age_scale
    double age_center = 52.5;
    double age_scale = 34.5;
    std::vector<RegionCurve> regions;
    std::uint64_t seed = 0;

    void validate() const;
    double standardized_age(double age) const { return (age - age_center) / age_scale; }
};

struct BiasSpec {
    double A = 1.0;
    double S = 1.0;
    double M = 1.0;
    /// Overrides every region's baseline when set.
    std::optional<double> b;

    void validate() const;
};

/// Latent draws of a cohort; realizing them with a bias gives a dataset.
struct Cohort {
    std::vector<std::string> subject_ids;
    Eigen::VectorXd ages;
    /// Subjects x regions standard normal draws.
    Eigen::MatrixXd eps;
};

/// Values each subject would have had at the reference site.
struct GroundTruth {
    std::vector<std::string> subject_ids;
    std::vector<std::string> region_ids;
    /// Subjects x regions b + curve(age).
    Eigen::MatrixXd clean;
    /// Subjects x regions b + curve(age) + noise_std * eps.
    Eigen::MatrixXd unbiased;

    /// Rows for the given subjects, in that order. Throws AlignmentError.
    GroundTruth subset(const std::vector<std::string>& subject_ids) const;
};

struct SyntheticSite {
    SiteDataset data;
    GroundTruth truth;
};

/// Draws ages and noise. Each region owns its own noise stream, so results
/// do not depend on the order regions are generated in.
Cohort draw_cohort(const GeneratorSpec& spec, std::size_t n_subjects,
                   std::pair<double, double> age_range, std::uint64_t seed,
                   const std::string& id_prefix);

SyntheticSite realize(const GeneratorSpec& spec, const Cohort& cohort, const BiasSpec& bias,
                      const std::string& site_id);

SyntheticSite generate_reference(const GeneratorSpec& spec);

SyntheticSite inject_bias(const GeneratorSpec& reference_spec, const BiasSpec& bias,
                          std::size_t n_subjects, std::pair<double, double> age_range,
                          std::uint64_t seed, const std::string& site_id = "moving");

struct AgeWindow {
    double center = 0.0;
    double half_width = 10.0;
};

/// Indices of `n` subjects drawn without replacement among those whose age
/// lies in the window; sorted ascending.
std::vector<std::size_t> select_indices(const Eigen::VectorXd& ages, std::size_t n,
                                        const std::optional<AgeWindow>& window, std::uint64_t seed);

/// Train draw of `n` subjects (within the window when given) and the
/// withheld remainder. Age is the first covariate.
std::pair<SiteDataset, SiteDataset> sample_restricted(const SiteDataset& dataset, std::size_t n,
                                                      const std::optional<AgeWindow>& window,
                                                      std::uint64_t seed);

Cohort subset(const Cohort& cohort, const std::vector<std::size_t>& indices);

/// Surrogate normative fixture: a "wm_skeleton" region with a convex
/// MD-like curve (about 7.5e-4 mm^2/s) and 42 "bundle_NN" regions with
/// perturbed curves.
GeneratorSpec default_fixture(std::uint64_t seed = 1, std::size_t n_subjects = 441);

/// Moving-site presets.
BiasSpec sample_size_bias();    // S = 0.75, M = 1.50, A = 0.90
BiasSpec sample_size_bias_alt();  // S = 0.50, M = 1.25, A = 1.10
BiasSpec age_window_bias();     // S = 1, M = 1.50, A = 0.90

}  // namespace ccombat

#endif
