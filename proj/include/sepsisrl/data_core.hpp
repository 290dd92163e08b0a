#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sepsisrl/errors.hpp"

namespace sepsisrl {

inline constexpr int kNumActions = 25;
inline constexpr int kDoseBins = 5;
inline constexpr int kHistoryLags = 4;
inline constexpr double kSofaMax = 24.0;

/// Raw per-timestep observation, one entry per schema feature.
using Observation = Eigen::VectorXd;

/// Names and positions of the raw observation features. SOFA and lactate are
/// singled out because the reward function reads them.
struct FeatureSchema {
    std::vector<std::string> names;
    int sofa_index = 0;
    int lactate_index = 1;

    int d_raw() const { return static_cast<int>(names.size()); }
    int state_dim() const { return kHistoryLags * d_raw(); }
    int history_dim() const { return kHistoryLags * (d_raw() + kNumActions); }

    /// Throws ConfigError on duplicate names or out-of-range indices.
    void validate() const;

    /// Compact 12-feature schema used by the synthetic cohort generator:
    /// SOFA, lactate, and ten auxiliary vitals/labs.
    static FeatureSchema default_synthetic();
};

/// Discrete treatment: quartile bins for IV fluid and vasopressor dose.
struct Action {
    int iv_bin = 0;
    int vp_bin = 0;

    int flat_index() const { return kDoseBins * iv_bin + vp_bin; }

    static Action from_flat(int flat) {
        if (flat < 0 || flat >= kNumActions)
            throw DomainError("Action::from_flat: index " + std::to_string(flat) + " outside 0..24");
        return Action{flat / kDoseBins, flat % kDoseBins};
    }

    bool operator==(const Action& o) const { return iv_bin == o.iv_bin && vp_bin == o.vp_bin; }
};

/// One timestep of a patient episode. Raw doses are kept alongside the
/// binned action so cohorts round-trip through CSV without loss.
struct Step {
    Observation obs;
    Action action;
    double iv_dose = 0.0;
    double vp_dose = 0.0;
    double reward = 0.0;
    bool is_terminal = false;
};

/// One patient episode. Exactly the last step has is_terminal = true.
struct Trajectory {
    std::string patient_id;
    std::vector<Step> steps;
    bool survived = false;

    int length() const { return static_cast<int>(steps.size()); }
};

using Cohort = std::vector<Trajectory>;

/// Per-drug dose thresholds: nearest-rank 25/50/75th percentiles of the
/// nonzero doses.
struct ActionBins {
    std::array<double, 3> iv_quartiles{};
    std::array<double, 3> vp_quartiles{};
};

/// Per-feature affine normalizer fit on a training split. Zero-variance
/// features get std 1 so standardization stays invertible.
struct Standardizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd std;

    Observation apply(const Observation& obs) const;
    Observation invert(const Observation& obs) const;

    /// Applies the per-feature transform to each d_raw block of a
    /// concatenated state vector.
    Eigen::VectorXd apply_state(const Eigen::VectorXd& state) const;
};

/// Nearest-rank quantile: value at rank ceil(p*n) of the sorted sample.
double nearest_rank_quantile(std::vector<double> values, double p);

/// Fits per-drug quartiles over the strictly positive doses. Requires at
/// least 4 nonzero doses per drug.
ActionBins fit_action_bins(const std::vector<std::pair<double, double>>& raw_doses);

/// 0 for zero dose, otherwise the 1-based quartile bin of the dose.
int bin_dose(double dose, const std::array<double, 3>& quartiles);

/// Concatenated observation blocks [obs_t, obs_{t-1}, obs_{t-2}, obs_{t-3}];
/// lags before the episode start repeat obs_0.
Eigen::VectorXd build_state(const Trajectory& traj, int t);

/// Concatenated (observation, one-hot action) blocks for lags 0..3; padded
/// lags use obs_0 with an all-zero action block.
Eigen::VectorXd build_history(const Trajectory& traj, int t);

/// History as seen by a policy deciding at time t: identical to
/// build_history except the lag-0 action block is all-zero (the action has
/// not been chosen yet).
Eigen::VectorXd build_decision_history(const Trajectory& traj, int t);

Standardizer fit_standardizer(const std::vector<Observation>& observations);

/// Patient-level split into disjoint train/val/test lists. Sizes follow the
/// floor-then-distribute rule: each split gets floor(fraction*n) patients and
/// leftovers go to splits in order. Deterministic for a fixed seed.
struct SplitCohort {
    Cohort train;
    Cohort val;
    Cohort test;
};
SplitCohort split_cohort(const Cohort& cohort, const std::array<double, 3>& fractions,
                         std::uint64_t seed);

/// Cohort CSV layout:
///   patient_id,t,<feature names...>,iv_dose,vp_dose,reward,terminal,survived
/// one row per timestep, UTF-8, terminal/survived as 0/1. Lines starting with
/// '#' are treated as comments (the pipeline uses one to embed its config
/// hash). If `bins` is not given, quartile bins are refit from the file's own
/// nonzero doses; a drug with no nonzero dose at all needs no quartiles.
Cohort read_cohort_csv(const std::string& path, const FeatureSchema& schema,
                       const std::optional<ActionBins>& bins = std::nullopt);

void write_cohort_csv(const Cohort& cohort, const FeatureSchema& schema,
                      const std::string& path, const std::string& comment = "");

/// Schema file: JSON with `names`, `sofa_index`, `lactate_index`.
FeatureSchema read_schema_json(const std::string& path);
void write_schema_json(const FeatureSchema& schema, const std::string& path);

/// Validates one observation against the schema: finite entries, SOFA in
/// [0, 24], nonnegative lactate. `where` is prefixed to error messages.
void validate_observation(const Observation& obs, const FeatureSchema& schema,
                          const std::string& where);

/// All observations of a cohort, in trajectory order.
std::vector<Observation> collect_observations(const Cohort& cohort);

} // namespace sepsisrl
