#pragma once

#include "sepsisrl/policy.hpp"
#include "sepsisrl/reward.hpp"

namespace sepsisrl {

/// Parameters of the synthetic sepsis-like MDP. A scalar latent severity
/// drives every feature; actions shift severity by treatment_effect entries.
struct SynthConfig {
    int n_patients = 2000;
    int max_horizon = 12; // 4-hour steps, 48h episodes
    double severity_drift = 0.3;
    Eigen::MatrixXd treatment_effect = default_treatment_effect(); // 5x5, [iv][vp]
    double noise_std = 0.35;
    double clinician_temperature = 1.0;
    double mortality_slope = 0.8;
    double mortality_intercept = -4.0;
    std::uint64_t seed = 0;
    bool discharge_on_recovery = true; // end episodes early once SOFA reaches 0

    void validate() const;

    /// Default per-action severity deltas: benefit is a concave function of
    /// total dose intensity (best around 3-4 combined bins), overdosing turns
    /// harmful, and unbalanced drug combinations are slightly less effective.
    static Eigen::MatrixXd default_treatment_effect();
};

/// The generating process: latent transitions x' = x + drift + effect[a] + noise,
/// emissions SOFA = clamp(round(2x), 0, 24), lactate = softplus(x + noise),
/// auxiliary features = fixed linear mixes of x plus noise. Mortality at
/// episode end with probability sigmoid(slope * x_T + intercept).
class GroundTruth {
public:
    explicit GroundTruth(SynthConfig config);

    const SynthConfig& config() const { return config_; }
    const FeatureSchema& schema() const { return schema_; }
    const RewardParams& reward_params() const { return reward_; }

    /// Canonical dose-ladder quartiles matching the generator's per-bin dose
    /// ranges, so re-binning written doses reproduces the logged actions.
    ActionBins action_bins() const;

    /// Severity-dependent softmax clinician: undertreats below the high-SOFA
    /// regime and is more diffuse at medium severities.
    Eigen::VectorXd clinician_proba_for_sofa(double sofa) const;

    /// Simulates one episode under `policy`, drawing everything from `rng`.
    /// Returns the trajectory and the final latent severity.
    std::pair<Trajectory, double> simulate(const StochasticPolicy& policy, Rng& rng,
                                           const std::string& patient_id) const;

    Observation emit(double severity, Rng& rng) const;

private:
    SynthConfig config_;
    FeatureSchema schema_;
    RewardParams reward_;
};

/// Ground-truth clinician as a StochasticPolicy (reads the current SOFA).
class GroundTruthClinicianPolicy final : public StochasticPolicy {
public:
    explicit GroundTruthClinicianPolicy(const SynthConfig& config);
    Eigen::VectorXd action_proba(const DecisionContext& ctx) const override;
    std::unique_ptr<StochasticPolicy> clone() const override;

private:
    SynthConfig config_;
};

/// Deterministic cohort generation: one independent stream per patient.
std::pair<Cohort, GroundTruth> generate_cohort(const SynthConfig& config);

struct ValueEstimate {
    double value = 0.0;
    double std_error = 0.0;
};

/// Monte-Carlo value oracle: mean and standard error of the discounted
/// return over n_rollouts fresh simulations under `policy`.
ValueEstimate true_policy_value(const GroundTruth& truth, const StochasticPolicy& policy,
                                int n_rollouts, double gamma, std::uint64_t seed);

/// Exact behavior probabilities for a (possibly concatenated) state vector;
/// reads the SOFA entry of the lag-0 block.
Eigen::VectorXd clinician_action_proba(const GroundTruth& truth, const Eigen::VectorXd& state);

} // namespace sepsisrl
