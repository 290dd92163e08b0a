#pragma once

#include <map>
#include <optional>

#include "sepsisrl/forest.hpp"
#include "sepsisrl/knn.hpp"
#include "sepsisrl/reward.hpp"

namespace sepsisrl {

/// Action-value model fit by tree-ensemble fitted Q iteration over
/// (standardized state vector, one-hot action) inputs. Carries the
/// standardizer it was fit under; queries take raw state vectors.
struct ForestQ {
    RegressionForest forest;
    double gamma = 0.99;
    int n_iterations = 0;
    Standardizer standardizer;

    double q_value(const Eigen::VectorXd& state_raw, int action) const;
    /// All 25 action values at one state.
    Eigen::VectorXd q_values(const Eigen::VectorXd& state_raw) const;
};

/// Policy-evaluation FQI: repeatedly regress y = r + gamma * sum_a' pi_e(a'|s') Q(s', a')
/// (y = r at terminal steps) onto (s, a). n_iterations = -1 uses the cohort's
/// maximum horizon.
ForestQ fqi_fit(const Cohort& cohort, const FeatureSchema& schema, const Standardizer& st,
                const StochasticPolicy& eval_policy, double gamma, int n_iterations,
                const ForestConfig& forest_config);

/// Cumulative importance-sampling ratios rho_{0:t} of one trajectory, with
/// each per-step ratio clipped to [1/clip_max, clip_max].
struct RatioResult {
    std::vector<double> cumulative; // rho_{0:t} for t = 0..T-1
    int clipped_steps = 0;
    int total_steps = 0;
};
RatioResult is_ratios(const Trajectory& traj, const StochasticPolicy& eval_policy,
                      const StochasticPolicy& behavior, const FeatureSchema& schema,
                      double clip_max = 100.0);

struct HorizonGroupStats {
    int horizon = 0;
    int count = 0;
    double weight_sum = 0.0;
    double ess = 0.0; // (sum w)^2 / sum w^2 of the full-trajectory weights
    bool dropped = false;
};

struct OpeDiagnostics {
    std::vector<HorizonGroupStats> groups;
    double clip_fraction = 0.0;
    int dropped_groups = 0;
};

struct EstimatorResult {
    double value = 0.0;
    OpeDiagnostics diagnostics;
};

/// Per-horizon weighted importance sampling: trajectories grouped by length,
/// self-normalized within each group, groups combined by empirical frequency.
/// Groups with zero weight sum are dropped and the frequencies renormalized.
EstimatorResult estimate_phwis(const Cohort& cohort, const StochasticPolicy& eval_policy,
                               const StochasticPolicy& behavior, const FeatureSchema& schema,
                               double gamma, double clip_max = 100.0);

/// Per-horizon weighted doubly robust estimator with stepwise self-normalized
/// weights and a ForestQ control variate.
EstimatorResult estimate_phwdr(const Cohort& cohort, const StochasticPolicy& eval_policy,
                               const StochasticPolicy& behavior, const FeatureSchema& schema,
                               const ForestQ& qhat, double gamma, double clip_max = 100.0);

/// Approximate-model estimate: mean over initial states of
/// sum_a pi_e(a | s_0) Qhat(s_0, a).
double estimate_am(const Cohort& cohort, const StochasticPolicy& eval_policy,
                   const FeatureSchema& schema, const ForestQ& qhat);

struct OpeConfig {
    double gamma = 0.99;
    int k = 250;
    double alpha = 0.5;
    double clip_max = 100.0;
    ForestConfig forest;
    int fqi_iterations = -1; // -1 = cohort max horizon
    std::uint64_t seed = 0;
    int sofa_low_max = 5;   // echoed into the report
    int sofa_high_min = 15; // echoed into the report
};

struct OpeReport {
    double phwis = 0.0;
    double phwdr = 0.0;
    double am = 0.0;
    OpeDiagnostics phwis_diagnostics;
    OpeDiagnostics phwdr_diagnostics;
    double ess = 0.0; // aggregate effective sample size of the PHWIS weights
    OpeConfig config; // echo of every estimator hyperparameter
};

/// Runs the full evaluation: fits the kNN behavior model (unless an exact
/// behavior policy is injected), fits FQI for the evaluation policy, and
/// computes PHWIS, PHWDR and AM.
OpeReport evaluate_policy(const Cohort& cohort, const StochasticPolicy& eval_policy,
                          const FeatureSchema& schema, const OpeConfig& config,
                          const StochasticPolicy* behavior_override = nullptr);

} // namespace sepsisrl
