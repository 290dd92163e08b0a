#pragma once

#include "sepsisrl/dynamics.hpp"

namespace sepsisrl {

enum class RegimeSource { Clinician, Learned };

/// SOFA-stratified regime assignment. Boundaries are inclusive: SOFA <=
/// sofa_low_max is low, SOFA >= sofa_high_min is high, anything between is
/// medium.
struct BlendSpec {
    int sofa_low_max = 5;
    int sofa_high_min = 15;
    RegimeSource low = RegimeSource::Clinician;
    RegimeSource medium = RegimeSource::Learned;
    RegimeSource high = RegimeSource::Clinician;

    void validate() const;
    RegimeSource source_for_sofa(double sofa) const;
};

/// Severity-switched composite of a clinician policy and a learned policy.
class BlendedPolicy final : public StochasticPolicy {
public:
    BlendedPolicy(const StochasticPolicy& clinician, const StochasticPolicy& learned,
                  BlendSpec spec);

    Eigen::VectorXd action_proba(const DecisionContext& ctx) const override;
    std::unique_ptr<StochasticPolicy> clone() const override;

    const BlendSpec& spec() const { return spec_; }

private:
    BlendedPolicy(const BlendedPolicy& other);

    std::unique_ptr<StochasticPolicy> clinician_;
    std::unique_ptr<StochasticPolicy> learned_;
    BlendSpec spec_;
};

/// Deep-copies the policies; the blend never aliases its inputs.
std::unique_ptr<StochasticPolicy> blend(const StochasticPolicy& clinician,
                                        const StochasticPolicy& learned, const BlendSpec& spec);

/// New policy initialized from the cloned clinician parameters. Training the
/// result never mutates the source.
NetworkPolicy init_from_bc(const PolicyNet& bc_model, const Standardizer& standardizer,
                           const FeatureSchema& schema);

/// Model-simulated on-policy experience: n rollouts of fixed horizon, each
/// started from the first state of a uniformly sampled logged trajectory.
/// Rows are steps, grouped per rollout in time order.
struct RolloutBatch {
    Eigen::MatrixXd histories; // standardized decision history per step
    std::vector<int> actions;
    Eigen::VectorXd rewards;
    Eigen::VectorXd logp_old; // log-prob of the action under the collecting policy
    int n_rollouts = 0;
    int horizon = 0;
    double gamma = 1.0;

    Eigen::Index rows() const { return histories.rows(); }

    /// Discounted return of each rollout.
    Eigen::VectorXd rollout_returns() const;

    /// Discounted return-to-go of each step row.
    Eigen::VectorXd returns_to_go() const;
};

RolloutBatch collect_model_rollouts(const NetworkPolicy& policy, const FittedDynamics& dyn,
                                    const Cohort& cohort, int n_rollouts, int horizon,
                                    double gamma, std::uint64_t seed,
                                    const RewardParams& reward = {});

/// One plain-gradient REINFORCE ascent step on mean_i (R_i - baseline) *
/// sum_t log pi(a_t | h_t), baseline = batch mean return.
void reinforce_update(NetworkPolicy& policy, const RolloutBatch& batch, double learning_rate);

struct PpoConfig {
    double clip_epsilon = 0.2;
    double learning_rate = 1e-5; // deliberately small to stay near the cloned clinician
    int iterations = 20;
    int rollouts_per_iteration = 256;
    int horizon = 10;
    int epochs_per_update = 4;
    double gamma = 0.99;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Clipped-surrogate update: epochs_per_update full-batch Adam steps on
/// mean_steps min(rho * A, clip(rho, 1-eps, 1+eps) * A) with advantages
/// A = return-to-go minus the per-timestep batch mean. Returns the surrogate
/// objective value at the final epoch.
double ppo_update(NetworkPolicy& policy, const RolloutBatch& batch, const PpoConfig& config,
                  nn::AdamState& adam);

/// Mean KL(mu || pi) over a set of probe histories.
double mean_kl(const NetworkPolicy& mu, const NetworkPolicy& pi,
               const Eigen::MatrixXd& probe_histories);

enum class PolicyAlgorithm { Pg, Ppo };

struct PolicyIterationStats {
    int iteration = 0;
    double mean_return = 0.0;
    double kl_to_clinician = 0.0;
    double loss = 0.0;
};

struct PolicyTrainResult {
    NetworkPolicy policy;
    std::vector<PolicyIterationStats> diagnostics;
};

/// Collect-update loop over the learned environment model, starting from the
/// cloned clinician. Diagnostics track the simulated return, KL to the
/// clinician on a fixed probe set, and the update objective.
PolicyTrainResult train_policy(const PolicyNet& bc_model, const Standardizer& standardizer,
                               const FeatureSchema& schema, const FittedDynamics& dyn,
                               const Cohort& cohort, PolicyAlgorithm algorithm,
                               const PpoConfig& config, const RewardParams& reward = {});

} // namespace sepsisrl
