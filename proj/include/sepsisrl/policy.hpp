#pragma once

#include <array>
#include <memory>

#include "sepsisrl/behavior_clone.hpp"
#include "sepsisrl/data_core.hpp"

namespace sepsisrl {

/// Everything a policy backend may condition on when choosing the action at
/// one timestep: the current and three lagged raw observations plus the
/// actions taken at the lagged steps. Lag 0 is the current time; its action
/// slot is undefined (the action has not been chosen yet).
struct DecisionContext {
    std::array<Observation, kHistoryLags> obs_lags;
    std::array<int, kHistoryLags> action_lags{-1, -1, -1, -1}; // flat index, -1 = none/padded
    int sofa_index = 0;

    double sofa() const { return obs_lags[0](sofa_index); }

    /// Raw concatenated state vector [obs_t, obs_{t-1}, obs_{t-2}, obs_{t-3}].
    Eigen::VectorXd state_vector() const;

    /// Standardized decision history: per lag, standardized observation plus
    /// the one-hot of the lag's action (all-zero at lag 0 and padded lags).
    Eigen::VectorXd decision_history(const Standardizer& st) const;
};

/// Context at timestep t of a logged trajectory, with episode-start padding.
DecisionContext decision_context_at(const Trajectory& traj, int t, const FeatureSchema& schema);

/// Distribution over the 25 discrete actions given a decision context.
class StochasticPolicy {
public:
    virtual ~StochasticPolicy() = default;

    /// Returns a valid 25-entry distribution.
    virtual Eigen::VectorXd action_proba(const DecisionContext& ctx) const = 0;

    virtual std::unique_ptr<StochasticPolicy> clone() const = 0;

    /// Inverse-CDF sample from action_proba.
    int sample_action(const DecisionContext& ctx, Rng& rng) const;
};

/// Policy backed by a PolicyNet over standardized decision histories.
class NetworkPolicy final : public StochasticPolicy {
public:
    NetworkPolicy(PolicyNet net, Standardizer standardizer, FeatureSchema schema);

    Eigen::VectorXd action_proba(const DecisionContext& ctx) const override;
    std::unique_ptr<StochasticPolicy> clone() const override;

    /// Fast path for callers that already hold the standardized history row.
    Eigen::VectorXd proba_from_history(const Eigen::VectorXd& history_std) const;
    Eigen::MatrixXd proba_from_history_batch(const Eigen::MatrixXd& histories_std) const;

    PolicyNet& policy_net() { return net_; }
    const PolicyNet& policy_net() const { return net_; }
    const Standardizer& standardizer() const { return standardizer_; }
    const FeatureSchema& schema() const { return schema_; }

private:
    PolicyNet net_;
    Standardizer standardizer_;
    FeatureSchema schema_;
};

/// Fixed distribution regardless of context. Test and baseline helper.
class FixedPolicy final : public StochasticPolicy {
public:
    explicit FixedPolicy(Eigen::VectorXd proba);
    Eigen::VectorXd action_proba(const DecisionContext&) const override { return proba_; }
    std::unique_ptr<StochasticPolicy> clone() const override {
        return std::make_unique<FixedPolicy>(proba_);
    }

private:
    Eigen::VectorXd proba_;
};

} // namespace sepsisrl
