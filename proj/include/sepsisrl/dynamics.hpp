#pragma once

#include <variant>

#include "sepsisrl/policy.hpp"
#include "sepsisrl/reward.hpp"

namespace sepsisrl {

/// Closed-form ridge regression from history vectors to observation deltas.
struct LinearDynamics {
    Eigen::MatrixXd weights; // (d_raw, history_dim)
    Eigen::VectorXd bias;    // (d_raw)
    double ridge_lambda = 0.0;

    Eigen::MatrixXd predict(const Eigen::MatrixXd& histories) const;
};

/// Delta predictor with two hidden layers, batch normalization after each,
/// and ReLU activations.
struct MlpDynamics {
    nn::Mlp net;

    static MlpDynamics init(int history_dim, int d_raw, Rng& rng, int h1 = 128, int h2 = 128);

    Eigen::MatrixXd predict(const Eigen::MatrixXd& histories) const { return net.forward(histories); }
};

/// Training-mode (batch statistics) or inference-mode forward pass.
Eigen::MatrixXd mlp_forward(MlpDynamics& model, const Eigen::MatrixXd& histories,
                            bool training_mode, nn::ForwardCache* cache = nullptr);

/// Exact MSE-loss gradients for every parameter, batch statistics mode.
/// Leaves running statistics untouched.
nn::Gradients mlp_backward(MlpDynamics& model, const Eigen::MatrixXd& histories,
                           const Eigen::MatrixXd& targets);

/// Standardized (history, delta) sample pairs extracted from a cohort:
/// one row per transition t -> t+1, history built at t with the logged
/// action, delta = standardized obs_{t+1} - standardized obs_t.
struct TransitionDataset {
    Eigen::MatrixXd histories;
    Eigen::MatrixXd deltas;

    Eigen::Index size() const { return histories.rows(); }
};

TransitionDataset build_transition_dataset(const Cohort& cohort, const FeatureSchema& schema,
                                           const Standardizer& st);

/// Least squares with an L2 penalty on the weights (bias unpenalized), solved
/// by normal equations.
LinearDynamics fit_linear(const Eigen::MatrixXd& histories, const Eigen::MatrixXd& deltas,
                          double ridge_lambda);

struct DynTrainConfig {
    int epochs = 100;
    int batch_size = 64;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    int hidden1 = 128;
    int hidden2 = 128;
};

struct DynTrainResult {
    MlpDynamics model; // best-validation snapshot
    std::vector<double> train_mse;
    std::vector<double> val_mse;
    int best_epoch = 0;
    double best_val_mse = 0.0;
};

/// Mini-batch Adam training with per-epoch validation; returns the snapshot
/// with the lowest validation MSE. Deterministic for a fixed seed.
DynTrainResult train_dynamics(const TransitionDataset& train, const TransitionDataset& val,
                              const DynTrainConfig& config);

/// Mean over samples and output dimensions of the squared prediction error.
double eval_mse(const LinearDynamics& model, const TransitionDataset& data);
double eval_mse(const MlpDynamics& model, const TransitionDataset& data);

/// A delta model together with the standardizer and schema it was fit under;
/// the unit rollouts and policy training operate in.
struct FittedDynamics {
    std::variant<LinearDynamics, MlpDynamics> model;
    Standardizer standardizer;
    FeatureSchema schema;

    Eigen::MatrixXd predict(const Eigen::MatrixXd& histories_std) const;
};

struct RolloutConfig {
    int horizon = 10;
    bool stochastic = false; // adds N(0, I) noise to the predicted delta (standardized units)
    std::uint64_t seed = 0;
    RewardParams reward;
    bool record_contexts = false; // keep the per-step decision contexts
};

/// Model-simulated trace. observations[k] is the predicted observation after
/// step k (raw units, SOFA clamped to [0, 24], lactate floored at 0);
/// rewards[k] is the intermediate reward of that transition.
struct RolloutResult {
    Observation start_obs;
    std::vector<Observation> observations;
    std::vector<Action> actions;
    std::vector<double> rewards;
    std::vector<DecisionContext> contexts; // filled when record_contexts is set

    int length() const { return static_cast<int>(actions.size()); }
};

/// Rollout from the first state of `start`, sampling actions from `policy`.
RolloutResult rollout(const FittedDynamics& dyn, const Trajectory& start,
                      const StochasticPolicy& policy, const RolloutConfig& config);

/// Rollout from the first state of `start`, replaying its logged actions
/// (truncates at the trajectory's last action if shorter than the horizon).
RolloutResult rollout_replay(const FittedDynamics& dyn, const Trajectory& start,
                             const RolloutConfig& config);

} // namespace sepsisrl
