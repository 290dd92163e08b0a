#pragma once

#include "sepsisrl/policy.hpp"

namespace sepsisrl {

/// Nonparametric behavior-policy model: smoothed action frequencies among
/// the k nearest logged states (Euclidean distance over standardized state
/// vectors, exact search, distance ties broken by reference index). A query
/// equal to a reference point counts that point among its own neighbors.
struct KnnBehavior {
    Eigen::MatrixXd ref_states; // rows are standardized state vectors
    std::vector<int> ref_actions;
    int k = 250;
    double alpha = 0.5;
};

KnnBehavior knn_fit(const Eigen::MatrixXd& states, const std::vector<int>& actions, int k,
                    double alpha);

/// pi_b(a | s) = (count of a among the k nearest neighbors + alpha) / (k + 25 alpha).
Eigen::VectorXd knn_proba(const KnnBehavior& model, const Eigen::VectorXd& state);

/// One distribution per query row; computed in blocks.
Eigen::MatrixXd knn_proba_batch(const KnnBehavior& model, const Eigen::MatrixXd& states);

/// StochasticPolicy adapter: standardizes the context's state vector and
/// queries the kNN model.
class KnnBehaviorPolicy final : public StochasticPolicy {
public:
    KnnBehaviorPolicy(KnnBehavior model, Standardizer standardizer, FeatureSchema schema);

    Eigen::VectorXd action_proba(const DecisionContext& ctx) const override;
    std::unique_ptr<StochasticPolicy> clone() const override;

    const KnnBehavior& model() const { return model_; }

private:
    KnnBehavior model_;
    Standardizer standardizer_;
    FeatureSchema schema_;
};

} // namespace sepsisrl
