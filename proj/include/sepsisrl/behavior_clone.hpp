#pragma once

#include "sepsisrl/nn.hpp"

namespace sepsisrl {

/// Clinician-policy network: two 64-unit ReLU layers over a decision-time
/// history vector, 25 output logits, L2 penalty on the weights.
struct PolicyNet {
    nn::Mlp net;
    double l2 = 1e-4;

    static PolicyNet init(int history_dim, Rng& rng, int hidden = 64);

    int input_dim() const { return net.input_dim(); }
};

struct BcConfig {
    int epochs = 60;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double l2 = 1e-4;
    std::uint64_t seed = 0;
    int hidden = 64;
};

struct BcResult {
    PolicyNet model;
    std::vector<double> train_ce; // per-epoch mean cross-entropy (without penalty)
    std::vector<double> val_ce;
    int best_epoch = 0;
    double best_val_ce = 0.0;
};

/// Supervised fit of the clinician policy by cross-entropy + L2, Adam
/// optimizer, returning the best-validation snapshot. Rows of the history
/// matrices are standardized decision histories; labels are flat action
/// indices in 0..24.
BcResult bc_fit(const Eigen::MatrixXd& train_histories, const std::vector<int>& train_labels,
                const Eigen::MatrixXd& val_histories, const std::vector<int>& val_labels,
                const BcConfig& config);

/// Softmax action distribution for one history row.
Eigen::VectorXd bc_predict_proba(const PolicyNet& model, const Eigen::VectorXd& history);

/// Batch variant, one distribution per row.
Eigen::MatrixXd bc_predict_proba_batch(const PolicyNet& model, const Eigen::MatrixXd& histories);

/// -log(proba[label]) with the probability floored at 1e-12.
double cross_entropy(const Eigen::VectorXd& proba, int label);

} // namespace sepsisrl
