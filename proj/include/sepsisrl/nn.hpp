#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "sepsisrl/errors.hpp"
#include "sepsisrl/rng.hpp"

namespace sepsisrl::nn {

/// Affine layer, y = x W^T + b with samples as rows.
struct Dense {
    Eigen::MatrixXd weight; // (out, in)
    Eigen::VectorXd bias;   // (out)
};

/// Per-feature batch normalization. Training mode normalizes by batch
/// statistics and folds an eps of 1e-5 into the variance so constant
/// features stay finite; inference mode uses the running statistics.
struct BatchNorm {
    Eigen::VectorXd gamma;
    Eigen::VectorXd beta;
    Eigen::VectorXd running_mean;
    Eigen::VectorXd running_var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Intermediates of one training-mode forward pass, consumed by backward().
struct ForwardCache {
    std::vector<Eigen::MatrixXd> layer_input; // input to dense layer l
    std::vector<Eigen::MatrixXd> pre_norm;    // dense output before batch norm
    std::vector<Eigen::MatrixXd> normalized;  // (z - mean) * invstd, hidden layers only
    std::vector<Eigen::VectorXd> batch_mean;
    std::vector<Eigen::VectorXd> batch_invstd;
    std::vector<Eigen::MatrixXd> activation;  // post-ReLU hidden activations
    Eigen::MatrixXd output;
};

/// Gradients shaped like the trainable parameters of an Mlp.
struct Gradients {
    std::vector<Eigen::MatrixXd> dweight;
    std::vector<Eigen::VectorXd> dbias;
    std::vector<Eigen::VectorXd> dgamma; // empty when the net has no batch norm
    std::vector<Eigen::VectorXd> dbeta;

    Eigen::VectorXd flatten() const;
};

/// Fully connected network: per hidden layer affine -> (batch norm) -> ReLU,
/// then a final affine readout. Used both for delta-dynamics regression and
/// for 25-way policy logits.
struct Mlp {
    std::vector<int> dims; // {input, hidden..., output}
    bool batch_norm = false;
    std::vector<Dense> dense;
    std::vector<BatchNorm> bn; // one per hidden layer when batch_norm

    static Mlp init(const std::vector<int>& dims, bool batch_norm, Rng& rng);

    int input_dim() const { return dims.front(); }
    int output_dim() const { return dims.back(); }
    int hidden_count() const { return static_cast<int>(dims.size()) - 2; }
    long param_count() const;

    /// Inference-mode forward (running statistics, no side effects).
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;

    /// Training-mode forward. Batches must have >= 2 rows when the net uses
    /// batch norm. Updates running statistics unless update_running = false
    /// (finite-difference probes need a side-effect-free pass).
    Eigen::MatrixXd forward_train(const Eigen::MatrixXd& x, ForwardCache& cache,
                                  bool update_running = true);

    /// Exact gradients for every parameter given dL/d(output); requires the
    /// cache of the matching training-mode forward pass.
    Gradients backward(const ForwardCache& cache, const Eigen::MatrixXd& d_output) const;

    /// Canonical flat parameter order: per layer weight (row major), bias,
    /// then gamma and beta for batch-norm layers. Running statistics are not
    /// trainable and excluded.
    Eigen::VectorXd flatten_params() const;
    void unflatten_params(const Eigen::VectorXd& flat);
};

/// Adam state over a flat parameter vector. Defaults follow the usual
/// (1e-3, 0.9, 0.999, 1e-8) constants.
struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState init(long n_params, double learning_rate = 1e-3);
};

/// One bias-corrected Adam update, minimizing: params -= lr * mhat/(sqrt(vhat)+eps).
void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state);

/// Mean squared error over samples and output dimensions, with gradient.
double mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target,
                Eigen::MatrixXd* d_pred = nullptr);

/// Row-wise softmax with the usual max-shift stabilization.
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits);

/// Mean cross-entropy of integer labels under row-wise softmax probabilities,
/// with gradient w.r.t. the logits. Probabilities are floored at 1e-12 inside
/// the log.
double cross_entropy_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels,
                          Eigen::MatrixXd* d_logits = nullptr);

} // namespace sepsisrl::nn
