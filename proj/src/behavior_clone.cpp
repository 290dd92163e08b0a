#include "sepsisrl/behavior_clone.hpp"

#include <cmath>
#include <limits>

#include "sepsisrl/data_core.hpp"

namespace sepsisrl {

namespace {
constexpr std::uint64_t kBcInitStream = 0xBC01;
constexpr std::uint64_t kBcShuffleStream = 0xBC02;

void add_l2_gradient(const nn::Mlp& net, double l2, nn::Gradients& grads) {
    if (l2 == 0.0) return;
    for (std::size_t l = 0; l < net.dense.size(); ++l)
        grads.dweight[l] += 2.0 * l2 * net.dense[l].weight;
}

} // namespace

PolicyNet PolicyNet::init(int history_dim, Rng& rng, int hidden) {
    PolicyNet p;
    p.net = nn::Mlp::init({history_dim, hidden, hidden, kNumActions}, /*batch_norm=*/false, rng);
    return p;
}

namespace {

double mean_ce(const PolicyNet& model, const Eigen::MatrixXd& histories,
               const std::vector<int>& labels) {
    const Eigen::MatrixXd logits = model.net.forward(histories);
    return nn::cross_entropy_loss(logits, labels);
}

} // namespace

BcResult bc_fit(const Eigen::MatrixXd& train_histories, const std::vector<int>& train_labels,
                const Eigen::MatrixXd& val_histories, const std::vector<int>& val_labels,
                const BcConfig& config) {
    if (train_histories.rows() == 0)
        throw InsufficientDataError("bc_fit: empty training set");
    if (static_cast<std::size_t>(train_histories.rows()) != train_labels.size() ||
        static_cast<std::size_t>(val_histories.rows()) != val_labels.size())
        throw ShapeError("bc_fit: history/label count mismatch");
    for (int y : train_labels)
        if (y < 0 || y >= kNumActions)
            throw DomainError("bc_fit: label " + std::to_string(y) + " outside 0..24");
    for (int y : val_labels)
        if (y < 0 || y >= kNumActions)
            throw DomainError("bc_fit: label " + std::to_string(y) + " outside 0..24");

    Rng init_rng = Rng::split(config.seed, kBcInitStream);
    BcResult result;
    result.model = PolicyNet::init(static_cast<int>(train_histories.cols()), init_rng, config.hidden);
    result.model.l2 = config.l2;
    nn::Mlp& net = result.model.net;

    nn::AdamState adam = nn::AdamState::init(net.param_count(), config.learning_rate);
    Rng shuffle_rng = Rng::split(config.seed, kBcShuffleStream);

    const Eigen::Index n = train_histories.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    nn::Mlp best = net;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;

    const bool has_val = val_histories.rows() > 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        adam.learning_rate = config.learning_rate *
                             (0.01 + 0.99 * 0.5 *
                                         (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                                                         std::max(1, config.epochs - 1))));
        shuffle_rng.shuffle(order);
        for (Eigen::Index start = 0; start < n; start += config.batch_size) {
            const Eigen::Index count = std::min<Eigen::Index>(config.batch_size, n - start);
            Eigen::MatrixXd batch(count, train_histories.cols());
            std::vector<int> batch_labels(static_cast<std::size_t>(count));
            for (Eigen::Index i = 0; i < count; ++i) {
                batch.row(i) = train_histories.row(order[static_cast<std::size_t>(start + i)]);
                batch_labels[static_cast<std::size_t>(i)] =
                    train_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])];
            }
            nn::ForwardCache cache;
            const Eigen::MatrixXd logits = net.forward_train(batch, cache);
            Eigen::MatrixXd d_logits;
            nn::cross_entropy_loss(logits, batch_labels, &d_logits);
            nn::Gradients grads = net.backward(cache, d_logits);
            add_l2_gradient(net, config.l2, grads);
            Eigen::VectorXd params = net.flatten_params();
            nn::adam_step(params, grads.flatten(), adam);
            net.unflatten_params(params);
        }
        result.train_ce.push_back(mean_ce(result.model, train_histories, train_labels));
        const double val = has_val ? mean_ce(result.model, val_histories, val_labels)
                                   : result.train_ce.back();
        result.val_ce.push_back(val);
        if (val < best_val) {
            best_val = val;
            best = net;
            best_epoch = epoch;
        }
    }
    if (config.epochs > 0) {
        net = best;
        result.best_val_ce = best_val;
    } else {
        result.best_val_ce = has_val ? mean_ce(result.model, val_histories, val_labels)
                                     : mean_ce(result.model, train_histories, train_labels);
    }
    result.best_epoch = best_epoch;
    return result;
}

Eigen::VectorXd bc_predict_proba(const PolicyNet& model, const Eigen::VectorXd& history) {
    if (history.size() != model.net.input_dim())
        throw ShapeError("bc_predict_proba: history dimension mismatch");
    const Eigen::MatrixXd logits = model.net.forward(history.transpose());
    return nn::softmax_rows(logits).row(0).transpose();
}

Eigen::MatrixXd bc_predict_proba_batch(const PolicyNet& model, const Eigen::MatrixXd& histories) {
    return nn::softmax_rows(model.net.forward(histories));
}

double cross_entropy(const Eigen::VectorXd& proba, int label) {
    if (label < 0 || label >= proba.size())
        throw DomainError("cross_entropy: label out of range");
    if ((proba.array() < -1e-12).any() || std::abs(proba.sum() - 1.0) > 1e-6)
        throw DomainError("cross_entropy: input is not a probability distribution");
    return -std::log(std::max(proba(label), 1e-12));
}

} // namespace sepsisrl
