#include "sepsisrl/dynamics.hpp"

#include <cmath>
#include <limits>

namespace sepsisrl {

namespace {
constexpr std::uint64_t kDynInitStream = 0xD401;
constexpr std::uint64_t kDynShuffleStream = 0xD402;
constexpr std::uint64_t kRolloutStream = 0xD403;
} // namespace

Eigen::MatrixXd LinearDynamics::predict(const Eigen::MatrixXd& histories) const {
    if (histories.cols() != weights.cols())
        throw ShapeError("LinearDynamics::predict: history dimension mismatch");
    Eigen::MatrixXd out = histories * weights.transpose();
    out.rowwise() += bias.transpose();
    return out;
}

MlpDynamics MlpDynamics::init(int history_dim, int d_raw, Rng& rng, int h1, int h2) {
    MlpDynamics m;
    m.net = nn::Mlp::init({history_dim, h1, h2, d_raw}, /*batch_norm=*/true, rng);
    return m;
}

Eigen::MatrixXd mlp_forward(MlpDynamics& model, const Eigen::MatrixXd& histories,
                            bool training_mode, nn::ForwardCache* cache) {
    if (!training_mode) return model.net.forward(histories);
    nn::ForwardCache local;
    nn::ForwardCache& c = cache ? *cache : local;
    return model.net.forward_train(histories, c);
}

nn::Gradients mlp_backward(MlpDynamics& model, const Eigen::MatrixXd& histories,
                           const Eigen::MatrixXd& targets) {
    nn::ForwardCache cache;
    const Eigen::MatrixXd pred = model.net.forward_train(histories, cache, /*update_running=*/false);
    Eigen::MatrixXd d_pred;
    nn::mse_loss(pred, targets, &d_pred);
    return model.net.backward(cache, d_pred);
}

TransitionDataset build_transition_dataset(const Cohort& cohort, const FeatureSchema& schema,
                                           const Standardizer& st) {
    schema.validate();
    const int d = schema.d_raw();
    const int block = d + kNumActions;
    Eigen::Index n = 0;
    for (const auto& traj : cohort) n += std::max(0, traj.length() - 1);
    TransitionDataset ds;
    ds.histories.resize(n, schema.history_dim());
    ds.deltas.resize(n, d);
    Eigen::Index row = 0;
    for (const auto& traj : cohort) {
        for (int t = 0; t + 1 < traj.length(); ++t) {
            Eigen::VectorXd h = build_history(traj, t);
            for (int lag = 0; lag < kHistoryLags; ++lag)
                h.segment(lag * block, d) = st.apply(h.segment(lag * block, d));
            ds.histories.row(row) = h;
            ds.deltas.row(row) =
                (st.apply(traj.steps[static_cast<std::size_t>(t + 1)].obs) -
                 st.apply(traj.steps[static_cast<std::size_t>(t)].obs));
            ++row;
        }
    }
    return ds;
}

LinearDynamics fit_linear(const Eigen::MatrixXd& histories, const Eigen::MatrixXd& deltas,
                          double ridge_lambda) {
    if (histories.rows() != deltas.rows())
        throw ShapeError("fit_linear: history/delta row count mismatch");
    if (histories.rows() < 1)
        throw InsufficientDataError("fit_linear: need at least one sample");
    if (ridge_lambda < 0)
        throw ConfigError("fit_linear: ridge_lambda must be >= 0");

    const Eigen::Index n = histories.rows();
    const Eigen::Index p = histories.cols();
    Eigen::MatrixXd aug(n, p + 1);
    aug.leftCols(p) = histories;
    aug.col(p).setOnes();

    Eigen::MatrixXd theta; // (p+1, d_raw)
    if (ridge_lambda > 0) {
        Eigen::MatrixXd gram = aug.transpose() * aug / static_cast<double>(n);
        for (Eigen::Index i = 0; i < p; ++i) gram(i, i) += ridge_lambda; // bias unpenalized
        theta = gram.ldlt().solve(aug.transpose() * deltas / static_cast<double>(n));
    } else {
        theta = aug.colPivHouseholderQr().solve(deltas);
    }
    LinearDynamics lin;
    lin.weights = theta.topRows(p).transpose();
    lin.bias = theta.row(p).transpose();
    lin.ridge_lambda = ridge_lambda;
    return lin;
}

namespace {

double dataset_mse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
    return (pred - target).array().square().sum() /
           (static_cast<double>(target.rows()) * static_cast<double>(target.cols()));
}

} // namespace

double eval_mse(const LinearDynamics& model, const TransitionDataset& data) {
    if (data.size() == 0)
        throw InsufficientDataError("eval_mse: empty dataset");
    return dataset_mse(model.predict(data.histories), data.deltas);
}

double eval_mse(const MlpDynamics& model, const TransitionDataset& data) {
    if (data.size() == 0)
        throw InsufficientDataError("eval_mse: empty dataset");
    return dataset_mse(model.predict(data.histories), data.deltas);
}

DynTrainResult train_dynamics(const TransitionDataset& train, const TransitionDataset& val,
                              const DynTrainConfig& config) {
    if (train.size() == 0 || val.size() == 0)
        throw InsufficientDataError("train_dynamics: empty split");
    if (config.epochs < 1 || config.batch_size < 2)
        throw ConfigError("train_dynamics: need epochs >= 1 and batch_size >= 2");

    Rng init_rng = Rng::split(config.seed, kDynInitStream);
    DynTrainResult result;
    result.model = MlpDynamics::init(static_cast<int>(train.histories.cols()),
                                     static_cast<int>(train.deltas.cols()), init_rng,
                                     config.hidden1, config.hidden2);
    nn::Mlp& net = result.model.net;
    nn::AdamState adam = nn::AdamState::init(net.param_count(), config.learning_rate);
    Rng shuffle_rng = Rng::split(config.seed, kDynShuffleStream);

    const Eigen::Index n = train.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    nn::Mlp best = net;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        // cosine decay to 1% of the base rate; late epochs settle the batch-norm
        // running statistics so inference matches what training optimized
        adam.learning_rate = config.learning_rate *
                             (0.01 + 0.99 * 0.5 *
                                         (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                                                         std::max(1, config.epochs - 1))));
        shuffle_rng.shuffle(order);
        for (Eigen::Index start = 0; start < n; start += config.batch_size) {
            const Eigen::Index count = std::min<Eigen::Index>(config.batch_size, n - start);
            if (count < 2) break; // batch-norm statistics need at least two samples
            Eigen::MatrixXd bx(count, train.histories.cols());
            Eigen::MatrixXd by(count, train.deltas.cols());
            for (Eigen::Index i = 0; i < count; ++i) {
                bx.row(i) = train.histories.row(order[static_cast<std::size_t>(start + i)]);
                by.row(i) = train.deltas.row(order[static_cast<std::size_t>(start + i)]);
            }
            nn::ForwardCache cache;
            const Eigen::MatrixXd pred = net.forward_train(bx, cache);
            Eigen::MatrixXd d_pred;
            nn::mse_loss(pred, by, &d_pred);
            const nn::Gradients grads = net.backward(cache, d_pred);
            Eigen::VectorXd params = net.flatten_params();
            nn::adam_step(params, grads.flatten(), adam);
            net.unflatten_params(params);
        }
        result.train_mse.push_back(eval_mse(result.model, train));
        result.val_mse.push_back(eval_mse(result.model, val));
        if (result.val_mse.back() < best_val) {
            best_val = result.val_mse.back();
            best = net;
            best_epoch = epoch;
        }
    }
    net = best;
    result.best_epoch = best_epoch;
    result.best_val_mse = best_val;
    return result;
}

Eigen::MatrixXd FittedDynamics::predict(const Eigen::MatrixXd& histories_std) const {
    return std::visit([&](const auto& m) { return m.predict(histories_std); }, model);
}

namespace {

/// Rolling model-space state shared by the two rollout entry points.
struct RolloutState {
    std::array<Observation, kHistoryLags> raw_obs;  // lag 0 = current
    std::array<int, kHistoryLags> actions{-1, -1, -1, -1};

    DecisionContext context(int sofa_index) const {
        DecisionContext ctx;
        ctx.obs_lags = raw_obs;
        ctx.action_lags = actions;
        ctx.action_lags[0] = -1;
        ctx.sofa_index = sofa_index;
        return ctx;
    }
};

Eigen::VectorXd model_history(const RolloutState& st, const Standardizer& standardizer,
                              int d_raw, int current_action) {
    const int block = d_raw + kNumActions;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(kHistoryLags * block);
    for (int lag = 0; lag < kHistoryLags; ++lag) {
        h.segment(lag * block, d_raw) = standardizer.apply(st.raw_obs[lag]);
        const int a = lag == 0 ? current_action : st.actions[lag];
        if (a >= 0) h(lag * block + d_raw + a) = 1.0;
    }
    return h;
}

RolloutResult run_rollout(const FittedDynamics& dyn, const Trajectory& start,
                          const StochasticPolicy* policy, const RolloutConfig& config) {
    if (config.horizon < 1)
        throw ConfigError("rollout: horizon must be >= 1");
    if (start.steps.empty())
        throw InsufficientDataError("rollout: empty starting trajectory");
    config.reward.validate();
    const FeatureSchema& schema = dyn.schema;
    const int d = schema.d_raw();
    if (start.steps[0].obs.size() != d)
        throw ShapeError("rollout: starting observation does not match schema");

    Rng rng = Rng::split(config.seed, kRolloutStream);
    RolloutState st;
    st.raw_obs.fill(start.steps[0].obs);

    RolloutResult result;
    result.start_obs = start.steps[0].obs;
    for (int step = 0; step < config.horizon; ++step) {
        int action;
        if (policy) {
            action = policy->sample_action(st.context(schema.sofa_index), rng);
        } else {
            if (step >= start.length()) break; // logged actions exhausted
            action = start.steps[static_cast<std::size_t>(step)].action.flat_index();
        }
        if (config.record_contexts) result.contexts.push_back(st.context(schema.sofa_index));

        const Eigen::VectorXd h = model_history(st, dyn.standardizer, d, action);
        Eigen::VectorXd delta = dyn.predict(h.transpose()).row(0);
        if (config.stochastic)
            for (int i = 0; i < d; ++i) delta(i) += rng.normal();

        Observation next_std = dyn.standardizer.apply(st.raw_obs[0]) + delta;
        Observation next = dyn.standardizer.invert(next_std);
        next(schema.sofa_index) = std::clamp(next(schema.sofa_index), 0.0, kSofaMax);
        next(schema.lactate_index) = std::max(next(schema.lactate_index), 0.0);

        const double r = intermediate_reward(st.raw_obs[0](schema.sofa_index), next(schema.sofa_index),
                                             st.raw_obs[0](schema.lactate_index),
                                             next(schema.lactate_index), config.reward);

        for (int lag = kHistoryLags - 1; lag > 0; --lag) {
            st.raw_obs[lag] = st.raw_obs[lag - 1];
            st.actions[lag] = st.actions[lag - 1];
        }
        st.raw_obs[0] = next;
        st.actions[1] = action;

        result.observations.push_back(next);
        result.actions.push_back(Action::from_flat(action));
        result.rewards.push_back(r);
    }
    return result;
}

} // namespace

RolloutResult rollout(const FittedDynamics& dyn, const Trajectory& start,
                      const StochasticPolicy& policy, const RolloutConfig& config) {
    return run_rollout(dyn, start, &policy, config);
}

RolloutResult rollout_replay(const FittedDynamics& dyn, const Trajectory& start,
                             const RolloutConfig& config) {
    return run_rollout(dyn, start, nullptr, config);
}

} // namespace sepsisrl
