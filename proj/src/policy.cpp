#include "sepsisrl/policy.hpp"

namespace sepsisrl {

Eigen::VectorXd DecisionContext::state_vector() const {
    const auto d = obs_lags[0].size();
    Eigen::VectorXd state(kHistoryLags * d);
    for (int lag = 0; lag < kHistoryLags; ++lag) state.segment(lag * d, d) = obs_lags[lag];
    return state;
}

Eigen::VectorXd DecisionContext::decision_history(const Standardizer& st) const {
    const auto d = obs_lags[0].size();
    const auto block = d + kNumActions;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(kHistoryLags * block);
    for (int lag = 0; lag < kHistoryLags; ++lag) {
        h.segment(lag * block, d) = st.apply(obs_lags[lag]);
        if (lag > 0 && action_lags[lag] >= 0) h(lag * block + d + action_lags[lag]) = 1.0;
    }
    return h;
}

DecisionContext decision_context_at(const Trajectory& traj, int t, const FeatureSchema& schema) {
    if (t < 0 || t >= traj.length())
        throw IndexError("decision_context_at: timestep out of range");
    DecisionContext ctx;
    ctx.sofa_index = schema.sofa_index;
    for (int lag = 0; lag < kHistoryLags; ++lag) {
        const int src = std::max(t - lag, 0);
        ctx.obs_lags[lag] = traj.steps[static_cast<std::size_t>(src)].obs;
        ctx.action_lags[lag] =
            (lag > 0 && t - lag >= 0)
                ? traj.steps[static_cast<std::size_t>(t - lag)].action.flat_index()
                : -1;
    }
    return ctx;
}

int StochasticPolicy::sample_action(const DecisionContext& ctx, Rng& rng) const {
    const Eigen::VectorXd proba = action_proba(ctx);
    const double u = rng.uniform();
    double acc = 0.0;
    for (int a = 0; a < static_cast<int>(proba.size()); ++a) {
        acc += proba(a);
        if (u < acc) return a;
    }
    return static_cast<int>(proba.size()) - 1;
}

NetworkPolicy::NetworkPolicy(PolicyNet net, Standardizer standardizer, FeatureSchema schema)
    : net_(std::move(net)), standardizer_(std::move(standardizer)), schema_(std::move(schema)) {
    schema_.validate();
    if (net_.input_dim() != schema_.history_dim())
        throw ShapeError("NetworkPolicy: net input dim does not match schema history dim");
}

Eigen::VectorXd NetworkPolicy::action_proba(const DecisionContext& ctx) const {
    return bc_predict_proba(net_, ctx.decision_history(standardizer_));
}

std::unique_ptr<StochasticPolicy> NetworkPolicy::clone() const {
    return std::make_unique<NetworkPolicy>(*this);
}

Eigen::VectorXd NetworkPolicy::proba_from_history(const Eigen::VectorXd& history_std) const {
    return bc_predict_proba(net_, history_std);
}

Eigen::MatrixXd NetworkPolicy::proba_from_history_batch(const Eigen::MatrixXd& histories_std) const {
    return bc_predict_proba_batch(net_, histories_std);
}

FixedPolicy::FixedPolicy(Eigen::VectorXd proba) : proba_(std::move(proba)) {
    if (proba_.size() != kNumActions)
        throw ShapeError("FixedPolicy: distribution must have 25 entries");
    if ((proba_.array() < 0).any() || std::abs(proba_.sum() - 1.0) > 1e-9)
        throw DomainError("FixedPolicy: not a probability distribution");
}

} // namespace sepsisrl
