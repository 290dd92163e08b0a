#include "sepsisrl/knn.hpp"

#include <algorithm>
#include <numeric>

namespace sepsisrl {

KnnBehavior knn_fit(const Eigen::MatrixXd& states, const std::vector<int>& actions, int k,
                    double alpha) {
    if (static_cast<std::size_t>(states.rows()) != actions.size())
        throw ShapeError("knn_fit: state/action count mismatch");
    if (k < 1)
        throw ConfigError("knn_fit: k must be >= 1");
    if (states.rows() < k)
        throw InsufficientDataError("knn_fit: reference set smaller than k");
    if (alpha < 0)
        throw ConfigError("knn_fit: alpha must be >= 0");
    for (int a : actions)
        if (a < 0 || a >= kNumActions)
            throw DomainError("knn_fit: action index outside 0..24");
    KnnBehavior model;
    model.ref_states = states;
    model.ref_actions = actions;
    model.k = k;
    model.alpha = alpha;
    return model;
}

namespace {

void proba_rows(const KnnBehavior& model, const Eigen::MatrixXd& queries, Eigen::MatrixXd& out,
                Eigen::Index out_offset) {
    const Eigen::Index n_ref = model.ref_states.rows();
    const Eigen::VectorXd ref_sq = model.ref_states.rowwise().squaredNorm();
    // squared distances: |q|^2 + |r|^2 - 2 q.r; |q|^2 is rank-constant per row
    Eigen::MatrixXd cross = queries * model.ref_states.transpose();
    std::vector<std::pair<double, Eigen::Index>> dist(static_cast<std::size_t>(n_ref));
    for (Eigen::Index qi = 0; qi < queries.rows(); ++qi) {
        for (Eigen::Index r = 0; r < n_ref; ++r)
            dist[static_cast<std::size_t>(r)] = {ref_sq(r) - 2.0 * cross(qi, r), r};
        auto mid = dist.begin() + model.k;
        std::nth_element(dist.begin(), mid - 1, dist.end());
        Eigen::VectorXd counts = Eigen::VectorXd::Constant(kNumActions, model.alpha);
        for (auto it = dist.begin(); it != mid; ++it)
            counts(model.ref_actions[static_cast<std::size_t>(it->second)]) += 1.0;
        out.row(out_offset + qi) =
            counts.transpose() / (static_cast<double>(model.k) + kNumActions * model.alpha);
    }
}

} // namespace

Eigen::VectorXd knn_proba(const KnnBehavior& model, const Eigen::VectorXd& state) {
    if (state.size() != model.ref_states.cols())
        throw ShapeError("knn_proba: state dimension mismatch");
    Eigen::MatrixXd out(1, kNumActions);
    proba_rows(model, state.transpose(), out, 0);
    return out.row(0).transpose();
}

Eigen::MatrixXd knn_proba_batch(const KnnBehavior& model, const Eigen::MatrixXd& states) {
    if (states.cols() != model.ref_states.cols())
        throw ShapeError("knn_proba_batch: state dimension mismatch");
    Eigen::MatrixXd out(states.rows(), kNumActions);
    const Eigen::Index block = 256;
    for (Eigen::Index start = 0; start < states.rows(); start += block) {
        const Eigen::Index count = std::min(block, states.rows() - start);
        proba_rows(model, states.middleRows(start, count), out, start);
    }
    return out;
}

KnnBehaviorPolicy::KnnBehaviorPolicy(KnnBehavior model, Standardizer standardizer,
                                     FeatureSchema schema)
    : model_(std::move(model)), standardizer_(std::move(standardizer)), schema_(std::move(schema)) {
    schema_.validate();
    if (model_.ref_states.cols() != schema_.state_dim())
        throw ShapeError("KnnBehaviorPolicy: reference dimension does not match schema");
}

Eigen::VectorXd KnnBehaviorPolicy::action_proba(const DecisionContext& ctx) const {
    return knn_proba(model_, standardizer_.apply_state(ctx.state_vector()));
}

std::unique_ptr<StochasticPolicy> KnnBehaviorPolicy::clone() const {
    return std::make_unique<KnnBehaviorPolicy>(*this);
}

} // namespace sepsisrl
