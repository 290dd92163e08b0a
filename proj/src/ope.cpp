#include "sepsisrl/ope.hpp"

#include <algorithm>
#include <cmath>

namespace sepsisrl {

double ForestQ::q_value(const Eigen::VectorXd& state_raw, int action) const {
    if (action < 0 || action >= kNumActions)
        throw DomainError("ForestQ::q_value: action outside 0..24");
    if (n_iterations == 0) return 0.0; // before any backup the value model is zero
    const Eigen::VectorXd state_std = standardizer.apply_state(state_raw);
    Eigen::VectorXd input = Eigen::VectorXd::Zero(state_std.size() + kNumActions);
    input.head(state_std.size()) = state_std;
    input(state_std.size() + action) = 1.0;
    return forest.predict_one(input);
}

Eigen::VectorXd ForestQ::q_values(const Eigen::VectorXd& state_raw) const {
    if (n_iterations == 0) return Eigen::VectorXd::Zero(kNumActions);
    const Eigen::VectorXd state_std = standardizer.apply_state(state_raw);
    Eigen::VectorXd input = Eigen::VectorXd::Zero(state_std.size() + kNumActions);
    input.head(state_std.size()) = state_std;
    Eigen::VectorXd out(kNumActions);
    for (int a = 0; a < kNumActions; ++a) {
        input(state_std.size() + a) = 1.0;
        out(a) = forest.predict_one(input);
        input(state_std.size() + a) = 0.0;
    }
    return out;
}

ForestQ fqi_fit(const Cohort& cohort, const FeatureSchema& schema, const Standardizer& st,
                const StochasticPolicy& eval_policy, double gamma, int n_iterations,
                const ForestConfig& forest_config) {
    if (cohort.empty())
        throw InsufficientDataError("fqi_fit: empty cohort");
    if (!(gamma >= 0 && gamma <= 1))
        throw ConfigError("fqi_fit: gamma must be in [0, 1]");
    schema.validate();

    int max_horizon = 0;
    Eigen::Index n_rows = 0;
    for (const auto& traj : cohort) {
        max_horizon = std::max(max_horizon, traj.length());
        n_rows += traj.length();
    }
    const int iterations = n_iterations < 0 ? max_horizon : n_iterations;

    const int d_state = schema.state_dim();
    Eigen::MatrixXd inputs(n_rows, d_state + kNumActions);
    Eigen::VectorXd rewards(n_rows);
    std::vector<bool> terminal(static_cast<std::size_t>(n_rows));
    Eigen::MatrixXd next_states(n_rows, d_state);
    Eigen::MatrixXd next_pi = Eigen::MatrixXd::Zero(n_rows, kNumActions);

    Eigen::Index row = 0;
    for (const auto& traj : cohort) {
        for (int t = 0; t < traj.length(); ++t) {
            const auto& step = traj.steps[static_cast<std::size_t>(t)];
            inputs.row(row).setZero();
            inputs.row(row).head(d_state) = st.apply_state(build_state(traj, t));
            inputs(row, d_state + step.action.flat_index()) = 1.0;
            rewards(row) = step.reward;
            terminal[static_cast<std::size_t>(row)] = step.is_terminal;
            if (!step.is_terminal) {
                next_states.row(row) = st.apply_state(build_state(traj, t + 1));
                next_pi.row(row) =
                    eval_policy.action_proba(decision_context_at(traj, t + 1, schema)).transpose();
            } else {
                next_states.row(row).setZero();
            }
            ++row;
        }
    }

    ForestQ q;
    q.gamma = gamma;
    q.n_iterations = 0;
    q.standardizer = st;
    for (int it = 0; it < iterations; ++it) {
        Eigen::VectorXd targets = rewards;
        if (q.n_iterations > 0 && gamma > 0) {
            // expected next-state value under the evaluation policy
            Eigen::VectorXd next_value = Eigen::VectorXd::Zero(n_rows);
            Eigen::MatrixXd probe = Eigen::MatrixXd::Zero(n_rows, d_state + kNumActions);
            probe.leftCols(d_state) = next_states;
            for (int a = 0; a < kNumActions; ++a) {
                if (next_pi.col(a).isZero(0.0)) continue; // action unsupported by pi_e
                probe.col(d_state + a).setOnes();
                const Eigen::VectorXd qa = q.forest.predict(probe);
                next_value += next_pi.col(a).cwiseProduct(qa);
                probe.col(d_state + a).setZero();
            }
            for (Eigen::Index i = 0; i < n_rows; ++i)
                if (!terminal[static_cast<std::size_t>(i)]) targets(i) += gamma * next_value(i);
        }
        ForestConfig cfg = forest_config;
        cfg.seed = Rng::split(forest_config.seed, 0xF0A1, static_cast<std::uint64_t>(it)).next_u64();
        q.forest = RegressionForest::fit(inputs, targets, cfg);
        q.n_iterations = it + 1;
    }
    return q;
}

RatioResult is_ratios(const Trajectory& traj, const StochasticPolicy& eval_policy,
                      const StochasticPolicy& behavior, const FeatureSchema& schema,
                      double clip_max) {
    if (!(clip_max >= 1.0))
        throw ConfigError("is_ratios: clip_max must be >= 1");
    RatioResult result;
    result.total_steps = traj.length();
    double cumulative = 1.0;
    for (int t = 0; t < traj.length(); ++t) {
        const DecisionContext ctx = decision_context_at(traj, t, schema);
        const int a = traj.steps[static_cast<std::size_t>(t)].action.flat_index();
        const double pe = eval_policy.action_proba(ctx)(a);
        const double pb = behavior.action_proba(ctx)(a);
        if (pb <= 0.0)
            throw DomainError("is_ratios: behavior probability is zero at step " +
                              std::to_string(t) + " (unsmoothed behavior model)");
        const double ratio = pe / pb;
        const double clipped = std::clamp(ratio, 1.0 / clip_max, clip_max);
        if (clipped != ratio) ++result.clipped_steps;
        cumulative *= clipped;
        result.cumulative.push_back(cumulative);
    }
    return result;
}

namespace {

std::map<int, std::vector<std::size_t>> group_by_horizon(const Cohort& cohort) {
    std::map<int, std::vector<std::size_t>> by_horizon;
    for (std::size_t i = 0; i < cohort.size(); ++i)
        by_horizon[cohort[i].length()].push_back(i);
    return by_horizon;
}

} // namespace

EstimatorResult estimate_phwis(const Cohort& cohort, const StochasticPolicy& eval_policy,
                               const StochasticPolicy& behavior, const FeatureSchema& schema,
                               double gamma, double clip_max) {
    if (cohort.empty())
        throw InsufficientDataError("estimate_phwis: empty cohort");

    std::vector<double> weight(cohort.size());
    std::vector<double> returns(cohort.size());
    long clipped = 0, steps = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto r = is_ratios(cohort[i], eval_policy, behavior, schema, clip_max);
        weight[i] = r.cumulative.back();
        returns[i] = trajectory_return(cohort[i], gamma);
        clipped += r.clipped_steps;
        steps += r.total_steps;
    }

    EstimatorResult result;
    result.diagnostics.clip_fraction = steps > 0 ? static_cast<double>(clipped) / steps : 0.0;

    double value = 0.0;
    double kept_fraction = 0.0;
    for (const auto& [horizon, members] : group_by_horizon(cohort)) {
        HorizonGroupStats stats;
        stats.horizon = horizon;
        stats.count = static_cast<int>(members.size());
        double w_sum = 0.0, w_sq = 0.0, wr_sum = 0.0;
        for (std::size_t idx : members) {
            w_sum += weight[idx];
            w_sq += weight[idx] * weight[idx];
            wr_sum += weight[idx] * returns[idx];
        }
        stats.weight_sum = w_sum;
        stats.ess = w_sq > 0 ? w_sum * w_sum / w_sq : 0.0;
        const double fraction = static_cast<double>(members.size()) / cohort.size();
        if (w_sum > 0) {
            value += fraction * (wr_sum / w_sum);
            kept_fraction += fraction;
        } else {
            stats.dropped = true;
            ++result.diagnostics.dropped_groups;
        }
        result.diagnostics.groups.push_back(stats);
    }
    if (kept_fraction <= 0)
        throw InsufficientDataError("estimate_phwis: every horizon group has zero weight");
    result.value = value / kept_fraction; // renormalize over the kept groups
    return result;
}

EstimatorResult estimate_phwdr(const Cohort& cohort, const StochasticPolicy& eval_policy,
                               const StochasticPolicy& behavior, const FeatureSchema& schema,
                               const ForestQ& qhat, double gamma, double clip_max) {
    if (cohort.empty())
        throw InsufficientDataError("estimate_phwdr: empty cohort");
    if (std::abs(qhat.gamma - gamma) > 1e-12)
        throw ConfigError("estimate_phwdr: qhat was fit for gamma " + std::to_string(qhat.gamma) +
                          ", estimator uses " + std::to_string(gamma));

    std::vector<RatioResult> ratios(cohort.size());
    long clipped = 0, steps = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        ratios[i] = is_ratios(cohort[i], eval_policy, behavior, schema, clip_max);
        clipped += ratios[i].clipped_steps;
        steps += ratios[i].total_steps;
    }

    EstimatorResult result;
    result.diagnostics.clip_fraction = steps > 0 ? static_cast<double>(clipped) / steps : 0.0;

    double value = 0.0;
    double kept_fraction = 0.0;
    for (const auto& [horizon, members] : group_by_horizon(cohort)) {
        HorizonGroupStats stats;
        stats.horizon = horizon;
        stats.count = static_cast<int>(members.size());
        const double n_group = static_cast<double>(members.size());

        // stepwise normalizers sum_j rho_{j,0:t}
        std::vector<double> step_norm(static_cast<std::size_t>(horizon), 0.0);
        for (std::size_t idx : members)
            for (int t = 0; t < horizon; ++t)
                step_norm[static_cast<std::size_t>(t)] +=
                    ratios[idx].cumulative[static_cast<std::size_t>(t)];
        bool degenerate = false;
        for (double s : step_norm)
            if (!(s > 0)) degenerate = true;

        double w_sum = 0.0, w_sq = 0.0;
        for (std::size_t idx : members) {
            const double w = ratios[idx].cumulative.back();
            w_sum += w;
            w_sq += w * w;
        }
        stats.weight_sum = w_sum;
        stats.ess = w_sq > 0 ? w_sum * w_sum / w_sq : 0.0;

        if (degenerate) {
            stats.dropped = true;
            ++result.diagnostics.dropped_groups;
            result.diagnostics.groups.push_back(stats);
            continue;
        }

        double wdr = 0.0;
        for (std::size_t idx : members) {
            const auto& traj = cohort[idx];
            double discount = 1.0;
            double prev_w = 1.0 / n_group; // w_{i,-1}
            for (int t = 0; t < horizon; ++t) {
                const auto& step = traj.steps[static_cast<std::size_t>(t)];
                const double w = ratios[idx].cumulative[static_cast<std::size_t>(t)] /
                                 step_norm[static_cast<std::size_t>(t)];
                const DecisionContext ctx = decision_context_at(traj, t, schema);
                const Eigen::VectorXd state = ctx.state_vector();
                const double q_sa = qhat.q_value(state, step.action.flat_index());
                const double v_s = eval_policy.action_proba(ctx).dot(qhat.q_values(state));
                wdr += discount * (w * step.reward - (w * q_sa - prev_w * v_s));
                prev_w = w;
                discount *= gamma;
            }
        }
        const double fraction = n_group / static_cast<double>(cohort.size());
        value += fraction * wdr;
        kept_fraction += fraction;
        result.diagnostics.groups.push_back(stats);
    }
    if (kept_fraction <= 0)
        throw InsufficientDataError("estimate_phwdr: every horizon group degenerate");
    result.value = value / kept_fraction;
    return result;
}

double estimate_am(const Cohort& cohort, const StochasticPolicy& eval_policy,
                   const FeatureSchema& schema, const ForestQ& qhat) {
    if (cohort.empty())
        throw InsufficientDataError("estimate_am: empty cohort");
    double sum = 0.0;
    for (const auto& traj : cohort) {
        const DecisionContext ctx = decision_context_at(traj, 0, schema);
        sum += eval_policy.action_proba(ctx).dot(qhat.q_values(ctx.state_vector()));
    }
    return sum / static_cast<double>(cohort.size());
}

OpeReport evaluate_policy(const Cohort& cohort, const StochasticPolicy& eval_policy,
                          const FeatureSchema& schema, const OpeConfig& config,
                          const StochasticPolicy* behavior_override) {
    if (cohort.empty())
        throw InsufficientDataError("evaluate_policy: empty cohort");
    schema.validate();

    const Standardizer st = fit_standardizer(collect_observations(cohort));

    std::unique_ptr<StochasticPolicy> knn_behavior;
    const StochasticPolicy* behavior = behavior_override;
    if (!behavior) {
        Eigen::Index n_states = 0;
        for (const auto& traj : cohort) n_states += traj.length();
        Eigen::MatrixXd states(n_states, schema.state_dim());
        std::vector<int> actions;
        actions.reserve(static_cast<std::size_t>(n_states));
        Eigen::Index row = 0;
        for (const auto& traj : cohort) {
            for (int t = 0; t < traj.length(); ++t) {
                states.row(row++) = st.apply_state(build_state(traj, t));
                actions.push_back(traj.steps[static_cast<std::size_t>(t)].action.flat_index());
            }
        }
        const int k = std::min<int>(config.k, static_cast<int>(n_states));
        knn_behavior = std::make_unique<KnnBehaviorPolicy>(knn_fit(states, actions, k, config.alpha),
                                                           st, schema);
        behavior = knn_behavior.get();
    }

    ForestConfig forest_cfg = config.forest;
    forest_cfg.seed = config.seed;
    const ForestQ qhat =
        fqi_fit(cohort, schema, st, eval_policy, config.gamma, config.fqi_iterations, forest_cfg);

    OpeReport report;
    report.config = config;

    const auto phwis =
        estimate_phwis(cohort, eval_policy, *behavior, schema, config.gamma, config.clip_max);
    report.phwis = phwis.value;
    report.phwis_diagnostics = phwis.diagnostics;

    const auto phwdr = estimate_phwdr(cohort, eval_policy, *behavior, schema, qhat, config.gamma,
                                      config.clip_max);
    report.phwdr = phwdr.value;
    report.phwdr_diagnostics = phwdr.diagnostics;

    report.am = estimate_am(cohort, eval_policy, schema, qhat);

    double w_sum = 0.0, w_sq = 0.0;
    for (const auto& g : report.phwis_diagnostics.groups) {
        w_sum += g.weight_sum;
        w_sq += g.ess > 0 ? g.weight_sum * g.weight_sum / g.ess : 0.0;
    }
    report.ess = w_sq > 0 ? w_sum * w_sum / w_sq : 0.0;
    return report;
}

} // namespace sepsisrl
