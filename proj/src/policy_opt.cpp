#include "sepsisrl/policy_opt.hpp"

#include <cmath>

namespace sepsisrl {

namespace {
constexpr std::uint64_t kCollectStream = 0xF001;
constexpr std::uint64_t kProbeStream = 0xF002;
} // namespace

void BlendSpec::validate() const {
    if (sofa_low_max < 0 || sofa_high_min > 24 || sofa_low_max >= sofa_high_min)
        throw ConfigError("BlendSpec: need 0 <= sofa_low_max < sofa_high_min <= 24");
}

RegimeSource BlendSpec::source_for_sofa(double sofa) const {
    if (sofa < 0 || sofa > kSofaMax)
        throw DomainError("BlendSpec: SOFA outside [0, 24]");
    if (sofa <= static_cast<double>(sofa_low_max)) return low;
    if (sofa >= static_cast<double>(sofa_high_min)) return high;
    return medium;
}

BlendedPolicy::BlendedPolicy(const StochasticPolicy& clinician, const StochasticPolicy& learned,
                             BlendSpec spec)
    : clinician_(clinician.clone()), learned_(learned.clone()), spec_(spec) {
    spec_.validate();
}

BlendedPolicy::BlendedPolicy(const BlendedPolicy& other)
    : clinician_(other.clinician_->clone()), learned_(other.learned_->clone()), spec_(other.spec_) {}

Eigen::VectorXd BlendedPolicy::action_proba(const DecisionContext& ctx) const {
    const RegimeSource src = spec_.source_for_sofa(ctx.sofa());
    return src == RegimeSource::Clinician ? clinician_->action_proba(ctx)
                                          : learned_->action_proba(ctx);
}

std::unique_ptr<StochasticPolicy> BlendedPolicy::clone() const {
    return std::unique_ptr<StochasticPolicy>(new BlendedPolicy(*this));
}

std::unique_ptr<StochasticPolicy> blend(const StochasticPolicy& clinician,
                                        const StochasticPolicy& learned, const BlendSpec& spec) {
    return std::make_unique<BlendedPolicy>(clinician, learned, spec);
}

NetworkPolicy init_from_bc(const PolicyNet& bc_model, const Standardizer& standardizer,
                           const FeatureSchema& schema) {
    return NetworkPolicy(bc_model, standardizer, schema); // value semantics: deep copy
}

Eigen::VectorXd RolloutBatch::rollout_returns() const {
    Eigen::VectorXd returns = Eigen::VectorXd::Zero(n_rollouts);
    for (int i = 0; i < n_rollouts; ++i) {
        double discount = 1.0;
        for (int t = 0; t < horizon; ++t) {
            returns(i) += discount * rewards(i * horizon + t);
            discount *= gamma;
        }
    }
    return returns;
}

Eigen::VectorXd RolloutBatch::returns_to_go() const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(rows());
    for (int i = 0; i < n_rollouts; ++i) {
        double acc = 0.0;
        for (int t = horizon - 1; t >= 0; --t) {
            acc = rewards(i * horizon + t) + gamma * acc;
            g(i * horizon + t) = acc;
        }
    }
    return g;
}

RolloutBatch collect_model_rollouts(const NetworkPolicy& policy, const FittedDynamics& dyn,
                                    const Cohort& cohort, int n_rollouts, int horizon,
                                    double gamma, std::uint64_t seed, const RewardParams& reward) {
    if (cohort.empty())
        throw InsufficientDataError("collect_model_rollouts: empty cohort");
    if (n_rollouts < 1 || horizon < 1)
        throw ConfigError("collect_model_rollouts: need n_rollouts >= 1 and horizon >= 1");

    RolloutBatch batch;
    batch.n_rollouts = n_rollouts;
    batch.horizon = horizon;
    batch.gamma = gamma;
    batch.histories.resize(static_cast<Eigen::Index>(n_rollouts) * horizon,
                           policy.schema().history_dim());
    batch.actions.resize(static_cast<std::size_t>(n_rollouts) * horizon);
    batch.rewards.resize(static_cast<Eigen::Index>(n_rollouts) * horizon);
    batch.logp_old.resize(batch.rewards.size());

    RolloutConfig rc;
    rc.horizon = horizon;
    rc.reward = reward;
    rc.record_contexts = true;
    for (int i = 0; i < n_rollouts; ++i) {
        Rng start_rng = Rng::split(seed, kCollectStream, static_cast<std::uint64_t>(i));
        const auto& start =
            cohort[static_cast<std::size_t>(start_rng.uniform_int(0, static_cast<int>(cohort.size()) - 1))];
        rc.seed = start_rng.next_u64();
        const RolloutResult r = rollout(dyn, start, policy, rc);
        if (r.length() != horizon)
            throw Error("collect_model_rollouts: unexpected truncated rollout");
        for (int t = 0; t < horizon; ++t) {
            const Eigen::Index row = static_cast<Eigen::Index>(i) * horizon + t;
            const Eigen::VectorXd h =
                r.contexts[static_cast<std::size_t>(t)].decision_history(policy.standardizer());
            batch.histories.row(row) = h;
            const int a = r.actions[static_cast<std::size_t>(t)].flat_index();
            batch.actions[static_cast<std::size_t>(row)] = a;
            batch.rewards(row) = r.rewards[static_cast<std::size_t>(t)];
            batch.logp_old(row) = std::log(std::max(policy.proba_from_history(h)(a), 1e-300));
        }
    }
    return batch;
}

void reinforce_update(NetworkPolicy& policy, const RolloutBatch& batch, double learning_rate) {
    if (batch.rows() == 0)
        throw InsufficientDataError("reinforce_update: empty batch");
    const Eigen::VectorXd returns = batch.rollout_returns();
    const double baseline = returns.mean();

    nn::Mlp& net = policy.policy_net().net;
    nn::ForwardCache cache;
    const Eigen::MatrixXd logits = net.forward_train(batch.histories, cache);
    const Eigen::MatrixXd proba = nn::softmax_rows(logits);

    // d(-J)/dlogits for J = mean_i (R_i - b) sum_t log pi(a_it | h_it)
    Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
    const double inv_n = 1.0 / static_cast<double>(batch.n_rollouts);
    for (int i = 0; i < batch.n_rollouts; ++i) {
        const double adv = (returns(i) - baseline) * inv_n;
        for (int t = 0; t < batch.horizon; ++t) {
            const Eigen::Index row = static_cast<Eigen::Index>(i) * batch.horizon + t;
            d_logits.row(row) = adv * proba.row(row);
            d_logits(row, batch.actions[static_cast<std::size_t>(row)]) -= adv;
        }
    }
    const nn::Gradients grads = net.backward(cache, d_logits);
    Eigen::VectorXd params = net.flatten_params();
    params -= learning_rate * grads.flatten();
    net.unflatten_params(params);
}

void PpoConfig::validate() const {
    if (!(clip_epsilon > 0 && clip_epsilon < 1))
        throw ConfigError("PpoConfig: clip_epsilon must be in (0, 1)");
    if (horizon < 1)
        throw ConfigError("PpoConfig: horizon must be >= 1");
    if (iterations < 0 || rollouts_per_iteration < 1 || epochs_per_update < 1)
        throw ConfigError("PpoConfig: invalid loop sizes");
    if (!(gamma > 0 && gamma <= 1))
        throw ConfigError("PpoConfig: gamma must be in (0, 1]");
}

double ppo_update(NetworkPolicy& policy, const RolloutBatch& batch, const PpoConfig& config,
                  nn::AdamState& adam) {
    config.validate();
    if (batch.rows() == 0)
        throw InsufficientDataError("ppo_update: empty batch");

    // advantage: return-to-go minus the per-timestep batch mean
    const Eigen::VectorXd g = batch.returns_to_go();
    Eigen::VectorXd advantage(g.size());
    for (int t = 0; t < batch.horizon; ++t) {
        double mean_t = 0.0;
        for (int i = 0; i < batch.n_rollouts; ++i) mean_t += g(i * batch.horizon + t);
        mean_t /= static_cast<double>(batch.n_rollouts);
        for (int i = 0; i < batch.n_rollouts; ++i) {
            const Eigen::Index row = static_cast<Eigen::Index>(i) * batch.horizon + t;
            advantage(row) = g(row) - mean_t;
        }
    }

    nn::Mlp& net = policy.policy_net().net;
    const double n_rows = static_cast<double>(batch.rows());
    double objective = 0.0;
    for (int epoch = 0; epoch < config.epochs_per_update; ++epoch) {
        nn::ForwardCache cache;
        const Eigen::MatrixXd logits = net.forward_train(batch.histories, cache);
        const Eigen::MatrixXd proba = nn::softmax_rows(logits);

        objective = 0.0;
        Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
        for (Eigen::Index row = 0; row < batch.rows(); ++row) {
            const int a = batch.actions[static_cast<std::size_t>(row)];
            const double logp_new = std::log(std::max(proba(row, a), 1e-300));
            const double rho = std::exp(logp_new - batch.logp_old(row));
            const double adv = advantage(row);
            const double clipped = std::clamp(rho, 1.0 - config.clip_epsilon,
                                              1.0 + config.clip_epsilon);
            objective += std::min(rho * adv, clipped * adv);
            // the unclipped branch carries gradient only while it is the minimum
            const bool active = adv >= 0 ? rho <= 1.0 + config.clip_epsilon
                                         : rho >= 1.0 - config.clip_epsilon;
            if (active) {
                // d(-surrogate)/dlogits = coef * (proba - onehot), coef = rho * adv
                const double coef = rho * adv / n_rows;
                d_logits.row(row) += coef * proba.row(row);
                d_logits(row, a) -= coef;
            }
        }
        objective /= n_rows;

        const nn::Gradients grads = net.backward(cache, d_logits);
        Eigen::VectorXd params = net.flatten_params();
        nn::adam_step(params, grads.flatten(), adam);
        net.unflatten_params(params);
    }
    return objective;
}

double mean_kl(const NetworkPolicy& mu, const NetworkPolicy& pi,
               const Eigen::MatrixXd& probe_histories) {
    if (probe_histories.rows() == 0)
        throw InsufficientDataError("mean_kl: empty probe set");
    const Eigen::MatrixXd p = mu.proba_from_history_batch(probe_histories);
    const Eigen::MatrixXd q = pi.proba_from_history_batch(probe_histories);
    double kl = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        for (Eigen::Index a = 0; a < p.cols(); ++a)
            kl += p(i, a) * (std::log(std::max(p(i, a), 1e-12)) -
                             std::log(std::max(q(i, a), 1e-12)));
    return kl / static_cast<double>(p.rows());
}

PolicyTrainResult train_policy(const PolicyNet& bc_model, const Standardizer& standardizer,
                               const FeatureSchema& schema, const FittedDynamics& dyn,
                               const Cohort& cohort, PolicyAlgorithm algorithm,
                               const PpoConfig& config, const RewardParams& reward) {
    config.validate();
    if (cohort.empty())
        throw InsufficientDataError("train_policy: empty cohort");

    const NetworkPolicy clinician = init_from_bc(bc_model, standardizer, schema);
    PolicyTrainResult result{init_from_bc(bc_model, standardizer, schema), {}};

    // fixed probe set of logged decision histories for the KL diagnostic
    Rng probe_rng = Rng::split(config.seed, kProbeStream);
    const int n_probe = 256;
    Eigen::MatrixXd probe(n_probe, schema.history_dim());
    for (int i = 0; i < n_probe; ++i) {
        const auto& traj = cohort[static_cast<std::size_t>(
            probe_rng.uniform_int(0, static_cast<int>(cohort.size()) - 1))];
        const int t = probe_rng.uniform_int(0, traj.length() - 1);
        probe.row(i) = decision_context_at(traj, t, schema).decision_history(standardizer);
    }

    nn::AdamState adam =
        nn::AdamState::init(result.policy.policy_net().net.param_count(), config.learning_rate);
    for (int iter = 0; iter < config.iterations; ++iter) {
        const std::uint64_t iter_seed = Rng::split(config.seed, 0xF003, static_cast<std::uint64_t>(iter)).next_u64();
        const RolloutBatch batch =
            collect_model_rollouts(result.policy, dyn, cohort, config.rollouts_per_iteration,
                                   config.horizon, config.gamma, iter_seed, reward);
        double loss = 0.0;
        if (algorithm == PolicyAlgorithm::Ppo) {
            loss = ppo_update(result.policy, batch, config, adam);
        } else {
            reinforce_update(result.policy, batch, config.learning_rate);
        }
        PolicyIterationStats stats;
        stats.iteration = iter;
        stats.mean_return = batch.rollout_returns().mean();
        stats.kl_to_clinician = mean_kl(clinician, result.policy, probe);
        stats.loss = loss;
        result.diagnostics.push_back(stats);
    }
    return result;
}

} // namespace sepsisrl
