#include <doctest.h>

#include <cmath>

#include "sepsisrl/cohort_synth.hpp"
#include "sepsisrl/policy_opt.hpp"
#include "support/finite_diff.hpp"

using namespace sepsisrl;

namespace {

FeatureSchema two_feature_schema() {
    FeatureSchema s;
    s.names = {"sofa", "lactate"};
    return s;
}

Standardizer identity_standardizer(int d) {
    Standardizer st;
    st.mean = Eigen::VectorXd::Zero(d);
    st.std = Eigen::VectorXd::Ones(d);
    return st;
}

DecisionContext context_with_sofa(double sofa, const FeatureSchema& schema) {
    DecisionContext ctx;
    Observation obs = Observation::Zero(schema.d_raw());
    obs(schema.sofa_index) = sofa;
    obs(schema.lactate_index) = 1.0;
    ctx.obs_lags.fill(obs);
    ctx.sofa_index = schema.sofa_index;
    return ctx;
}

NetworkPolicy random_network_policy(const FeatureSchema& schema, std::uint64_t seed) {
    Rng rng(seed);
    auto net = PolicyNet::init(schema.history_dim(), rng);
    return NetworkPolicy(net, identity_standardizer(schema.d_raw()), schema);
}

// single-state bandit dynamics: zero deltas, so only action choice matters
FittedDynamics zero_dynamics(const FeatureSchema& schema) {
    FittedDynamics dyn;
    LinearDynamics zero;
    zero.weights = Eigen::MatrixXd::Zero(schema.d_raw(), schema.history_dim());
    zero.bias = Eigen::VectorXd::Zero(schema.d_raw());
    dyn.model = zero;
    dyn.standardizer = identity_standardizer(schema.d_raw());
    dyn.schema = schema;
    return dyn;
}

} // namespace

TEST_CASE("init_from_bc copies and isolates parameters") {
    const auto schema = two_feature_schema();
    Rng rng(1);
    auto bc = PolicyNet::init(schema.history_dim(), rng);
    const auto st = identity_standardizer(schema.d_raw());

    NetworkPolicy pi = init_from_bc(bc, st, schema);
    NetworkPolicy mu(bc, st, schema);

    Rng crng(2);
    for (int i = 0; i < 1000; ++i) {
        auto ctx = context_with_sofa(std::floor(crng.uniform(0, 25)), schema);
        ctx.obs_lags[0](1) = crng.uniform(0, 5);
        const auto a = mu.action_proba(ctx);
        const auto b = pi.action_proba(ctx);
        CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
    }
    // KL is exactly zero at initialization
    Eigen::MatrixXd probe(8, schema.history_dim());
    Rng prng(3);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < schema.history_dim(); ++j) probe(i, j) = prng.normal();
    CHECK(mean_kl(mu, pi, probe) == doctest::Approx(0.0).epsilon(1e-14));

    // training the copy leaves the original untouched
    const Eigen::VectorXd mu_params = mu.policy_net().net.flatten_params();
    pi.policy_net().net.dense[0].weight.array() += 0.5;
    CHECK(mu.policy_net().net.flatten_params() == mu_params);
    CHECK(mean_kl(mu, pi, probe) > 0.0);
}

TEST_CASE("blend switches by SOFA regime with inclusive boundaries") {
    const auto schema = two_feature_schema();
    const auto clinician = random_network_policy(schema, 10);
    const auto learned = random_network_policy(schema, 20);

    BlendSpec spec; // clinician, learned, clinician with defaults 5 / 15
    const auto blended = blend(clinician, learned, spec);

    const auto at = [&](double sofa) { return blended->action_proba(context_with_sofa(sofa, schema)); };
    CHECK(at(10.0) == learned.action_proba(context_with_sofa(10.0, schema)));
    CHECK(at(5.0) == clinician.action_proba(context_with_sofa(5.0, schema)));  // low boundary inclusive
    CHECK(at(15.0) == clinician.action_proba(context_with_sofa(15.0, schema))); // high boundary inclusive
    CHECK(at(6.0) == learned.action_proba(context_with_sofa(6.0, schema)));
    CHECK(at(14.0) == learned.action_proba(context_with_sofa(14.0, schema)));

    // distributions stay valid everywhere
    for (double sofa = 0; sofa <= 24; sofa += 1) {
        const auto p = at(sofa);
        CHECK(std::abs(p.sum() - 1.0) <= 1e-12);
    }

    DecisionContext bad = context_with_sofa(10.0, schema);
    bad.obs_lags[0](schema.sofa_index) = 30.0;
    CHECK_THROWS_AS(blended->action_proba(bad), DomainError);
}

TEST_CASE("all-clinician blend is the clinician everywhere") {
    const auto schema = two_feature_schema();
    const auto clinician = random_network_policy(schema, 11);
    const auto learned = random_network_policy(schema, 21);
    BlendSpec spec;
    spec.low = spec.medium = spec.high = RegimeSource::Clinician;
    const auto blended = blend(clinician, learned, spec);
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const auto ctx = context_with_sofa(std::floor(rng.uniform(0, 25)), schema);
        CHECK(blended->action_proba(ctx) == clinician.action_proba(ctx));
    }
}

TEST_CASE("re-blending with the same spec changes nothing") {
    const auto schema = two_feature_schema();
    const auto clinician = random_network_policy(schema, 12);
    const auto learned = random_network_policy(schema, 22);
    BlendSpec spec;
    const auto once = blend(clinician, learned, spec);
    const auto twice = blend(clinician, *once, spec);
    Rng rng(6);
    for (int i = 0; i < 200; ++i) {
        const auto ctx = context_with_sofa(std::floor(rng.uniform(0, 25)), schema);
        CHECK(once->action_proba(ctx) == twice->action_proba(ctx));
    }
}

TEST_CASE("blend spec validation") {
    BlendSpec spec;
    spec.sofa_low_max = 15;
    spec.sofa_high_min = 15;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = BlendSpec{};
    spec.sofa_high_min = 25;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

namespace {

Cohort single_state_cohort(const FeatureSchema& schema) {
    Trajectory traj;
    traj.patient_id = "start";
    Step s;
    s.obs = Observation(schema.d_raw());
    s.obs << 10.0, 2.0;
    s.action = Action{0, 0};
    s.is_terminal = true;
    traj.steps.push_back(s);
    return {traj};
}

// reward depends only on the chosen action; implemented by a dynamics model
// whose lactate delta responds to the action one-hot block
FittedDynamics bandit_dynamics(const FeatureSchema& schema, int good_action) {
    FittedDynamics dyn = zero_dynamics(schema);
    LinearDynamics lin = std::get<LinearDynamics>(dyn.model);
    // lactate falls when the good action was just taken (lag-0 action block)
    lin.weights(schema.lactate_index, schema.d_raw() + good_action) = -0.5;
    dyn.model = lin;
    return dyn;
}

} // namespace

TEST_CASE("collected rollouts store consistent log-probabilities") {
    const auto schema = two_feature_schema();
    const auto policy = random_network_policy(schema, 30);
    const auto dyn = bandit_dynamics(schema, 7);
    const auto cohort = single_state_cohort(schema);

    const auto batch = collect_model_rollouts(policy, dyn, cohort, 16, 10, 0.99, 99);
    CHECK(batch.rows() == 160);
    for (Eigen::Index row = 0; row < batch.rows(); ++row) {
        const auto p = policy.proba_from_history(batch.histories.row(row).transpose());
        CHECK(batch.logp_old(row) ==
              doctest::Approx(std::log(p(batch.actions[static_cast<std::size_t>(row)])))
                  .epsilon(1e-12));
    }
    // horizon 10 default contract
    CHECK(batch.horizon == 10);

    // deterministic for a fixed seed
    const auto batch2 = collect_model_rollouts(policy, dyn, cohort, 16, 10, 0.99, 99);
    CHECK(batch.histories == batch2.histories);
    CHECK(batch.logp_old == batch2.logp_old);
}

TEST_CASE("returns and returns-to-go are consistent") {
    const auto schema = two_feature_schema();
    const auto policy = random_network_policy(schema, 31);
    const auto dyn = bandit_dynamics(schema, 3);
    const auto cohort = single_state_cohort(schema);
    const auto batch = collect_model_rollouts(policy, dyn, cohort, 4, 6, 0.5, 7);

    const auto returns = batch.rollout_returns();
    const auto g = batch.returns_to_go();
    for (int i = 0; i < batch.n_rollouts; ++i) {
        CHECK(returns(i) == doctest::Approx(g(i * batch.horizon)).epsilon(1e-12));
        double manual = 0.0;
        for (int t = 0; t < batch.horizon; ++t)
            manual += std::pow(0.5, t) * batch.rewards(i * batch.horizon + t);
        CHECK(returns(i) == doctest::Approx(manual).epsilon(1e-12));
    }
}

TEST_CASE("reinforce with zero learning rate is the identity") {
    const auto schema = two_feature_schema();
    auto policy = random_network_policy(schema, 32);
    const auto dyn = bandit_dynamics(schema, 3);
    const auto batch = collect_model_rollouts(policy, dyn, single_state_cohort(schema), 8, 5, 1.0, 3);
    const Eigen::VectorXd before = policy.policy_net().net.flatten_params();
    reinforce_update(policy, batch, 0.0);
    CHECK(policy.policy_net().net.flatten_params() == before);
}

TEST_CASE("reinforce update is zero when all returns are equal") {
    const auto schema = two_feature_schema();
    auto policy = random_network_policy(schema, 33);
    // zero dynamics: every action yields zero reward, so all returns equal
    const auto dyn = zero_dynamics(schema);
    const auto batch = collect_model_rollouts(policy, dyn, single_state_cohort(schema), 8, 5, 1.0, 4);
    const Eigen::VectorXd before = policy.policy_net().net.flatten_params();
    reinforce_update(policy, batch, 0.1);
    CHECK((policy.policy_net().net.flatten_params() - before).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("reinforce gradient matches finite differences of the surrogate") {
    const auto schema = two_feature_schema();
    auto policy = random_network_policy(schema, 34);
    const auto dyn = bandit_dynamics(schema, 5);
    const auto batch = collect_model_rollouts(policy, dyn, single_state_cohort(schema), 6, 4, 0.9, 5);

    const Eigen::VectorXd returns = batch.rollout_returns();
    const double baseline = returns.mean();
    auto surrogate = [&](const Eigen::VectorXd& params) {
        PolicyNet probe = policy.policy_net();
        probe.net.unflatten_params(params);
        const Eigen::MatrixXd proba = bc_predict_proba_batch(probe, batch.histories);
        double j = 0.0;
        for (int i = 0; i < batch.n_rollouts; ++i) {
            double lp = 0.0;
            for (int t = 0; t < batch.horizon; ++t) {
                const Eigen::Index row = static_cast<Eigen::Index>(i) * batch.horizon + t;
                lp += std::log(proba(row, batch.actions[static_cast<std::size_t>(row)]));
            }
            j += (returns(i) - baseline) * lp;
        }
        return j / static_cast<double>(batch.n_rollouts);
    };

    const Eigen::VectorXd before = policy.policy_net().net.flatten_params();
    NetworkPolicy updated = policy;
    reinforce_update(updated, batch, 1.0); // step = exact ascent gradient
    const Eigen::VectorXd analytic = updated.policy_net().net.flatten_params() - before;
    const Eigen::VectorXd numeric = sepsisrl::testing::fd_gradient(before, surrogate);
    CHECK(sepsisrl::testing::grad_rel_error(analytic, numeric) <= 1e-4);
}

TEST_CASE("two-armed bandit: reinforce grows the rewarding action") {
    const auto schema = two_feature_schema();
    auto policy = random_network_policy(schema, 35);
    // uniform initial policy so every arm gets sampled
    policy.policy_net().net.dense.back().weight.setZero();
    policy.policy_net().net.dense.back().bias.setZero();
    const int good = 7;
    const auto dyn = bandit_dynamics(schema, good);
    const auto cohort = single_state_cohort(schema);

    const auto ctx = decision_context_at(cohort[0], 0, schema);
    const double before = policy.action_proba(ctx)(good);
    for (int it = 0; it < 100; ++it) {
        const auto batch = collect_model_rollouts(policy, dyn, cohort, 64, 1, 1.0,
                                                  1000 + static_cast<std::uint64_t>(it));
        reinforce_update(policy, batch, 0.5);
    }
    const double after = policy.action_proba(ctx)(good);
    CHECK(after > before);
    CHECK(after > 0.9);
}

TEST_CASE("ppo clip rule hand cases") {
    // rho = 2 with positive advantage clips the objective to 1.2 * A
    const double eps = 0.2;
    auto term = [&](double rho, double adv) {
        return std::min(rho * adv, std::clamp(rho, 1 - eps, 1 + eps) * adv);
    };
    CHECK(term(2.0, 1.5) == doctest::Approx(1.2 * 1.5));
    // rho = 0.5 with negative advantage: the minimum picks the clipped branch
    CHECK(term(0.5, -2.0) == doctest::Approx(0.8 * -2.0));
    // rho = 1 is never clipped
    CHECK(term(1.0, 3.0) == doctest::Approx(3.0));
    CHECK(term(1.0, -3.0) == doctest::Approx(-3.0));
}

TEST_CASE("ppo surrogate with huge epsilon equals the unclipped objective") {
    const auto schema = two_feature_schema();
    auto policy = random_network_policy(schema, 36);
    const auto dyn = bandit_dynamics(schema, 9);
    auto batch = collect_model_rollouts(policy, dyn, single_state_cohort(schema), 8, 4, 1.0, 6);
    // make ratios differ from 1 by pretending an older policy collected the batch
    batch.logp_old.array() -= 0.3;

    PpoConfig cfg;
    cfg.clip_epsilon = 0.999999;
    cfg.epochs_per_update = 1;
    cfg.learning_rate = 0.0;
    auto adam = nn::AdamState::init(policy.policy_net().net.param_count(), 0.0);
    NetworkPolicy copy = policy;
    const double clipped_obj = ppo_update(copy, batch, cfg, adam);

    // unclipped objective computed directly
    const Eigen::VectorXd g = batch.returns_to_go();
    Eigen::VectorXd adv(g.size());
    for (int t = 0; t < batch.horizon; ++t) {
        double mean_t = 0.0;
        for (int i = 0; i < batch.n_rollouts; ++i) mean_t += g(i * batch.horizon + t);
        mean_t /= batch.n_rollouts;
        for (int i = 0; i < batch.n_rollouts; ++i)
            adv(i * batch.horizon + t) = g(i * batch.horizon + t) - mean_t;
    }
    const Eigen::MatrixXd proba = bc_predict_proba_batch(policy.policy_net(), batch.histories);
    double unclipped = 0.0;
    for (Eigen::Index row = 0; row < batch.rows(); ++row) {
        const double rho = std::exp(std::log(proba(row, batch.actions[static_cast<std::size_t>(row)])) -
                                    batch.logp_old(row));
        unclipped += rho * adv(row);
    }
    unclipped /= static_cast<double>(batch.rows());
    CHECK(clipped_obj == doctest::Approx(unclipped).epsilon(1e-10));
}

TEST_CASE("ppo first epoch has unit ratios and mean-advantage objective") {
    const auto schema = two_feature_schema();
    auto policy = random_network_policy(schema, 37);
    const auto dyn = bandit_dynamics(schema, 2);
    const auto batch = collect_model_rollouts(policy, dyn, single_state_cohort(schema), 8, 4, 1.0, 7);

    PpoConfig cfg;
    cfg.epochs_per_update = 1;
    cfg.learning_rate = 0.0;
    auto adam = nn::AdamState::init(policy.policy_net().net.param_count(), 0.0);
    const double obj = ppo_update(policy, batch, cfg, adam);
    // at rho = 1 the objective is the mean advantage, which is 0 under the
    // per-timestep mean baseline
    CHECK(obj == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("scaling advantages does not flip ppo gradient signs at unit ratio") {
    const auto schema = two_feature_schema();
    auto policy = random_network_policy(schema, 38);
    const auto dyn = bandit_dynamics(schema, 4);
    const auto batch = collect_model_rollouts(policy, dyn, single_state_cohort(schema), 8, 4, 1.0, 8);

    PpoConfig cfg;
    cfg.epochs_per_update = 1;

    auto grad_with_scaled_rewards = [&](double scale) {
        RolloutBatch scaled = batch;
        scaled.rewards *= scale; // scales all returns-to-go and advantages
        NetworkPolicy copy = policy;
        auto adam = nn::AdamState::init(copy.policy_net().net.param_count(), 1e-3);
        ppo_update(copy, scaled, cfg, adam);
        // recover the Adam step direction sign from the parameter movement
        return (copy.policy_net().net.flatten_params() -
                policy.policy_net().net.flatten_params())
            .eval();
    };
    const Eigen::VectorXd step1 = grad_with_scaled_rewards(1.0);
    const Eigen::VectorXd step3 = grad_with_scaled_rewards(3.0);
    int flips = 0;
    for (Eigen::Index i = 0; i < step1.size(); ++i)
        if (std::abs(step1(i)) > 1e-12 && std::abs(step3(i)) > 1e-12 &&
            std::signbit(step1(i)) != std::signbit(step3(i)))
            ++flips;
    CHECK(flips == 0);
}

TEST_CASE("train_policy with zero iterations returns the BC initialization") {
    const auto schema = two_feature_schema();
    Rng rng(40);
    auto bc = PolicyNet::init(schema.history_dim(), rng);
    const auto st = identity_standardizer(schema.d_raw());
    const auto dyn = zero_dynamics(schema);

    PpoConfig cfg;
    cfg.iterations = 0;
    const auto result = train_policy(bc, st, schema, dyn, single_state_cohort(schema),
                                     PolicyAlgorithm::Ppo, cfg);
    CHECK(result.policy.policy_net().net.flatten_params() == bc.net.flatten_params());
    CHECK(result.diagnostics.empty());
}

TEST_CASE("train_policy improves the simulated return with ppo on a bandit") {
    const auto schema = two_feature_schema();
    Rng rng(41);
    auto bc = PolicyNet::init(schema.history_dim(), rng);
    const auto st = identity_standardizer(schema.d_raw());
    const int good = 13;
    const auto dyn = bandit_dynamics(schema, good);

    PpoConfig cfg;
    cfg.iterations = 25;
    cfg.rollouts_per_iteration = 64;
    cfg.horizon = 4;
    cfg.learning_rate = 3e-3;
    cfg.seed = 5;
    const auto result = train_policy(bc, st, schema, dyn, single_state_cohort(schema),
                                     PolicyAlgorithm::Ppo, cfg);
    REQUIRE(result.diagnostics.size() == 25);
    CHECK(result.diagnostics.back().mean_return > result.diagnostics.front().mean_return);
    // KL diagnostics grow from zero as the policy departs from the clinician
    CHECK(result.diagnostics.front().kl_to_clinician >= 0.0);
    CHECK(result.diagnostics.back().kl_to_clinician > 0.0);

    // determinism
    const auto result2 = train_policy(bc, st, schema, dyn, single_state_cohort(schema),
                                      PolicyAlgorithm::Ppo, cfg);
    for (std::size_t i = 0; i < result.diagnostics.size(); ++i) {
        CHECK(result.diagnostics[i].mean_return == result2.diagnostics[i].mean_return);
        CHECK(result.diagnostics[i].kl_to_clinician == result2.diagnostics[i].kl_to_clinician);
    }
}
