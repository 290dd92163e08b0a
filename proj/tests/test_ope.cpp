#include <doctest.h>

#include <cmath>

#include "sepsisrl/cohort_synth.hpp"
#include "sepsisrl/ope.hpp"
#include "support/tabular_mdp.hpp"

using namespace sepsisrl;
using namespace sepsisrl::testing;

namespace {

Eigen::MatrixXd random_matrix(int rows, int cols, Rng& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
    return m;
}

} // namespace

TEST_CASE("knn counting probabilities by hand") {
    // three reference points; query sits on top of the first
    Eigen::MatrixXd states(3, 2);
    states << 0, 0, 0.1, 0, 5, 5;
    const std::vector<int> actions = {4, 4, 9};
    const auto model = knn_fit(states, actions, 3, 0.0);
    const auto p = knn_proba(model, Eigen::Vector2d(0, 0));
    CHECK(p(4) == doctest::Approx(2.0 / 3));
    CHECK(p(9) == doctest::Approx(1.0 / 3));
    CHECK(p.sum() == doctest::Approx(1.0));
}

TEST_CASE("knn smoothing floor and normalization") {
    Rng rng(1);
    const auto states = random_matrix(400, 4, rng);
    std::vector<int> actions;
    for (int i = 0; i < 400; ++i) actions.push_back(rng.uniform_int(0, 24));
    const auto model = knn_fit(states, actions, 250, 0.5);

    for (int q = 0; q < 20; ++q) {
        const auto p = knn_proba(model, random_matrix(1, 4, rng).row(0).transpose());
        CHECK(std::abs(p.sum() - 1.0) <= 1e-12);
        CHECK(p.minCoeff() >= 0.5 / (250 + 25 * 0.5) - 1e-15);
    }

    // batch equals the one-by-one path
    const auto queries = random_matrix(37, 4, rng);
    const auto batch = knn_proba_batch(model, queries);
    for (int i = 0; i < queries.rows(); ++i)
        CHECK((batch.row(i).transpose() - knn_proba(model, queries.row(i).transpose()))
                  .cwiseAbs()
                  .maxCoeff() <= 1e-15);

    CHECK_THROWS_AS(knn_fit(states, actions, 401, 0.5), InsufficientDataError);
}

TEST_CASE("knn self-inclusion at a reference point") {
    Eigen::MatrixXd states(5, 2);
    states << 0, 0, 10, 10, 20, 20, 30, 30, 40, 40;
    const std::vector<int> actions = {1, 2, 3, 4, 5};
    const auto model = knn_fit(states, actions, 1, 0.0);
    // querying each reference point returns exactly its own action
    for (int i = 0; i < 5; ++i) {
        const auto p = knn_proba(model, states.row(i).transpose());
        CHECK(p(actions[static_cast<std::size_t>(i)]) == doctest::Approx(1.0));
    }
}

TEST_CASE("forest fits a simple signal and is order invariant") {
    Rng rng(2);
    const auto X = random_matrix(600, 5, rng);
    Eigen::VectorXd y(600);
    for (int i = 0; i < 600; ++i) y(i) = X(i, 0) > 0 ? 2.0 : -1.0;

    ForestConfig cfg;
    cfg.n_trees = 20;
    cfg.max_depth = 6;
    cfg.min_samples_leaf = 5;
    cfg.seed = 3;
    const auto forest = RegressionForest::fit(X, y, cfg);
    const auto pred = forest.predict(X);
    CHECK((pred - y).cwiseAbs().mean() <= 0.1);

    // permuting the training samples does not change predictions (same seed)
    std::vector<int> perm(600);
    std::iota(perm.begin(), perm.end(), 0);
    Rng prng(4);
    prng.shuffle(perm);
    Eigen::MatrixXd Xp(600, 5);
    Eigen::VectorXd yp(600);
    for (int i = 0; i < 600; ++i) {
        Xp.row(i) = X.row(perm[static_cast<std::size_t>(i)]);
        yp(i) = y(perm[static_cast<std::size_t>(i)]);
    }
    const auto forest_p = RegressionForest::fit(Xp, yp, cfg);
    const auto queries = random_matrix(50, 5, rng);
    CHECK((forest.predict(queries) - forest_p.predict(queries)).cwiseAbs().maxCoeff() <= 1e-15);

    // determinism across identical fits
    const auto forest_again = RegressionForest::fit(X, y, cfg);
    CHECK((forest.predict(queries) - forest_again.predict(queries)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forest respects min_samples_leaf") {
    Rng rng(5);
    const auto X = random_matrix(40, 2, rng);
    Eigen::VectorXd y = random_matrix(40, 1, rng).col(0);
    ForestConfig cfg;
    cfg.n_trees = 5;
    cfg.min_samples_leaf = 25; // only the root can satisfy this
    cfg.bootstrap = false;
    const auto forest = RegressionForest::fit(X, y, cfg);
    const auto pred = forest.predict(X);
    for (int i = 1; i < 40; ++i) CHECK(pred(i) == doctest::Approx(pred(0))); // single leaf
}

TEST_CASE("fqi with zero discount regresses immediate rewards") {
    const auto mdp = TabularMdp::deterministic_chain();
    TabularPolicy policy(mdp, {{{0, 0}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}});
    const auto cohort = simulate_tabular(mdp, policy, 60, 7);

    const auto st = fit_standardizer(collect_observations(cohort));
    ForestConfig cfg;
    cfg.n_trees = 10;
    cfg.max_depth = 10;
    cfg.min_samples_leaf = 2;
    cfg.features_per_split = mdp.schema.state_dim() + kNumActions;
    cfg.seed = 1;
    const auto q = fqi_fit(cohort, mdp.schema, st, policy, 0.0, 3, cfg);

    // deterministic rewards per state: lookups must be near-exact
    for (const auto& traj : cohort) {
        for (int t = 0; t < traj.length(); ++t) {
            const auto state = build_state(traj, t);
            const double qv = q.q_value(state, traj.steps[static_cast<std::size_t>(t)].action.flat_index());
            CHECK(qv == doctest::Approx(traj.steps[static_cast<std::size_t>(t)].reward).epsilon(1e-6));
        }
    }
}

TEST_CASE("fqi recovers deterministic-chain DP values") {
    const auto mdp = TabularMdp::deterministic_chain();
    TabularPolicy policy(mdp, {{{0, 0}, {1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}}});
    const auto cohort = simulate_tabular(mdp, policy, 80, 9);

    const auto dp = tabular_dp(mdp, policy, 1.0);
    CHECK(dp.v[1] == doctest::Approx(1.0)); // rewards 0,0,1 with gamma 1
    CHECK(dp.v[2] == doctest::Approx(1.0));
    CHECK(dp.v[3] == doctest::Approx(1.0));

    const auto st = fit_standardizer(collect_observations(cohort));
    ForestConfig cfg;
    cfg.n_trees = 20;
    cfg.max_depth = 10;
    cfg.min_samples_leaf = 2;
    cfg.features_per_split = mdp.schema.state_dim() + kNumActions; // few informative columns
    cfg.seed = 2;
    const auto q = fqi_fit(cohort, mdp.schema, st, policy, 1.0, -1, cfg);

    for (const auto& traj : cohort) {
        for (int t = 0; t < traj.length(); ++t) {
            const int s = mdp.state_of(traj.steps[static_cast<std::size_t>(t)].obs);
            const double expected = dp.q[static_cast<std::size_t>(s)][0];
            const double got =
                q.q_value(build_state(traj, t), traj.steps[static_cast<std::size_t>(t)].action.flat_index());
            CHECK(std::abs(got - expected) <= 0.05);
        }
    }
}

TEST_CASE("fqi with zero iterations is the zero predictor") {
    const auto mdp = TabularMdp::deterministic_chain();
    TabularPolicy policy(mdp, {{{0, 0}, {1, 0}, {1, 0}, {1, 0}}});
    const auto cohort = simulate_tabular(mdp, policy, 10, 3);
    const auto st = fit_standardizer(collect_observations(cohort));
    ForestConfig cfg;
    cfg.n_trees = 2;
    const auto q = fqi_fit(cohort, mdp.schema, st, policy, 0.99, 0, cfg);
    CHECK(q.q_value(build_state(cohort[0], 0), 7) == 0.0);
    CHECK(q.q_values(build_state(cohort[0], 0)).cwiseAbs().maxCoeff() == 0.0);
}

namespace {

Trajectory one_step_traj(const TabularMdp& mdp, int state, int local_action, double reward) {
    Trajectory traj;
    traj.patient_id = "x";
    Step s;
    s.obs = mdp.emit(state);
    s.action = Action::from_flat(mdp.flat_actions[static_cast<std::size_t>(local_action)]);
    s.reward = reward;
    s.is_terminal = true;
    traj.steps.push_back(s);
    return traj;
}

} // namespace

TEST_CASE("is_ratios products, clipping and hazards") {
    const auto mdp = TabularMdp::standard();
    // pe/pb = 2 at state 1 action 0; = 3 at state 2 action 1
    TabularPolicy pe(mdp, {{{0, 0}, {0.8, 0.2}, {0.1, 0.9}, {0.5, 0.5}}});
    TabularPolicy pb(mdp, {{{0, 0}, {0.4, 0.6}, {0.7, 0.3}, {0.5, 0.5}}});

    Trajectory traj;
    traj.patient_id = "r";
    for (int t = 0; t < 2; ++t) {
        Step s;
        s.obs = mdp.emit(t == 0 ? 1 : 2);
        s.action = Action::from_flat(mdp.flat_actions[t == 0 ? 0 : 1]);
        s.reward = 0.0;
        s.is_terminal = (t == 1);
        traj.steps.push_back(s);
    }
    const auto r = is_ratios(traj, pe, pb, mdp.schema, 100.0);
    REQUIRE(r.cumulative.size() == 2);
    CHECK(r.cumulative[0] == doctest::Approx(2.0));
    CHECK(r.cumulative[1] == doctest::Approx(6.0));
    CHECK(r.clipped_steps == 0);

    // identical policies give unit ratios
    const auto unit = is_ratios(traj, pb, pb, mdp.schema, 100.0);
    CHECK(unit.cumulative[0] == 1.0);
    CHECK(unit.cumulative[1] == 1.0);

    // a 1000x ratio clips to 100 and is counted
    TabularPolicy spiky_e(mdp, {{{0, 0}, {1.0, 0.0}, {0.5, 0.5}, {0.5, 0.5}}});
    TabularPolicy spiky_b(mdp, {{{0, 0}, {0.001, 0.999}, {0.5, 0.5}, {0.5, 0.5}}});
    const auto clipped = is_ratios(one_step_traj(mdp, 1, 0, 0.0), spiky_e, spiky_b, mdp.schema, 100.0);
    CHECK(clipped.cumulative[0] == doctest::Approx(100.0));
    CHECK(clipped.clipped_steps == 1);

    // zero behavior probability is a reported hazard
    TabularPolicy zero_b(mdp, {{{0, 0}, {0.0, 1.0}, {0.5, 0.5}, {0.5, 0.5}}});
    CHECK_THROWS_AS(is_ratios(one_step_traj(mdp, 1, 0, 0.0), pe, zero_b, mdp.schema, 100.0),
                    DomainError);
}

TEST_CASE("phwis equals the empirical mean under the behavior policy") {
    const auto mdp = TabularMdp::standard();
    TabularPolicy pb(mdp, {{{0, 0}, {0.6, 0.4}, {0.3, 0.7}, {0.5, 0.5}}});
    const auto cohort = simulate_tabular(mdp, pb, 500, 11);
    const double gamma = 0.98;
    const auto result = estimate_phwis(cohort, pb, pb, mdp.schema, gamma);
    CHECK(result.value == doctest::Approx(behavior_value(cohort, gamma)).epsilon(1e-9));
    CHECK(result.diagnostics.dropped_groups == 0);
    CHECK(result.diagnostics.clip_fraction == 0.0);
}

TEST_CASE("phwis hand-computed single group and two-group cases") {
    const auto mdp = TabularMdp::standard();
    // single group, horizon 1: ratios (1, 3), returns (0, 4)
    TabularPolicy pe(mdp, {{{0, 0}, {0.5, 0.5}, {0.6, 0.4}, {0.5, 0.5}}});
    TabularPolicy pb(mdp, {{{0, 0}, {0.5, 0.5}, {0.2, 0.8}, {0.5, 0.5}}});
    Cohort single = {one_step_traj(mdp, 1, 0, 0.0),   // ratio 0.5/0.5 = 1, return 0
                     one_step_traj(mdp, 2, 0, 4.0)};  // ratio 0.6/0.2 = 3, return 4
    const auto res = estimate_phwis(single, pe, pb, mdp.schema, 1.0);
    CHECK(res.value == doctest::Approx(3.0).epsilon(1e-12));

    // two groups under unit weights: 0.75 * 2 + 0.25 * 6
    Cohort mixed;
    for (int i = 0; i < 3; ++i) mixed.push_back(one_step_traj(mdp, 1, 0, 2.0));
    Trajectory long_traj;
    long_traj.patient_id = "l";
    for (int t = 0; t < 2; ++t) {
        Step s;
        s.obs = mdp.emit(1);
        s.action = Action::from_flat(mdp.flat_actions[0]);
        s.reward = 3.0;
        s.is_terminal = (t == 1);
        long_traj.steps.push_back(s);
    }
    mixed.push_back(long_traj);
    const auto res2 = estimate_phwis(mixed, pb, pb, mdp.schema, 1.0);
    CHECK(res2.value == doctest::Approx(0.75 * 2.0 + 0.25 * 6.0).epsilon(1e-12));
}

TEST_CASE("phwis is invariant to duplicating the cohort") {
    const auto mdp = TabularMdp::standard();
    TabularPolicy pe(mdp, {{{0, 0}, {0.7, 0.3}, {0.2, 0.8}, {0.5, 0.5}}});
    TabularPolicy pb(mdp, {{{0, 0}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}});
    const auto cohort = simulate_tabular(mdp, pb, 200, 13);
    Cohort doubled = cohort;
    doubled.insert(doubled.end(), cohort.begin(), cohort.end());
    const auto a = estimate_phwis(cohort, pe, pb, mdp.schema, 0.97);
    const auto b = estimate_phwis(doubled, pe, pb, mdp.schema, 0.97);
    CHECK(a.value == doctest::Approx(b.value).epsilon(1e-12));
}

TEST_CASE("phwdr with zero Q reduces to stepwise weighted importance sampling") {
    const auto mdp = TabularMdp::standard();
    TabularPolicy pe(mdp, {{{0, 0}, {0.7, 0.3}, {0.2, 0.8}, {0.5, 0.5}}});
    TabularPolicy pb(mdp, {{{0, 0}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}});
    const auto cohort = simulate_tabular(mdp, pb, 300, 17);
    const double gamma = 0.96;

    ForestQ zero_q;
    zero_q.gamma = gamma;
    zero_q.n_iterations = 0; // identically zero value model
    const auto dr = estimate_phwdr(cohort, pe, pb, mdp.schema, zero_q, gamma);

    // independent stepwise-WIS computation
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < cohort.size(); ++i) groups[cohort[i].length()].push_back(i);
    double expected = 0.0;
    for (const auto& [horizon, members] : groups) {
        std::vector<double> norm(static_cast<std::size_t>(horizon), 0.0);
        std::vector<std::vector<double>> cum(members.size());
        for (std::size_t m = 0; m < members.size(); ++m) {
            cum[m] = is_ratios(cohort[members[m]], pe, pb, mdp.schema, 100.0).cumulative;
            for (int t = 0; t < horizon; ++t) norm[static_cast<std::size_t>(t)] += cum[m][static_cast<std::size_t>(t)];
        }
        double wdr = 0.0;
        for (std::size_t m = 0; m < members.size(); ++m) {
            double discount = 1.0;
            for (int t = 0; t < horizon; ++t) {
                wdr += discount * cum[m][static_cast<std::size_t>(t)] / norm[static_cast<std::size_t>(t)] *
                       cohort[members[m]].steps[static_cast<std::size_t>(t)].reward;
                discount *= gamma;
            }
        }
        expected += static_cast<double>(members.size()) / cohort.size() * wdr;
    }
    CHECK(dr.value == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("phwdr single trajectory specializes to r - Q + V") {
    const auto mdp = TabularMdp::standard();
    TabularPolicy pe(mdp, {{{0, 0}, {0.7, 0.3}, {0.5, 0.5}, {0.5, 0.5}}});
    TabularPolicy pb(mdp, {{{0, 0}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}});
    Cohort cohort = {one_step_traj(mdp, 1, 0, 2.5)};

    // exact-lookup Q over the single probe state with both action values
    const auto state = build_state(cohort[0], 0);
    Eigen::MatrixXd states(2, state.size());
    states.row(0) = state;
    states.row(1) = state;
    const std::vector<int> actions = {mdp.flat_actions[0], mdp.flat_actions[1]};
    Eigen::VectorXd targets(2);
    targets << 1.25, -0.75;
    const auto q = exact_forest_q(states, actions, targets, 1.0);

    const auto dr = estimate_phwdr(cohort, pe, pb, mdp.schema, q, 1.0);
    // w = 1; estimate = r - Q(s, a0) + sum_a pi_e(a) Q(s, a)
    const double v = 0.7 * 1.25 + 0.3 * -0.75;
    CHECK(dr.value == doctest::Approx(2.5 - 1.25 + v).epsilon(1e-10));
}

TEST_CASE("am estimator basics and DP exactness") {
    const auto mdp = TabularMdp::standard();
    TabularPolicy pe(mdp, {{{0, 0}, {0.7, 0.3}, {0.2, 0.8}, {0.5, 0.5}}});
    Cohort starts = {one_step_traj(mdp, 1, 0, 0.0), one_step_traj(mdp, 2, 1, 0.0)};

    // constant Q gives back the constant for any policy
    {
        Eigen::MatrixXd states(2, mdp.schema.state_dim());
        states.row(0) = build_state(starts[0], 0);
        states.row(1) = build_state(starts[1], 0);
        Eigen::VectorXd targets = Eigen::VectorXd::Constant(2, 3.25);
        const std::vector<int> actions = {mdp.flat_actions[0], mdp.flat_actions[1]};
        const auto qc = exact_forest_q(states, actions, targets, 1.0);
        CHECK(estimate_am(starts, pe, mdp.schema, qc) == doctest::Approx(3.25).epsilon(1e-10));
    }

    // DP-exact Q on the stochastic MDP gives the true start value
    {
        const double gamma = 0.95;
        const auto dp = tabular_dp(mdp, pe, gamma);
        // enumerate initial states with both actions and their exact Q values
        Eigen::MatrixXd states(4, mdp.schema.state_dim());
        std::vector<int> actions;
        Eigen::VectorXd targets(4);
        int row = 0;
        for (int s : {1, 2}) {
            Trajectory probe = one_step_traj(mdp, s, 0, 0.0);
            for (int a = 0; a < 2; ++a) {
                states.row(row) = build_state(probe, 0);
                actions.push_back(mdp.flat_actions[static_cast<std::size_t>(a)]);
                targets(row) = dp.q[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
                ++row;
            }
        }
        const auto q = exact_forest_q(states, actions, targets, gamma);
        Cohort initial = {one_step_traj(mdp, 1, 0, 0.0), one_step_traj(mdp, 2, 0, 0.0)};
        const double am = estimate_am(initial, pe, mdp.schema, q);
        const double expected = 0.5 * dp.v[1] + 0.5 * dp.v[2];
        CHECK(am == doctest::Approx(expected).epsilon(1e-6));
    }
}

TEST_CASE("am is additive in the value model") {
    const auto mdp = TabularMdp::standard();
    TabularPolicy pe(mdp, {{{0, 0}, {0.6, 0.4}, {0.5, 0.5}, {0.5, 0.5}}});
    Cohort starts = {one_step_traj(mdp, 1, 0, 0.0), one_step_traj(mdp, 2, 1, 0.0)};

    Eigen::MatrixXd states(4, mdp.schema.state_dim());
    std::vector<int> actions;
    int row = 0;
    for (int s : {1, 2}) {
        Trajectory probe = one_step_traj(mdp, s, 0, 0.0);
        for (int a = 0; a < 2; ++a) {
            states.row(row++) = build_state(probe, 0);
            actions.push_back(mdp.flat_actions[static_cast<std::size_t>(a)]);
        }
    }
    Rng rng(23);
    Eigen::VectorXd y1 = random_matrix(4, 1, rng).col(0);
    Eigen::VectorXd y2 = random_matrix(4, 1, rng).col(0);
    const auto q1 = exact_forest_q(states, actions, y1, 1.0);
    const auto q2 = exact_forest_q(states, actions, y2, 1.0);
    const auto q12 = exact_forest_q(states, actions, y1 + y2, 1.0);
    CHECK(estimate_am(starts, pe, mdp.schema, q12) ==
          doctest::Approx(estimate_am(starts, pe, mdp.schema, q1) +
                          estimate_am(starts, pe, mdp.schema, q2))
              .epsilon(1e-10));
}

TEST_CASE("phwis, phwdr and am approach the DP value on the stochastic MDP") {
    const auto mdp = TabularMdp::standard();
    TabularPolicy pb(mdp, {{{0, 0}, {0.6, 0.4}, {0.4, 0.6}, {0.5, 0.5}}});
    TabularPolicy pe(mdp, {{{0, 0}, {0.75, 0.25}, {0.25, 0.75}, {0.5, 0.5}}});
    const double gamma = 0.97;
    const auto cohort = simulate_tabular(mdp, pb, 5000, 29);
    const auto dp = tabular_dp(mdp, pe, gamma);

    const auto phwis = estimate_phwis(cohort, pe, pb, mdp.schema, gamma);
    CHECK(std::abs(phwis.value - dp.start_value) <= 0.05 * std::abs(dp.start_value));

    const auto st = fit_standardizer(collect_observations(cohort));
    ForestConfig fcfg;
    fcfg.n_trees = 30;
    fcfg.max_depth = 6;
    fcfg.min_samples_leaf = 50;
    fcfg.features_per_split = 16;
    fcfg.seed = 31;
    const auto q = fqi_fit(cohort, mdp.schema, st, pe, gamma, 8, fcfg);
    const auto phwdr = estimate_phwdr(cohort, pe, pb, mdp.schema, q, gamma);
    CHECK(std::abs(phwdr.value - dp.start_value) <= 0.05 * std::abs(dp.start_value));

    const double am = estimate_am(cohort, pe, mdp.schema, q);
    CHECK(std::abs(am - dp.start_value) <= 0.05 * std::abs(dp.start_value));
}

TEST_CASE("evaluate_policy with exact behavior matches the empirical mean") {
    SynthConfig scfg;
    scfg.n_patients = 250;
    scfg.seed = 5;
    const auto [cohort, truth] = generate_cohort(scfg);
    GroundTruthClinicianPolicy clinician(scfg);

    OpeConfig cfg;
    cfg.gamma = 0.99;
    cfg.forest.n_trees = 10;
    cfg.forest.max_depth = 6;
    cfg.fqi_iterations = 2;
    cfg.seed = 3;
    const auto report = evaluate_policy(cohort, clinician, truth.schema(), cfg, &clinician);
    CHECK(report.phwis == doctest::Approx(behavior_value(cohort, cfg.gamma)).epsilon(1e-6));
    CHECK(report.phwis_diagnostics.clip_fraction == 0.0);
    CHECK(report.ess > 0.0);
}
