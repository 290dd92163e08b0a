#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "sepsisrl/data_core.hpp"
#include "sepsisrl/reward.hpp"

using namespace sepsisrl;

namespace {

Trajectory make_trajectory(const std::string& id, int length, int d_raw = 3) {
    Trajectory traj;
    traj.patient_id = id;
    traj.survived = true;
    for (int t = 0; t < length; ++t) {
        Step s;
        s.obs = Observation::Constant(d_raw, static_cast<double>(t));
        s.obs(0) = static_cast<double>(t % 10);      // sofa-ish entry stays in range
        s.obs(1) = 1.0 + 0.1 * t;                    // lactate
        s.action = Action::from_flat((t * 7) % 25);
        s.iv_dose = 1.0 + t;
        s.vp_dose = 0.5 + 0.25 * t;
        s.reward = 0.1 * t;
        s.is_terminal = (t == length - 1);
        traj.steps.push_back(s);
    }
    return traj;
}

FeatureSchema tiny_schema() {
    FeatureSchema s;
    s.names = {"sofa", "lactate", "aux"};
    s.sofa_index = 0;
    s.lactate_index = 1;
    return s;
}

} // namespace

TEST_CASE("fit_action_bins nearest-rank quartiles") {
    std::vector<std::pair<double, double>> doses;
    for (int i = 1; i <= 8; ++i) doses.push_back({static_cast<double>(i), static_cast<double>(i)});
    const auto bins = fit_action_bins(doses);
    CHECK(bins.iv_quartiles[0] == doctest::Approx(2.0));
    CHECK(bins.iv_quartiles[1] == doctest::Approx(4.0));
    CHECK(bins.iv_quartiles[2] == doctest::Approx(6.0));

    std::vector<std::pair<double, double>> identical(6, {5.0, 5.0});
    const auto deg = fit_action_bins(identical);
    CHECK(deg.vp_quartiles == std::array<double, 3>{5.0, 5.0, 5.0});

    std::vector<std::pair<double, double>> few = {{1, 1}, {2, 2}, {3, 3}};
    CHECK_THROWS_AS(fit_action_bins(few), InsufficientDataError);

    std::vector<std::pair<double, double>> zeros_one_side = {{1, 0}, {2, 0}, {3, 0}, {4, 0}};
    CHECK_THROWS_AS(fit_action_bins(zeros_one_side), InsufficientDataError);
}

TEST_CASE("bin_dose rule and properties") {
    const std::array<double, 3> q{2.0, 4.0, 6.0};
    CHECK(bin_dose(0.0, q) == 0);
    CHECK(bin_dose(3.0, q) == 2);
    CHECK(bin_dose(7.0, q) == 4);
    CHECK(bin_dose(2.0, q) == 1);  // boundary inclusive
    CHECK(bin_dose(6.0, q) == 3);
    CHECK_THROWS_AS(bin_dose(-1.0, q), DomainError);
    CHECK_THROWS_AS(bin_dose(std::nan(""), q), DomainError);

    // bin 0 iff zero dose; monotone nondecreasing
    int prev = 0;
    for (double d = 0.0; d <= 10.0; d += 0.125) {
        const int b = bin_dose(d, q);
        CHECK((b == 0) == (d == 0.0));
        CHECK(b >= prev);
        prev = b;
    }
}

TEST_CASE("flat action index is a bijection onto 0..24") {
    std::array<bool, 25> seen{};
    for (int iv = 0; iv < 5; ++iv) {
        for (int vp = 0; vp < 5; ++vp) {
            const Action a{iv, vp};
            REQUIRE(a.flat_index() >= 0);
            REQUIRE(a.flat_index() < 25);
            CHECK(!seen[static_cast<std::size_t>(a.flat_index())]);
            seen[static_cast<std::size_t>(a.flat_index())] = true;
            CHECK(Action::from_flat(a.flat_index()) == a);
        }
    }
    CHECK_THROWS_AS(Action::from_flat(25), DomainError);
}

TEST_CASE("build_state padding and ordering") {
    const auto traj = make_trajectory("p0", 5);
    const int d = 3;

    const auto s0 = build_state(traj, 0);
    REQUIRE(s0.size() == 4 * d);
    for (int lag = 0; lag < 4; ++lag)
        CHECK(s0.segment(lag * d, d) == traj.steps[0].obs);

    const auto s3 = build_state(traj, 3);
    for (int lag = 0; lag < 4; ++lag)
        CHECK(s3.segment(lag * d, d) == traj.steps[static_cast<std::size_t>(3 - lag)].obs);

    const auto s1 = build_state(traj, 1);
    CHECK(s1.segment(0, d) == traj.steps[1].obs);
    for (int lag = 1; lag < 4; ++lag)
        CHECK(s1.segment(lag * d, d) == traj.steps[0].obs);

    CHECK_THROWS_AS(build_state(traj, 5), IndexError);
    CHECK_THROWS_AS(build_state(traj, -1), IndexError);
}

TEST_CASE("build_state shift property") {
    const auto traj = make_trajectory("p0", 8);
    const int d = 3;
    for (int t = 3; t + 1 < traj.length(); ++t) {
        const auto a = build_state(traj, t);
        const auto b = build_state(traj, t + 1);
        CHECK(b.segment(d, 3 * d) == a.segment(0, 3 * d));
    }
}

TEST_CASE("build_history blocks and padding") {
    auto traj = make_trajectory("p0", 4);
    traj.steps[0].action = Action::from_flat(7);
    const int d = 3;
    const int block = d + kNumActions;

    const auto h0 = build_history(traj, 0);
    REQUIRE(h0.size() == 4 * block);
    CHECK(h0.segment(0, d) == traj.steps[0].obs);
    CHECK(h0(d + 7) == 1.0);
    CHECK(h0.segment(d, kNumActions).sum() == doctest::Approx(1.0));
    for (int lag = 1; lag < 4; ++lag) {
        CHECK(h0.segment(lag * block, d) == traj.steps[0].obs);
        CHECK(h0.segment(lag * block + d, kNumActions).sum() == doctest::Approx(0.0));
    }

    const auto h3 = build_history(traj, 3);
    for (int lag = 0; lag < 4; ++lag) {
        const auto& step = traj.steps[static_cast<std::size_t>(3 - lag)];
        CHECK(h3.segment(lag * block, d) == step.obs);
        CHECK(h3(lag * block + d + step.action.flat_index()) == 1.0);
        CHECK(h3.segment(lag * block + d, kNumActions).sum() == doctest::Approx(1.0));
    }

    CHECK_THROWS_AS(build_history(traj, 5), IndexError);
}

TEST_CASE("build_decision_history zeroes the current action slot") {
    auto traj = make_trajectory("p0", 4);
    const int d = 3;
    const int block = d + kNumActions;
    const auto h = build_decision_history(traj, 3);
    const auto full = build_history(traj, 3);
    CHECK(h.segment(d, kNumActions).sum() == 0.0);
    CHECK(h.segment(0, d) == full.segment(0, d));
    CHECK(h.segment(block, 3 * block) == full.segment(block, 3 * block));
}

TEST_CASE("standardizer") {
    std::vector<Observation> same(5, Observation::Constant(3, 2.5));
    const auto st_deg = fit_standardizer(same);
    CHECK(st_deg.apply(same[0]).isZero(1e-15));
    CHECK(st_deg.std == Eigen::VectorXd::Ones(3));

    std::vector<Observation> pair = {Observation::Constant(1, 0.0), Observation::Constant(1, 2.0)};
    const auto st = fit_standardizer(pair);
    CHECK(st.mean(0) == doctest::Approx(1.0));
    CHECK(st.std(0) == doctest::Approx(1.0)); // population std
    CHECK(st.apply(pair[0])(0) == doctest::Approx(-1.0));
    CHECK(st.apply(pair[1])(0) == doctest::Approx(1.0));

    CHECK_THROWS_AS(fit_standardizer({}), InsufficientDataError);

    // round trip
    std::vector<Observation> obs;
    for (int i = 0; i < 20; ++i) {
        Observation o(4);
        o << 0.1 * i, -3.0 + i, i * i * 0.01, 42.0;
        obs.push_back(o);
    }
    const auto st2 = fit_standardizer(obs);
    for (const auto& o : obs) {
        const auto back = st2.invert(st2.apply(o));
        CHECK((back - o).cwiseAbs().maxCoeff() <= 1e-12);
    }

    // block-wise application to a concatenated state
    const auto st3 = fit_standardizer(obs);
    Eigen::VectorXd state(8);
    state << obs[0], obs[1];
    const auto applied = st3.apply_state(state);
    CHECK(applied.segment(0, 4) == st3.apply(obs[0]));
    CHECK(applied.segment(4, 4) == st3.apply(obs[1]));
}

TEST_CASE("split_cohort sizes, determinism, validation") {
    Cohort cohort;
    for (int i = 0; i < 10; ++i) cohort.push_back(make_trajectory("p" + std::to_string(i), 3));

    const auto split = split_cohort(cohort, {0.8, 0.1, 0.1}, 42);
    CHECK(split.train.size() == 8);
    CHECK(split.val.size() == 1);
    CHECK(split.test.size() == 1);

    const auto split2 = split_cohort(cohort, {0.8, 0.1, 0.1}, 42);
    for (std::size_t i = 0; i < split.train.size(); ++i)
        CHECK(split.train[i].patient_id == split2.train[i].patient_id);
    CHECK(split.val[0].patient_id == split2.val[0].patient_id);
    CHECK(split.test[0].patient_id == split2.test[0].patient_id);

    // disjoint patient-level partition
    std::set<std::string> ids;
    for (const auto* part : {&split.train, &split.val, &split.test})
        for (const auto& traj : *part) CHECK(ids.insert(traj.patient_id).second);
    CHECK(ids.size() == cohort.size());

    CHECK_THROWS_AS(split_cohort(cohort, {0.5, 0.5, 0.5}, 1), ConfigError);
    CHECK_THROWS_AS(split_cohort(cohort, {1.0, -0.5, 0.5}, 1), ConfigError);
}

TEST_CASE("cohort CSV round trip") {
    const auto schema = tiny_schema();
    Cohort cohort = {make_trajectory("a", 4), make_trajectory("b", 3)};
    cohort[1].survived = false;

    const std::string path = "test_cohort_roundtrip.csv";
    write_cohort_csv(cohort, schema, path);

    SUBCASE("with explicit bins") {
        ActionBins bins{{1.5, 3.0, 4.5}, {0.6, 0.9, 1.2}};
        const auto back = read_cohort_csv(path, schema, bins);
        REQUIRE(back.size() == cohort.size());
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            REQUIRE(back[i].length() == cohort[i].length());
            CHECK(back[i].patient_id == cohort[i].patient_id);
            CHECK(back[i].survived == cohort[i].survived);
            for (int t = 0; t < cohort[i].length(); ++t) {
                const auto& orig = cohort[i].steps[static_cast<std::size_t>(t)];
                const auto& got = back[i].steps[static_cast<std::size_t>(t)];
                CHECK(got.obs == orig.obs);
                CHECK(got.iv_dose == orig.iv_dose);
                CHECK(got.vp_dose == orig.vp_dose);
                CHECK(got.reward == orig.reward);
                CHECK(got.is_terminal == orig.is_terminal);
            }
        }
    }

    SUBCASE("bins refit from file reproduce quartile binning") {
        const auto back = read_cohort_csv(path, schema);
        std::vector<std::pair<double, double>> doses;
        for (const auto& traj : cohort)
            for (const auto& s : traj.steps) doses.push_back({s.iv_dose, s.vp_dose});
        const auto bins = fit_action_bins(doses);
        for (std::size_t i = 0; i < back.size(); ++i)
            for (int t = 0; t < back[i].length(); ++t) {
                const auto& orig = cohort[i].steps[static_cast<std::size_t>(t)];
                const auto& got = back[i].steps[static_cast<std::size_t>(t)];
                CHECK(got.action.iv_bin == bin_dose(orig.iv_dose, bins.iv_quartiles));
                CHECK(got.action.vp_bin == bin_dose(orig.vp_dose, bins.vp_quartiles));
            }
    }

    std::remove(path.c_str());
}

TEST_CASE("cohort CSV validation errors") {
    const auto schema = tiny_schema();
    const std::string path = "test_cohort_bad.csv";

    SUBCASE("SOFA out of range names the row") {
        std::ofstream out(path);
        out << "patient_id,t,sofa,lactate,aux,iv_dose,vp_dose,reward,terminal,survived\n";
        out << "a,0,30,1.0,0,1,1,0,1,1\n";
        out.close();
        CHECK_THROWS_WITH_AS(read_cohort_csv(path, schema, ActionBins{{1, 2, 3}, {1, 2, 3}}),
                             doctest::Contains("row 2"), DataError);
    }
    SUBCASE("non-finite value rejected") {
        std::ofstream out(path);
        out << "patient_id,t,sofa,lactate,aux,iv_dose,vp_dose,reward,terminal,survived\n";
        out << "a,0,3,nan,0,1,1,0,1,1\n";
        out.close();
        CHECK_THROWS_AS(read_cohort_csv(path, schema, ActionBins{{1, 2, 3}, {1, 2, 3}}), DataError);
    }
    SUBCASE("unknown column rejected") {
        std::ofstream out(path);
        out << "patient_id,t,sofa,lactate,oops,iv_dose,vp_dose,reward,terminal,survived\n";
        out.close();
        CHECK_THROWS_AS(read_cohort_csv(path, schema), DataError);
    }
    SUBCASE("missing terminal flag rejected") {
        std::ofstream out(path);
        out << "patient_id,t,sofa,lactate,aux,iv_dose,vp_dose,reward,terminal,survived\n";
        out << "a,0,3,1.0,0,1,1,0,0,1\n";
        out.close();
        CHECK_THROWS_AS(read_cohort_csv(path, schema, ActionBins{{1, 2, 3}, {1, 2, 3}}), DataError);
    }
    SUBCASE("empty file gives empty cohort") {
        std::ofstream out(path);
        out.close();
        CHECK(read_cohort_csv(path, schema).empty());
    }

    std::remove(path.c_str());
}

TEST_CASE("schema JSON round trip and validation") {
    const auto schema = FeatureSchema::default_synthetic();
    const std::string path = "test_schema.json";
    write_schema_json(schema, path);
    const auto back = read_schema_json(path);
    CHECK(back.names == schema.names);
    CHECK(back.sofa_index == schema.sofa_index);
    CHECK(back.lactate_index == schema.lactate_index);
    std::remove(path.c_str());

    FeatureSchema bad;
    bad.names = {"a", "a"};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    FeatureSchema same_idx;
    same_idx.names = {"a", "b"};
    same_idx.sofa_index = 0;
    same_idx.lactate_index = 0;
    CHECK_THROWS_AS(same_idx.validate(), ConfigError);
}
