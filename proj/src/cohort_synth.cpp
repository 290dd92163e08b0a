#include "sepsisrl/cohort_synth.hpp"

#include <cmath>
#include <cstdio>

namespace sepsisrl {

namespace {

constexpr std::uint64_t kPatientStream = 0xC501;
constexpr std::uint64_t kOracleStream = 0xC502;
constexpr int kMinDischargeSteps = 3;

// fixed per-bin dose ranges (lo, hi]; bin 0 is exactly zero dose
constexpr std::array<double, 5> kIvEdges = {0.0, 100.0, 250.0, 500.0, 1000.0};
constexpr std::array<double, 5> kVpEdges = {0.0, 0.1, 0.25, 0.5, 1.5};

// auxiliary feature j = aux_slope(j) * severity + aux_offset(j) + 0.3 * noise
double aux_slope(int j) { return (j % 2 == 0 ? 1.0 : -1.0) * (0.35 + 0.06 * j); }
double aux_offset(int j) { return 1.5 + 0.4 * j; }
constexpr double kAuxNoise = 0.3;
constexpr double kLactateNoiseFactor = 0.5;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double clinician_target(double sofa) { return sofa >= 15.0 ? 4.5 : 1.0; }
double clinician_temp_multiplier(double sofa) { return (sofa > 5.0 && sofa < 15.0) ? 1.6 : 1.0; }

double clinician_score(int iv, int vp, double target) {
    const double intensity = static_cast<double>(iv + vp);
    return -0.5 * (intensity - target) * (intensity - target) - 0.1 * std::abs(iv - vp) -
           0.01 * vp;
}

Eigen::VectorXd clinician_proba_impl(double sofa, const SynthConfig& config) {
    if (sofa < 0 || sofa > kSofaMax)
        throw DomainError("clinician_action_proba: SOFA outside [0, 24]");
    const double target = clinician_target(sofa);
    const double temp = config.clinician_temperature * clinician_temp_multiplier(sofa);
    Eigen::VectorXd scores(kNumActions);
    for (int iv = 0; iv < 5; ++iv)
        for (int vp = 0; vp < 5; ++vp)
            scores(Action{iv, vp}.flat_index()) = clinician_score(iv, vp, target) / temp;
    const double shift = scores.maxCoeff();
    const Eigen::VectorXd p = (scores.array() - shift).exp().matrix();
    return p / p.sum();
}

double draw_dose(int bin, const std::array<double, 5>& edges, Rng& rng) {
    if (bin == 0) return 0.0;
    const double lo = edges[static_cast<std::size_t>(bin - 1)];
    const double hi = edges[static_cast<std::size_t>(bin)];
    // sample in (lo, hi] so re-binning against the edges is exact
    const double u = 1.0 - rng.uniform();
    return lo + (hi - lo) * u;
}

} // namespace

Eigen::MatrixXd SynthConfig::default_treatment_effect() {
    Eigen::MatrixXd effect(5, 5);
    for (int iv = 0; iv < 5; ++iv) {
        for (int vp = 0; vp < 5; ++vp) {
            const double m = static_cast<double>(iv + vp);
            effect(iv, vp) = -0.35 * m + 0.05 * m * m + 0.06 * std::abs(iv - vp);
        }
    }
    return effect;
}

void SynthConfig::validate() const {
    if (n_patients < 1)
        throw ConfigError("SynthConfig: n_patients must be >= 1");
    if (max_horizon < 2)
        throw ConfigError("SynthConfig: max_horizon must be >= 2");
    if (!(noise_std > 0))
        throw ConfigError("SynthConfig: noise_std must be > 0");
    if (!(clinician_temperature > 0))
        throw ConfigError("SynthConfig: clinician_temperature must be > 0");
    if (treatment_effect.rows() != 5 || treatment_effect.cols() != 5)
        throw ConfigError("SynthConfig: treatment_effect must be 5x5");
    if (!treatment_effect.allFinite() || !std::isfinite(severity_drift) ||
        !std::isfinite(mortality_slope) || !std::isfinite(mortality_intercept))
        throw ConfigError("SynthConfig: non-finite parameter");
}

GroundTruth::GroundTruth(SynthConfig config) : config_(std::move(config)) {
    config_.validate();
    schema_ = FeatureSchema::default_synthetic();
}

ActionBins GroundTruth::action_bins() const {
    return ActionBins{{kIvEdges[1], kIvEdges[2], kIvEdges[3]},
                      {kVpEdges[1], kVpEdges[2], kVpEdges[3]}};
}

Eigen::VectorXd GroundTruth::clinician_proba_for_sofa(double sofa) const {
    return clinician_proba_impl(sofa, config_);
}

Observation GroundTruth::emit(double severity, Rng& rng) const {
    Observation obs(schema_.d_raw());
    obs(schema_.sofa_index) = std::clamp(std::round(2.0 * severity), 0.0, kSofaMax);
    obs(schema_.lactate_index) =
        softplus(severity + kLactateNoiseFactor * config_.noise_std * rng.normal());
    int aux = 0;
    for (int i = 0; i < schema_.d_raw(); ++i) {
        if (i == schema_.sofa_index || i == schema_.lactate_index) continue;
        obs(i) = aux_slope(aux) * severity + aux_offset(aux) + kAuxNoise * rng.normal();
        ++aux;
    }
    return obs;
}

std::pair<Trajectory, double> GroundTruth::simulate(const StochasticPolicy& policy, Rng& rng,
                                                    const std::string& patient_id) const {
    Trajectory traj;
    traj.patient_id = patient_id;

    double x = std::clamp(rng.normal(3.4, 1.8), 0.2, 11.0);
    Observation obs = emit(x, rng);

    std::array<Observation, kHistoryLags> obs_lags;
    obs_lags.fill(obs);
    std::array<int, kHistoryLags> action_lags{-1, -1, -1, -1};

    for (int t = 0; t < config_.max_horizon; ++t) {
        DecisionContext ctx;
        ctx.obs_lags = obs_lags;
        ctx.action_lags = action_lags;
        ctx.sofa_index = schema_.sofa_index;
        const int a = policy.sample_action(ctx, rng);
        const Action action = Action::from_flat(a);

        Step step;
        step.obs = obs;
        step.action = action;
        step.iv_dose = draw_dose(action.iv_bin, kIvEdges, rng);
        step.vp_dose = draw_dose(action.vp_bin, kVpEdges, rng);

        const double x_next = x + config_.severity_drift +
                              config_.treatment_effect(action.iv_bin, action.vp_bin) +
                              config_.noise_std * rng.normal();
        const Observation obs_next = emit(x_next, rng);

        const bool horizon_end = (t + 1 == config_.max_horizon);
        const bool discharged = config_.discharge_on_recovery && t + 1 >= kMinDischargeSteps &&
                                obs_next(schema_.sofa_index) == 0.0;
        if (horizon_end || discharged) {
            const double p_death =
                sigmoid(config_.mortality_slope * x_next + config_.mortality_intercept);
            traj.survived = !(rng.uniform() < p_death);
            step.reward = terminal_reward(traj.survived, reward_);
            step.is_terminal = true;
            traj.steps.push_back(std::move(step));
            return {traj, x_next};
        }

        step.reward = intermediate_reward(obs(schema_.sofa_index), obs_next(schema_.sofa_index),
                                          obs(schema_.lactate_index), obs_next(schema_.lactate_index),
                                          reward_);
        traj.steps.push_back(std::move(step));

        for (int lag = kHistoryLags - 1; lag > 0; --lag) {
            obs_lags[lag] = obs_lags[lag - 1];
            action_lags[lag] = action_lags[lag - 1];
        }
        obs_lags[0] = obs_next;
        action_lags[1] = a;
        obs = obs_next;
        x = x_next;
    }
    throw Error("GroundTruth::simulate: unreachable");
}

GroundTruthClinicianPolicy::GroundTruthClinicianPolicy(const SynthConfig& config)
    : config_(config) {
    config_.validate();
}

Eigen::VectorXd GroundTruthClinicianPolicy::action_proba(const DecisionContext& ctx) const {
    return clinician_proba_impl(ctx.sofa(), config_);
}

std::unique_ptr<StochasticPolicy> GroundTruthClinicianPolicy::clone() const {
    return std::make_unique<GroundTruthClinicianPolicy>(config_);
}

std::pair<Cohort, GroundTruth> generate_cohort(const SynthConfig& config) {
    GroundTruth truth(config);
    GroundTruthClinicianPolicy clinician(config);
    Cohort cohort;
    cohort.reserve(static_cast<std::size_t>(config.n_patients));
    char id[16];
    for (int i = 0; i < config.n_patients; ++i) {
        Rng rng = Rng::split(config.seed, kPatientStream, static_cast<std::uint64_t>(i));
        std::snprintf(id, sizeof(id), "p%06d", i);
        cohort.push_back(truth.simulate(clinician, rng, id).first);
    }
    return {std::move(cohort), std::move(truth)};
}

ValueEstimate true_policy_value(const GroundTruth& truth, const StochasticPolicy& policy,
                                int n_rollouts, double gamma, std::uint64_t seed) {
    if (n_rollouts < 1)
        throw ConfigError("true_policy_value: n_rollouts must be >= 1");
    if (!(gamma > 0 && gamma <= 1))
        throw ConfigError("true_policy_value: gamma must be in (0, 1]");
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n_rollouts; ++i) {
        Rng rng = Rng::split(seed, kOracleStream, static_cast<std::uint64_t>(i));
        const auto [traj, x_final] = truth.simulate(policy, rng, "rollout");
        const double ret = trajectory_return(traj, gamma);
        sum += ret;
        sum_sq += ret * ret;
    }
    const double n = static_cast<double>(n_rollouts);
    ValueEstimate est;
    est.value = sum / n;
    if (n_rollouts > 1) {
        const double var = std::max(0.0, (sum_sq - n * est.value * est.value) / (n - 1.0));
        est.std_error = std::sqrt(var / n);
    }
    return est;
}

Eigen::VectorXd clinician_action_proba(const GroundTruth& truth, const Eigen::VectorXd& state) {
    const int d = truth.schema().d_raw();
    if (state.size() % d != 0 || state.size() < d)
        throw ShapeError("clinician_action_proba: state length incompatible with schema");
    return truth.clinician_proba_for_sofa(state(truth.schema().sofa_index));
}

} // namespace sepsisrl
