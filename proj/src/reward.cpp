#include "sepsisrl/reward.hpp"

#include <cmath>

namespace sepsisrl {

double intermediate_reward(double sofa_t, double sofa_t1, double lactate_t, double lactate_t1,
                           const RewardParams& params) {
    if (!std::isfinite(sofa_t) || !std::isfinite(sofa_t1) || !std::isfinite(lactate_t) ||
        !std::isfinite(lactate_t1))
        throw DomainError("intermediate_reward: non-finite input");
    if (sofa_t < 0 || sofa_t > kSofaMax || sofa_t1 < 0 || sofa_t1 > kSofaMax)
        throw DomainError("intermediate_reward: SOFA outside [0, 24]");
    if (lactate_t < 0 || lactate_t1 < 0)
        throw DomainError("intermediate_reward: negative lactate");
    const double unchanged = (sofa_t1 == sofa_t && sofa_t1 > 0) ? 1.0 : 0.0;
    return params.c0 * unchanged + params.c1 * (sofa_t1 - sofa_t) +
           params.c2 * std::tanh(lactate_t1 - lactate_t);
}

double terminal_reward(bool survived, const RewardParams& params) {
    return survived ? params.terminal_magnitude : -params.terminal_magnitude;
}

double trajectory_return(const Trajectory& traj, double gamma) {
    if (traj.steps.empty())
        throw InsufficientDataError("trajectory_return: empty trajectory");
    double total = 0.0;
    double discount = 1.0;
    for (const auto& step : traj.steps) {
        total += discount * step.reward;
        discount *= gamma;
    }
    return total;
}

double behavior_value(const Cohort& cohort, double gamma) {
    if (cohort.empty())
        throw InsufficientDataError("behavior_value: empty cohort");
    double sum = 0.0;
    for (const auto& traj : cohort) sum += trajectory_return(traj, gamma);
    return sum / static_cast<double>(cohort.size());
}

} // namespace sepsisrl
