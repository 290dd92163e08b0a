#pragma once

#include "sepsisrl/data_core.hpp"

namespace sepsisrl {

/// Constants of the clinically guided reward. The intermediate reward is
///   c0 * 1(sofa unchanged and > 0) + c1 * (sofa delta) + c2 * tanh(lactate delta)
/// and terminal outcomes are worth +/- terminal_magnitude.
struct RewardParams {
    double c0 = -0.025;
    double c1 = -0.125;
    double c2 = -2.0;
    double terminal_magnitude = 15.0;
    double gamma = 0.99;

    void validate() const {
        if (!(terminal_magnitude > 0.0))
            throw ConfigError("RewardParams: terminal_magnitude must be > 0");
        if (!(gamma > 0.0 && gamma <= 1.0))
            throw ConfigError("RewardParams: gamma must be in (0, 1]");
    }
};

double intermediate_reward(double sofa_t, double sofa_t1, double lactate_t, double lactate_t1,
                           const RewardParams& params = {});

double terminal_reward(bool survived, const RewardParams& params = {});

/// Discounted sum of the trajectory's per-step rewards.
double trajectory_return(const Trajectory& traj, double gamma);

/// Mean trajectory return over the cohort.
double behavior_value(const Cohort& cohort, double gamma);

} // namespace sepsisrl
