#pragma once

#include <string>
#include <vector>

#include "sepsisrl/model_io.hpp"

namespace sepsisrl {

/// Resolved configuration of the whole experiment. One global seed and gamma
/// feed every stage; stage sections carry their own hyperparameters.
struct PipelineConfig {
    std::uint64_t seed = 0;
    double gamma = 0.99;
    std::string schema_path; // empty = built-in 12-feature synthetic schema
    std::array<double, 3> split_fractions{0.7, 0.15, 0.15};

    SynthConfig synth; // synth.seed is overridden by the global seed

    struct IngestConfig {
        std::string input_csv;
        bool recompute_rewards = false;
    } ingest;

    struct DynamicsConfig {
        std::string model = "mlp"; // or "linear"
        int hidden1 = 128;
        int hidden2 = 128;
        int epochs = 100;
        int batch_size = 64;
        double learning_rate = 1e-3;
        double ridge_lambda = 1e-6;
    } dynamics;

    struct BehaviorConfig {
        int epochs = 60;
        int batch_size = 64;
        double learning_rate = 1e-3;
        double l2 = 1e-4;
        int hidden = 64;
    } behavior;

    struct PolicyConfig {
        std::string algorithm = "ppo"; // or "pg"
        int iterations = 20;
        int rollouts_per_iteration = 256;
        int horizon = 10;
        double learning_rate = 1e-5;
        double clip_epsilon = 0.2;
        int epochs_per_update = 4;
    } policy;

    struct EvaluateConfig {
        int k = 250;
        double alpha = 0.5;
        double clip_max = 100.0;
        int fqi_iterations = -1;
        int n_trees = 80;
        int max_depth = 12;
        int min_samples_leaf = 5;
        int sofa_low_max = 5;
        int sofa_high_min = 15;
        std::string clinician_policy = "bc"; // or "ground_truth" (synthetic cohorts only)
        std::string behavior_model = "knn";  // or "ground_truth"
    } evaluate;

    struct RolloutExportConfig {
        int n_trajectories = 5;
        int horizon = 10;
        bool stochastic = false;
    } rollout_export;

    /// Parses the config JSON; unknown keys raise ConfigError naming the key.
    static PipelineConfig from_file(const std::string& path);
    static PipelineConfig from_json(const nlohmann::json& j);

    nlohmann::json to_json() const;

    /// SHA-256 of the canonical JSON dump; embedded into every artifact.
    std::string config_hash() const;
};

struct StageResult {
    bool skipped = false;
    std::vector<std::string> outputs;
};

/// Orchestrates the experiment stages over one output directory. Artifacts
/// carry the producing config hash; the manifest records input/output hashes
/// per stage so unchanged stages are skipped. A lock file serializes stage
/// execution per directory.
class Pipeline {
public:
    Pipeline(PipelineConfig config, std::string out_dir, bool force = false);

    StageResult synth();
    StageResult ingest();
    StageResult fit_dynamics();
    StageResult fit_behavior();
    StageResult train_policy_stage();
    StageResult evaluate();
    StageResult rollout_export();

    const PipelineConfig& config() const { return config_; }
    std::string artifact_path(const std::string& name) const;

private:
    struct StagePlan {
        std::string name;
        std::vector<std::string> inputs;  // artifact file names
        std::vector<std::string> outputs; // artifact file names
    };

    bool stage_up_to_date(const StagePlan& plan) const;
    void check_inputs(const StagePlan& plan) const;
    void record_stage(const StagePlan& plan);
    StageResult run_stage(const StagePlan& plan, const std::function<void()>& body);

    FeatureSchema load_schema_artifact() const;
    SplitCohort load_split_cohort(const FeatureSchema& schema) const;

    PipelineConfig config_;
    std::string out_dir_;
    bool force_ = false;
    std::string config_hash_;
    nlohmann::json manifest_;
    int next_sequence_ = 1;
};

/// Exit-code mapping shared by the CLI: 0 success, 2 config error,
/// 3 dependency error, 4 data error, 1 anything else.
int exit_code_for_current_exception();

} // namespace sepsisrl
