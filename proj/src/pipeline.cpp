#include "sepsisrl/pipeline.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>

#include "sepsisrl/hash.hpp"

namespace fs = std::filesystem;

namespace sepsisrl {

using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object())
        throw ConfigError("config section '" + section + "' must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items())
        if (!ok.count(key))
            throw ConfigError("unknown config key '" + section + "." + key + "'");
}

std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// Exclusive per-directory lock; one stage process at a time.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".sepsisrl.lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f)
            throw Error("output directory is locked by another stage (" + path_.string() +
                        " exists); remove the lock file if no run is active");
        std::fputs("locked\n", f);
        std::fclose(f);
    }
    ~DirectoryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    fs::path path_;
};

std::string embedded_csv_hash(const std::string& path) {
    std::ifstream in(path);
    if (!in) return "";
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] != '#') break;
        const std::string tag = "# config_hash=";
        if (line.rfind(tag, 0) == 0) return line.substr(tag.size());
    }
    return "";
}

} // namespace

PipelineConfig PipelineConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return from_json(j);
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    check_keys(j, "config",
               {"seed", "gamma", "schema", "split_fractions", "synth", "ingest", "dynamics",
                "behavior", "policy", "evaluate", "rollout_export"});
    PipelineConfig cfg;
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.gamma = j.value("gamma", 0.99);
    if (!(cfg.gamma > 0 && cfg.gamma <= 1))
        throw ConfigError("config.gamma must be in (0, 1]");
    cfg.schema_path = j.value("schema", std::string{});
    if (j.contains("split_fractions")) {
        const auto f = j["split_fractions"].get<std::vector<double>>();
        if (f.size() != 3)
            throw ConfigError("config.split_fractions must have 3 entries");
        cfg.split_fractions = {f[0], f[1], f[2]};
    }
    if (j.contains("synth")) {
        const json& s = j["synth"];
        check_keys(s, "synth",
                   {"n_patients", "max_horizon", "severity_drift", "treatment_effect", "noise_std",
                    "clinician_temperature", "mortality_slope", "mortality_intercept",
                    "discharge_on_recovery"});
        cfg.synth.n_patients = s.value("n_patients", cfg.synth.n_patients);
        cfg.synth.max_horizon = s.value("max_horizon", cfg.synth.max_horizon);
        cfg.synth.severity_drift = s.value("severity_drift", cfg.synth.severity_drift);
        if (s.contains("treatment_effect"))
            cfg.synth.treatment_effect = matrix_from_json(s["treatment_effect"]);
        cfg.synth.noise_std = s.value("noise_std", cfg.synth.noise_std);
        cfg.synth.clinician_temperature =
            s.value("clinician_temperature", cfg.synth.clinician_temperature);
        cfg.synth.mortality_slope = s.value("mortality_slope", cfg.synth.mortality_slope);
        cfg.synth.mortality_intercept =
            s.value("mortality_intercept", cfg.synth.mortality_intercept);
        cfg.synth.discharge_on_recovery =
            s.value("discharge_on_recovery", cfg.synth.discharge_on_recovery);
    }
    cfg.synth.seed = cfg.seed;
    cfg.synth.validate();
    if (j.contains("ingest")) {
        const json& s = j["ingest"];
        check_keys(s, "ingest", {"input_csv", "recompute_rewards"});
        cfg.ingest.input_csv = s.value("input_csv", std::string{});
        cfg.ingest.recompute_rewards = s.value("recompute_rewards", false);
    }
    if (j.contains("dynamics")) {
        const json& s = j["dynamics"];
        check_keys(s, "dynamics",
                   {"model", "hidden1", "hidden2", "epochs", "batch_size", "learning_rate",
                    "ridge_lambda"});
        cfg.dynamics.model = s.value("model", cfg.dynamics.model);
        if (cfg.dynamics.model != "mlp" && cfg.dynamics.model != "linear")
            throw ConfigError("dynamics.model must be 'mlp' or 'linear'");
        cfg.dynamics.hidden1 = s.value("hidden1", cfg.dynamics.hidden1);
        cfg.dynamics.hidden2 = s.value("hidden2", cfg.dynamics.hidden2);
        cfg.dynamics.epochs = s.value("epochs", cfg.dynamics.epochs);
        cfg.dynamics.batch_size = s.value("batch_size", cfg.dynamics.batch_size);
        cfg.dynamics.learning_rate = s.value("learning_rate", cfg.dynamics.learning_rate);
        cfg.dynamics.ridge_lambda = s.value("ridge_lambda", cfg.dynamics.ridge_lambda);
    }
    if (j.contains("behavior")) {
        const json& s = j["behavior"];
        check_keys(s, "behavior", {"epochs", "batch_size", "learning_rate", "l2", "hidden"});
        cfg.behavior.epochs = s.value("epochs", cfg.behavior.epochs);
        cfg.behavior.batch_size = s.value("batch_size", cfg.behavior.batch_size);
        cfg.behavior.learning_rate = s.value("learning_rate", cfg.behavior.learning_rate);
        cfg.behavior.l2 = s.value("l2", cfg.behavior.l2);
        cfg.behavior.hidden = s.value("hidden", cfg.behavior.hidden);
    }
    if (j.contains("policy")) {
        const json& s = j["policy"];
        check_keys(s, "policy",
                   {"algorithm", "iterations", "rollouts_per_iteration", "horizon",
                    "learning_rate", "clip_epsilon", "epochs_per_update"});
        cfg.policy.algorithm = s.value("algorithm", cfg.policy.algorithm);
        if (cfg.policy.algorithm != "ppo" && cfg.policy.algorithm != "pg")
            throw ConfigError("policy.algorithm must be 'ppo' or 'pg'");
        cfg.policy.iterations = s.value("iterations", cfg.policy.iterations);
        cfg.policy.rollouts_per_iteration =
            s.value("rollouts_per_iteration", cfg.policy.rollouts_per_iteration);
        cfg.policy.horizon = s.value("horizon", cfg.policy.horizon);
        cfg.policy.learning_rate = s.value("learning_rate", cfg.policy.learning_rate);
        cfg.policy.clip_epsilon = s.value("clip_epsilon", cfg.policy.clip_epsilon);
        cfg.policy.epochs_per_update = s.value("epochs_per_update", cfg.policy.epochs_per_update);
    }
    if (j.contains("evaluate")) {
        const json& s = j["evaluate"];
        check_keys(s, "evaluate",
                   {"k", "alpha", "clip_max", "fqi_iterations", "n_trees", "max_depth",
                    "min_samples_leaf", "sofa_low_max", "sofa_high_min", "clinician_policy",
                    "behavior_model"});
        cfg.evaluate.k = s.value("k", cfg.evaluate.k);
        cfg.evaluate.alpha = s.value("alpha", cfg.evaluate.alpha);
        cfg.evaluate.clip_max = s.value("clip_max", cfg.evaluate.clip_max);
        cfg.evaluate.fqi_iterations = s.value("fqi_iterations", cfg.evaluate.fqi_iterations);
        cfg.evaluate.n_trees = s.value("n_trees", cfg.evaluate.n_trees);
        cfg.evaluate.max_depth = s.value("max_depth", cfg.evaluate.max_depth);
        cfg.evaluate.min_samples_leaf = s.value("min_samples_leaf", cfg.evaluate.min_samples_leaf);
        cfg.evaluate.sofa_low_max = s.value("sofa_low_max", cfg.evaluate.sofa_low_max);
        cfg.evaluate.sofa_high_min = s.value("sofa_high_min", cfg.evaluate.sofa_high_min);
        cfg.evaluate.clinician_policy = s.value("clinician_policy", cfg.evaluate.clinician_policy);
        cfg.evaluate.behavior_model = s.value("behavior_model", cfg.evaluate.behavior_model);
        if (cfg.evaluate.clinician_policy != "bc" && cfg.evaluate.clinician_policy != "ground_truth")
            throw ConfigError("evaluate.clinician_policy must be 'bc' or 'ground_truth'");
        if (cfg.evaluate.behavior_model != "knn" && cfg.evaluate.behavior_model != "ground_truth")
            throw ConfigError("evaluate.behavior_model must be 'knn' or 'ground_truth'");
    }
    if (j.contains("rollout_export")) {
        const json& s = j["rollout_export"];
        check_keys(s, "rollout_export", {"n_trajectories", "horizon", "stochastic"});
        cfg.rollout_export.n_trajectories =
            s.value("n_trajectories", cfg.rollout_export.n_trajectories);
        cfg.rollout_export.horizon = s.value("horizon", cfg.rollout_export.horizon);
        cfg.rollout_export.stochastic = s.value("stochastic", cfg.rollout_export.stochastic);
    }
    return cfg;
}

json PipelineConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["gamma"] = gamma;
    j["schema"] = schema_path;
    j["split_fractions"] = split_fractions;
    j["synth"] = synth_config_to_json(synth);
    j["ingest"] = json{{"input_csv", ingest.input_csv},
                       {"recompute_rewards", ingest.recompute_rewards}};
    j["dynamics"] = json{{"model", dynamics.model},         {"hidden1", dynamics.hidden1},
                         {"hidden2", dynamics.hidden2},     {"epochs", dynamics.epochs},
                         {"batch_size", dynamics.batch_size}, {"learning_rate", dynamics.learning_rate},
                         {"ridge_lambda", dynamics.ridge_lambda}};
    j["behavior"] = json{{"epochs", behavior.epochs},
                         {"batch_size", behavior.batch_size},
                         {"learning_rate", behavior.learning_rate},
                         {"l2", behavior.l2},
                         {"hidden", behavior.hidden}};
    j["policy"] = json{{"algorithm", policy.algorithm},
                       {"iterations", policy.iterations},
                       {"rollouts_per_iteration", policy.rollouts_per_iteration},
                       {"horizon", policy.horizon},
                       {"learning_rate", policy.learning_rate},
                       {"clip_epsilon", policy.clip_epsilon},
                       {"epochs_per_update", policy.epochs_per_update}};
    j["evaluate"] = json{{"k", evaluate.k},
                         {"alpha", evaluate.alpha},
                         {"clip_max", evaluate.clip_max},
                         {"fqi_iterations", evaluate.fqi_iterations},
                         {"n_trees", evaluate.n_trees},
                         {"max_depth", evaluate.max_depth},
                         {"min_samples_leaf", evaluate.min_samples_leaf},
                         {"sofa_low_max", evaluate.sofa_low_max},
                         {"sofa_high_min", evaluate.sofa_high_min},
                         {"clinician_policy", evaluate.clinician_policy},
                         {"behavior_model", evaluate.behavior_model}};
    j["rollout_export"] = json{{"n_trajectories", rollout_export.n_trajectories},
                               {"horizon", rollout_export.horizon},
                               {"stochastic", rollout_export.stochastic}};
    return j;
}

std::string PipelineConfig::config_hash() const { return sha256_hex(to_json().dump()); }

Pipeline::Pipeline(PipelineConfig config, std::string out_dir, bool force)
    : config_(std::move(config)), out_dir_(std::move(out_dir)), force_(force) {
    config_hash_ = config_.config_hash();
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    const std::string manifest_path = artifact_path("manifest.json");
    if (fs::exists(manifest_path)) {
        manifest_ = read_json_file(manifest_path);
        if (manifest_.contains("stages"))
            for (const auto& [name, rec] : manifest_["stages"].items())
                next_sequence_ = std::max(next_sequence_, rec.value("sequence", 0) + 1);
    } else {
        manifest_ = json{{"tool_version", kToolVersion},
                         {"config_hash", config_hash_},
                         {"stages", json::object()}};
    }
}

std::string Pipeline::artifact_path(const std::string& name) const {
    return (fs::path(out_dir_) / name).string();
}

bool Pipeline::stage_up_to_date(const StagePlan& plan) const {
    if (force_) return false;
    if (!manifest_.contains("stages") || !manifest_["stages"].contains(plan.name)) return false;
    const json& rec = manifest_["stages"][plan.name];
    if (rec.value("config_hash", "") != config_hash_) return false;
    auto files_match = [&](const char* field, const std::vector<std::string>& names) {
        if (!rec.contains(field)) return false;
        for (const auto& name : names) {
            const std::string path = artifact_path(name);
            if (!fs::exists(path)) return false;
            if (!rec[field].contains(name)) return false;
            if (rec[field][name].get<std::string>() != sha256_file(path)) return false;
        }
        return true;
    };
    return files_match("inputs", plan.inputs) && files_match("outputs", plan.outputs);
}

void Pipeline::check_inputs(const StagePlan& plan) const {
    for (const auto& name : plan.inputs) {
        const std::string path = artifact_path(name);
        if (!fs::exists(path))
            throw DependencyError("stage '" + plan.name + "' needs missing artifact " + path +
                                  "; run the producing stage first");
        if (force_) continue;
        std::string embedded;
        if (name.size() > 4 && name.substr(name.size() - 4) == ".csv") {
            embedded = embedded_csv_hash(path);
        } else if (name.size() > 5 && name.substr(name.size() - 5) == ".json") {
            const json doc = read_json_file(path);
            if (doc.contains("payload"))
                embedded = doc["payload"].value("config_hash", "");
            else
                embedded = doc.value("config_hash", "");
        }
        if (!embedded.empty() && embedded != config_hash_)
            throw DependencyError("stage '" + plan.name + "': input " + path +
                                  " was produced under a different config (hash mismatch); "
                                  "rerun upstream stages or pass --force");
    }
}

void Pipeline::record_stage(const StagePlan& plan) {
    json inputs = json::object();
    for (const auto& name : plan.inputs) inputs[name] = sha256_file(artifact_path(name));
    json outputs = json::object();
    for (const auto& name : plan.outputs) outputs[name] = sha256_file(artifact_path(name));
    manifest_["config_hash"] = config_hash_;
    manifest_["tool_version"] = kToolVersion;
    manifest_["stages"][plan.name] = json{{"sequence", next_sequence_++},
                                          {"config_hash", config_hash_},
                                          {"inputs", std::move(inputs)},
                                          {"outputs", std::move(outputs)}};
    write_json_file(manifest_, artifact_path("manifest.json"));
}

StageResult Pipeline::run_stage(const StagePlan& plan, const std::function<void()>& body) {
    DirectoryLock lock(out_dir_);
    StageResult result;
    for (const auto& name : plan.outputs) result.outputs.push_back(artifact_path(name));
    if (stage_up_to_date(plan)) {
        std::cout << "[" << plan.name << "] up-to-date\n";
        result.skipped = true;
        return result;
    }
    check_inputs(plan);
    body();
    record_stage(plan);
    std::cout << "[" << plan.name << "] done\n";
    return result;
}

FeatureSchema Pipeline::load_schema_artifact() const {
    return read_schema_json(artifact_path("schema.json"));
}

SplitCohort Pipeline::load_split_cohort(const FeatureSchema& schema) const {
    const json splits = read_json_file(artifact_path("splits.json"));
    const ActionBins bins = action_bins_from_json(
        unwrap_model(read_json_file(artifact_path("bins.json")), "action_bins"));
    const Cohort cohort = read_cohort_csv(artifact_path("cohort.csv"), schema, bins);
    std::map<std::string, const Trajectory*> by_id;
    for (const auto& traj : cohort) by_id[traj.patient_id] = &traj;
    auto take = [&](const char* field) {
        Cohort part;
        for (const auto& id : splits.at(field).get<std::vector<std::string>>()) {
            auto it = by_id.find(id);
            if (it == by_id.end())
                throw DataError("splits.json references unknown patient_id " + id);
            part.push_back(*it->second);
        }
        return part;
    };
    SplitCohort out;
    out.train = take("train");
    out.val = take("val");
    out.test = take("test");
    return out;
}

namespace {

Standardizer train_standardizer(const Cohort& train) {
    return fit_standardizer(collect_observations(train));
}

struct BcDataset {
    Eigen::MatrixXd histories;
    std::vector<int> labels;
};

BcDataset build_bc_dataset(const Cohort& cohort, const FeatureSchema& schema,
                           const Standardizer& st) {
    Eigen::Index n = 0;
    for (const auto& traj : cohort) n += traj.length();
    BcDataset ds;
    ds.histories.resize(n, schema.history_dim());
    ds.labels.reserve(static_cast<std::size_t>(n));
    Eigen::Index row = 0;
    for (const auto& traj : cohort) {
        for (int t = 0; t < traj.length(); ++t) {
            ds.histories.row(row++) =
                decision_context_at(traj, t, schema).decision_history(st);
            ds.labels.push_back(traj.steps[static_cast<std::size_t>(t)].action.flat_index());
        }
    }
    return ds;
}

void write_metrics_csv(const std::string& path, const std::string& header,
                       const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot open " + path + " for writing");
    out << header << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out << ",";
            // integer-valued leading columns print as integers
            if (i == 0)
                out << static_cast<long>(row[i]);
            else
                out << format_double(row[i]);
        }
        out << "\n";
    }
}

} // namespace

StageResult Pipeline::synth() {
    StagePlan plan{"synth",
                   {},
                   {"cohort.csv", "bins.json", "schema.json", "splits.json", "ground_truth.json"}};
    return run_stage(plan, [&] {
        const auto [cohort, truth] = generate_cohort(config_.synth);
        write_schema_json(truth.schema(), artifact_path("schema.json"));
        write_cohort_csv(cohort, truth.schema(), artifact_path("cohort.csv"),
                         "config_hash=" + config_hash_);
        json bins_payload = action_bins_to_json(truth.action_bins());
        bins_payload["config_hash"] = config_hash_;
        write_json_file(wrap_model("action_bins", bins_payload), artifact_path("bins.json"));

        const SplitCohort split = split_cohort(cohort, config_.split_fractions, config_.seed);
        json splits;
        splits["config_hash"] = config_hash_;
        splits["seed"] = config_.seed;
        splits["fractions"] = config_.split_fractions;
        auto ids = [](const Cohort& c) {
            std::vector<std::string> out;
            for (const auto& traj : c) out.push_back(traj.patient_id);
            return out;
        };
        splits["train"] = ids(split.train);
        splits["val"] = ids(split.val);
        splits["test"] = ids(split.test);
        write_json_file(splits, artifact_path("splits.json"));

        json truth_payload = synth_config_to_json(truth.config());
        truth_payload["config_hash"] = config_hash_;
        write_json_file(wrap_model("ground_truth", truth_payload),
                        artifact_path("ground_truth.json"));
    });
}

StageResult Pipeline::ingest() {
    if (config_.ingest.input_csv.empty())
        throw ConfigError("ingest.input_csv is required for the ingest stage");
    StagePlan plan{"ingest", {}, {"cohort.csv", "bins.json", "schema.json", "splits.json"}};
    return run_stage(plan, [&] {
        const FeatureSchema schema = config_.schema_path.empty()
                                         ? FeatureSchema::default_synthetic()
                                         : read_schema_json(config_.schema_path);
        if (!fs::exists(config_.ingest.input_csv))
            throw DependencyError("ingest: input CSV not found: " + config_.ingest.input_csv);
        Cohort cohort = read_cohort_csv(config_.ingest.input_csv, schema);

        // quartile bins refit from the ingested doses, as for the stored actions
        std::vector<std::pair<double, double>> doses;
        for (const auto& traj : cohort)
            for (const auto& s : traj.steps) doses.push_back({s.iv_dose, s.vp_dose});
        const ActionBins bins = fit_action_bins(doses);

        if (config_.ingest.recompute_rewards) {
            for (auto& traj : cohort) {
                RewardParams params;
                params.gamma = config_.gamma;
                for (int t = 0; t + 1 < traj.length(); ++t) {
                    auto& cur = traj.steps[static_cast<std::size_t>(t)];
                    const auto& nxt = traj.steps[static_cast<std::size_t>(t + 1)];
                    cur.reward = intermediate_reward(
                        cur.obs(schema.sofa_index), nxt.obs(schema.sofa_index),
                        cur.obs(schema.lactate_index), nxt.obs(schema.lactate_index), params);
                }
                traj.steps.back().reward = terminal_reward(traj.survived, params);
            }
        }

        write_schema_json(schema, artifact_path("schema.json"));
        write_cohort_csv(cohort, schema, artifact_path("cohort.csv"),
                         "config_hash=" + config_hash_);
        json bins_payload = action_bins_to_json(bins);
        bins_payload["config_hash"] = config_hash_;
        write_json_file(wrap_model("action_bins", bins_payload), artifact_path("bins.json"));

        const SplitCohort split = split_cohort(cohort, config_.split_fractions, config_.seed);
        json splits;
        splits["config_hash"] = config_hash_;
        splits["seed"] = config_.seed;
        splits["fractions"] = config_.split_fractions;
        auto ids = [](const Cohort& c) {
            std::vector<std::string> out;
            for (const auto& traj : c) out.push_back(traj.patient_id);
            return out;
        };
        splits["train"] = ids(split.train);
        splits["val"] = ids(split.val);
        splits["test"] = ids(split.test);
        write_json_file(splits, artifact_path("splits.json"));
    });
}

StageResult Pipeline::fit_dynamics() {
    StagePlan plan{"fit-dynamics",
                   {"cohort.csv", "bins.json", "schema.json", "splits.json"},
                   {"dynamics_model.json", "dynamics_metrics.csv"}};
    return run_stage(plan, [&] {
        const FeatureSchema schema = load_schema_artifact();
        const SplitCohort split = load_split_cohort(schema);
        if (split.train.empty() || split.val.empty())
            throw InsufficientDataError("fit-dynamics: empty train or validation split");
        const Standardizer st = train_standardizer(split.train);
        const TransitionDataset train = build_transition_dataset(split.train, schema, st);
        const TransitionDataset val = build_transition_dataset(split.val, schema, st);

        FittedDynamics dyn;
        dyn.standardizer = st;
        dyn.schema = schema;
        std::vector<std::vector<double>> rows;
        if (config_.dynamics.model == "linear") {
            const LinearDynamics lin =
                fit_linear(train.histories, train.deltas, config_.dynamics.ridge_lambda);
            rows.push_back({0.0, eval_mse(lin, train), eval_mse(lin, val)});
            dyn.model = lin;
        } else {
            DynTrainConfig tc;
            tc.epochs = config_.dynamics.epochs;
            tc.batch_size = config_.dynamics.batch_size;
            tc.learning_rate = config_.dynamics.learning_rate;
            tc.hidden1 = config_.dynamics.hidden1;
            tc.hidden2 = config_.dynamics.hidden2;
            tc.seed = config_.seed;
            const DynTrainResult result = train_dynamics(train, val, tc);
            for (std::size_t e = 0; e < result.train_mse.size(); ++e)
                rows.push_back({static_cast<double>(e), result.train_mse[e], result.val_mse[e]});
            dyn.model = result.model;
        }
        save_dynamics(dyn, artifact_path("dynamics_model.json"), config_hash_, config_.seed);
        write_metrics_csv(artifact_path("dynamics_metrics.csv"), "epoch,train_mse,val_mse", rows);
    });
}

StageResult Pipeline::fit_behavior() {
    StagePlan plan{"fit-behavior",
                   {"cohort.csv", "bins.json", "schema.json", "splits.json"},
                   {"behavior_model.json", "behavior_metrics.csv"}};
    return run_stage(plan, [&] {
        const FeatureSchema schema = load_schema_artifact();
        const SplitCohort split = load_split_cohort(schema);
        if (split.train.empty() || split.val.empty())
            throw InsufficientDataError("fit-behavior: empty train or validation split");
        const Standardizer st = train_standardizer(split.train);
        const BcDataset train = build_bc_dataset(split.train, schema, st);
        const BcDataset val = build_bc_dataset(split.val, schema, st);

        BcConfig bc;
        bc.epochs = config_.behavior.epochs;
        bc.batch_size = config_.behavior.batch_size;
        bc.learning_rate = config_.behavior.learning_rate;
        bc.l2 = config_.behavior.l2;
        bc.hidden = config_.behavior.hidden;
        bc.seed = config_.seed;
        const BcResult result = bc_fit(train.histories, train.labels, val.histories, val.labels, bc);

        const NetworkPolicy policy(result.model, st, schema);
        save_policy(policy, artifact_path("behavior_model.json"), "bc", config_hash_, config_.seed,
                    bc.l2);
        std::vector<std::vector<double>> rows;
        for (std::size_t e = 0; e < result.train_ce.size(); ++e)
            rows.push_back({static_cast<double>(e), result.train_ce[e], result.val_ce[e]});
        write_metrics_csv(artifact_path("behavior_metrics.csv"), "epoch,train_ce,val_ce", rows);
    });
}

StageResult Pipeline::train_policy_stage() {
    StagePlan plan{"train-policy",
                   {"cohort.csv", "bins.json", "schema.json", "splits.json",
                    "dynamics_model.json", "behavior_model.json"},
                   {"policy_model.json", "policy_metrics.csv"}};
    return run_stage(plan, [&] {
        const FeatureSchema schema = load_schema_artifact();
        const SplitCohort split = load_split_cohort(schema);
        const FittedDynamics dyn = load_dynamics(artifact_path("dynamics_model.json"));
        const NetworkPolicy bc = load_policy(artifact_path("behavior_model.json"));

        PpoConfig pc;
        pc.iterations = config_.policy.iterations;
        pc.rollouts_per_iteration = config_.policy.rollouts_per_iteration;
        pc.horizon = config_.policy.horizon;
        pc.learning_rate = config_.policy.learning_rate;
        pc.clip_epsilon = config_.policy.clip_epsilon;
        pc.epochs_per_update = config_.policy.epochs_per_update;
        pc.gamma = config_.gamma;
        pc.seed = config_.seed;
        RewardParams reward;
        reward.gamma = config_.gamma;

        const PolicyAlgorithm algo =
            config_.policy.algorithm == "pg" ? PolicyAlgorithm::Pg : PolicyAlgorithm::Ppo;
        const PolicyTrainResult result = train_policy(
            bc.policy_net(), bc.standardizer(), schema, dyn, split.train, algo, pc, reward);

        save_policy(result.policy, artifact_path("policy_model.json"), config_.policy.algorithm,
                    config_hash_, config_.seed, bc.policy_net().l2);
        std::vector<std::vector<double>> rows;
        for (const auto& d : result.diagnostics)
            rows.push_back({static_cast<double>(d.iteration), d.mean_return, d.kl_to_clinician,
                            d.loss});
        write_metrics_csv(artifact_path("policy_metrics.csv"), "iteration,mean_return,kl,loss",
                          rows);
    });
}

StageResult Pipeline::evaluate() {
    std::vector<std::string> inputs = {"cohort.csv", "bins.json", "schema.json", "splits.json",
                                       "behavior_model.json", "policy_model.json"};
    const bool needs_truth = config_.evaluate.clinician_policy == "ground_truth" ||
                             config_.evaluate.behavior_model == "ground_truth";
    if (needs_truth) inputs.push_back("ground_truth.json");
    StagePlan plan{"evaluate", std::move(inputs), {"ope_report.json", "ope_table.csv"}};
    return run_stage(plan, [&] {
        const FeatureSchema schema = load_schema_artifact();
        const SplitCohort split = load_split_cohort(schema);
        if (split.test.empty())
            throw InsufficientDataError("evaluate: empty test split");
        const NetworkPolicy learned = load_policy(artifact_path("policy_model.json"));

        std::unique_ptr<StochasticPolicy> clinician;
        std::unique_ptr<StochasticPolicy> behavior;
        if (needs_truth) {
            const SynthConfig truth_cfg = synth_config_from_json(
                unwrap_model(read_json_file(artifact_path("ground_truth.json")), "ground_truth"));
            if (config_.evaluate.clinician_policy == "ground_truth")
                clinician = std::make_unique<GroundTruthClinicianPolicy>(truth_cfg);
            if (config_.evaluate.behavior_model == "ground_truth")
                behavior = std::make_unique<GroundTruthClinicianPolicy>(truth_cfg);
        }
        if (!clinician)
            clinician = load_policy(artifact_path("behavior_model.json")).clone();

        OpeConfig oc;
        oc.gamma = config_.gamma;
        oc.k = config_.evaluate.k;
        oc.alpha = config_.evaluate.alpha;
        oc.clip_max = config_.evaluate.clip_max;
        oc.fqi_iterations = config_.evaluate.fqi_iterations;
        oc.forest.n_trees = config_.evaluate.n_trees;
        oc.forest.max_depth = config_.evaluate.max_depth;
        oc.forest.min_samples_leaf = config_.evaluate.min_samples_leaf;
        oc.seed = config_.seed;
        oc.sofa_low_max = config_.evaluate.sofa_low_max;
        oc.sofa_high_min = config_.evaluate.sofa_high_min;

        const std::array<std::array<RegimeSource, 3>, 5> rows = {{
            {RegimeSource::Learned, RegimeSource::Learned, RegimeSource::Learned},
            {RegimeSource::Learned, RegimeSource::Learned, RegimeSource::Clinician},
            {RegimeSource::Clinician, RegimeSource::Learned, RegimeSource::Clinician},
            {RegimeSource::Learned, RegimeSource::Clinician, RegimeSource::Learned},
            {RegimeSource::Clinician, RegimeSource::Clinician, RegimeSource::Clinician},
        }};
        auto name_of = [](RegimeSource s) {
            return s == RegimeSource::Clinician ? std::string("clinician") : std::string("learned");
        };

        json report;
        report["config_hash"] = config_hash_;
        report["gamma"] = config_.gamma;
        report["behavior_model"] = config_.evaluate.behavior_model;
        report["clinician_policy"] = config_.evaluate.clinician_policy;
        report["test_mean_return"] = behavior_value(split.test, config_.gamma);
        report["rows"] = json::array();

        std::ofstream table(artifact_path("ope_table.csv"));
        table << "low,medium,high,phwis,phwdr,am,ess,clip_fraction\n";
        for (const auto& row : rows) {
            BlendSpec spec;
            spec.sofa_low_max = config_.evaluate.sofa_low_max;
            spec.sofa_high_min = config_.evaluate.sofa_high_min;
            spec.low = row[0];
            spec.medium = row[1];
            spec.high = row[2];
            const auto blended = blend(*clinician, learned, spec);
            const OpeReport ope =
                evaluate_policy(split.test, *blended, schema, oc, behavior.get());
            json row_json = ope_report_to_json(ope);
            row_json["low"] = name_of(row[0]);
            row_json["medium"] = name_of(row[1]);
            row_json["high"] = name_of(row[2]);
            report["rows"].push_back(std::move(row_json));
            table << name_of(row[0]) << "," << name_of(row[1]) << "," << name_of(row[2]) << ","
                  << format_double(ope.phwis) << "," << format_double(ope.phwdr) << ","
                  << format_double(ope.am) << "," << format_double(ope.ess) << ","
                  << format_double(ope.phwis_diagnostics.clip_fraction) << "\n";
        }
        table.close();
        write_json_file(report, artifact_path("ope_report.json"));
    });
}

StageResult Pipeline::rollout_export() {
    StagePlan plan{"rollout-export",
                   {"cohort.csv", "bins.json", "schema.json", "splits.json",
                    "dynamics_model.json"},
                   {"rollout_traces.csv"}};
    return run_stage(plan, [&] {
        const FeatureSchema schema = load_schema_artifact();
        const SplitCohort split = load_split_cohort(schema);
        const FittedDynamics dyn = load_dynamics(artifact_path("dynamics_model.json"));
        if (split.val.empty())
            throw InsufficientDataError("rollout-export: empty validation split");

        Rng rng = Rng::split(config_.seed, 0xE0B1);
        std::ofstream out(artifact_path("rollout_traces.csv"));
        out << "patient_id,t,sofa_pred,sofa_actual\n";
        const int n = std::min<int>(config_.rollout_export.n_trajectories,
                                    static_cast<int>(split.val.size()));
        for (int i = 0; i < n; ++i) {
            const auto& traj =
                split.val[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(split.val.size()) - 1))];
            RolloutConfig rc;
            rc.horizon = config_.rollout_export.horizon;
            rc.stochastic = config_.rollout_export.stochastic;
            rc.seed = Rng::split(config_.seed, 0xE0B2, static_cast<std::uint64_t>(i)).next_u64();
            rc.reward.gamma = config_.gamma;
            const RolloutResult result = rollout_replay(dyn, traj, rc);
            const int comparable = std::min(result.length(), traj.length() - 1);
            for (int k = 0; k < comparable; ++k) {
                out << traj.patient_id << "," << (k + 1) << ","
                    << format_double(result.observations[static_cast<std::size_t>(k)](schema.sofa_index))
                    << ","
                    << format_double(traj.steps[static_cast<std::size_t>(k + 1)].obs(schema.sofa_index))
                    << "\n";
            }
        }
    });
}

int exit_code_for_current_exception() {
    try {
        throw;
    } catch (const ConfigError&) {
        return 2;
    } catch (const DependencyError&) {
        return 3;
    } catch (const DataError&) {
        return 4;
    } catch (const InsufficientDataError&) {
        return 4;
    } catch (const DomainError&) {
        return 4;
    } catch (const ShapeError&) {
        return 4;
    } catch (const IndexError&) {
        return 4;
    } catch (...) {
        return 1;
    }
}

} // namespace sepsisrl
