#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sepsisrl/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "pipeline config JSON")->required();
    cmd->add_option("--out", args.out_dir, "output directory for artifacts");
    cmd->add_option("--seed", args.seed, "override the config's global seed");
    cmd->add_flag("--force", args.force, "rerun even if artifacts are up to date");
}

sepsisrl::Pipeline make_pipeline(const CommonArgs& args) {
    sepsisrl::PipelineConfig config = sepsisrl::PipelineConfig::from_file(args.config_path);
    if (args.seed) {
        config.seed = *args.seed;
        config.synth.seed = *args.seed;
    }
    return sepsisrl::Pipeline(std::move(config), args.out_dir, args.force);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"offline model-based RL pipeline for ICU treatment policies"};
    app.require_subcommand(1);

    CommonArgs args;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"synth", "generate a synthetic cohort with ground truth"},
        {"ingest", "ingest an external cohort CSV"},
        {"fit-dynamics", "fit the environment model"},
        {"fit-behavior", "clone the clinician policy"},
        {"train-policy", "improve the policy over the learned model"},
        {"evaluate", "run off-policy evaluation over the blend grid"},
        {"rollout-export", "export predicted-vs-actual SOFA traces"},
    };
    for (const auto& [name, desc] : commands) add_common(app.add_subcommand(name, desc), args);

    CLI11_PARSE(app, argc, argv);

    try {
        auto pipeline = make_pipeline(args);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "synth") pipeline.synth();
        else if (cmd == "ingest") pipeline.ingest();
        else if (cmd == "fit-dynamics") pipeline.fit_dynamics();
        else if (cmd == "fit-behavior") pipeline.fit_behavior();
        else if (cmd == "train-policy") pipeline.train_policy_stage();
        else if (cmd == "evaluate") pipeline.evaluate();
        else if (cmd == "rollout-export") pipeline.rollout_export();
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return sepsisrl::exit_code_for_current_exception();
    }
}
