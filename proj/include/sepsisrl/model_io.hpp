#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "sepsisrl/cohort_synth.hpp"
#include "sepsisrl/dynamics.hpp"
#include "sepsisrl/ope.hpp"
#include "sepsisrl/policy_opt.hpp"

namespace sepsisrl {

inline constexpr int kModelFormatVersion = 1;

/// Versioned envelope around a model payload:
///   {"format_version", "kind", "checksum": sha256(payload dump), "payload"}
nlohmann::json wrap_model(const std::string& kind, nlohmann::json payload);

/// Validates version, kind and checksum; throws DataError on any mismatch.
nlohmann::json unwrap_model(const nlohmann::json& doc, const std::string& kind);

nlohmann::json to_json(const Eigen::MatrixXd& m);
nlohmann::json to_json(const Eigen::VectorXd& v);
Eigen::MatrixXd matrix_from_json(const nlohmann::json& j);
Eigen::VectorXd vector_from_json(const nlohmann::json& j);

nlohmann::json standardizer_to_json(const Standardizer& st);
Standardizer standardizer_from_json(const nlohmann::json& j);

nlohmann::json schema_to_json(const FeatureSchema& schema);
FeatureSchema schema_from_json(const nlohmann::json& j);

nlohmann::json mlp_to_json(const nn::Mlp& net);
nn::Mlp mlp_from_json(const nlohmann::json& j);

nlohmann::json action_bins_to_json(const ActionBins& bins);
ActionBins action_bins_from_json(const nlohmann::json& j);

nlohmann::json synth_config_to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

/// Dynamics artifact: delta model + standardizer + schema, "dynamics_model" kind.
void save_dynamics(const FittedDynamics& dyn, const std::string& path,
                   const std::string& config_hash, std::uint64_t seed);
FittedDynamics load_dynamics(const std::string& path,
                             std::string* config_hash_out = nullptr);

/// Policy artifact: network + standardizer + schema, "policy_model" kind.
/// `flavor` records how it was produced (bc, ppo, pg).
void save_policy(const NetworkPolicy& policy, const std::string& path, const std::string& flavor,
                 const std::string& config_hash, std::uint64_t seed, double l2);
NetworkPolicy load_policy(const std::string& path, std::string* config_hash_out = nullptr,
                          std::string* flavor_out = nullptr);

nlohmann::json ope_report_to_json(const OpeReport& report);

nlohmann::json read_json_file(const std::string& path);
void write_json_file(const nlohmann::json& j, const std::string& path);

} // namespace sepsisrl
