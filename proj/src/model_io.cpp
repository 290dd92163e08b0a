#include "sepsisrl/model_io.hpp"

#include <fstream>

#include "sepsisrl/hash.hpp"

namespace sepsisrl {

using nlohmann::json;

json wrap_model(const std::string& kind, json payload) {
    json doc;
    doc["format_version"] = kModelFormatVersion;
    doc["kind"] = kind;
    doc["checksum"] = sha256_hex(payload.dump());
    doc["payload"] = std::move(payload);
    return doc;
}

json unwrap_model(const json& doc, const std::string& kind) {
    if (!doc.is_object() || !doc.contains("format_version") || !doc.contains("kind") ||
        !doc.contains("checksum") || !doc.contains("payload"))
        throw DataError("unwrap_model: missing envelope fields (version/checksum validation failed)");
    if (doc["format_version"].get<int>() != kModelFormatVersion)
        throw DataError("unwrap_model: unsupported format_version " +
                        doc["format_version"].dump());
    if (doc["kind"].get<std::string>() != kind)
        throw DataError("unwrap_model: expected kind '" + kind + "', found '" +
                        doc["kind"].get<std::string>() + "'");
    const std::string expected = sha256_hex(doc["payload"].dump());
    if (doc["checksum"].get<std::string>() != expected)
        throw DataError("unwrap_model: checksum mismatch, artifact is corrupted");
    return doc["payload"];
}

json to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

json to_json(const Eigen::VectorXd& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
    if (!j.is_array() || j.empty())
        throw DataError("matrix_from_json: expected a nonempty array of rows");
    const auto rows = j.size();
    const auto cols = j[0].size();
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (j[r].size() != cols)
            throw DataError("matrix_from_json: ragged rows");
        for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
    return m;
}

Eigen::VectorXd vector_from_json(const json& j) {
    if (!j.is_array())
        throw DataError("vector_from_json: expected an array");
    Eigen::VectorXd v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}

json standardizer_to_json(const Standardizer& st) {
    return json{{"mean", to_json(st.mean)}, {"std", to_json(st.std)}};
}

Standardizer standardizer_from_json(const json& j) {
    Standardizer st;
    st.mean = vector_from_json(j.at("mean"));
    st.std = vector_from_json(j.at("std"));
    if (st.mean.size() != st.std.size() || (st.std.array() <= 0).any())
        throw DataError("standardizer_from_json: invalid standardizer");
    return st;
}

json schema_to_json(const FeatureSchema& schema) {
    return json{{"names", schema.names},
                {"sofa_index", schema.sofa_index},
                {"lactate_index", schema.lactate_index}};
}

FeatureSchema schema_from_json(const json& j) {
    FeatureSchema s;
    s.names = j.at("names").get<std::vector<std::string>>();
    s.sofa_index = j.at("sofa_index").get<int>();
    s.lactate_index = j.at("lactate_index").get<int>();
    s.validate();
    return s;
}

json mlp_to_json(const nn::Mlp& net) {
    json j;
    j["dims"] = net.dims;
    j["batch_norm"] = net.batch_norm;
    json layers = json::array();
    for (const auto& d : net.dense)
        layers.push_back(json{{"weight", to_json(d.weight)}, {"bias", to_json(d.bias)}});
    j["dense"] = std::move(layers);
    if (net.batch_norm) {
        json bn = json::array();
        for (const auto& b : net.bn)
            bn.push_back(json{{"gamma", to_json(b.gamma)},
                              {"beta", to_json(b.beta)},
                              {"running_mean", to_json(b.running_mean)},
                              {"running_var", to_json(b.running_var)}});
        j["batch_norm_layers"] = std::move(bn);
    }
    return j;
}

nn::Mlp mlp_from_json(const json& j) {
    nn::Mlp net;
    net.dims = j.at("dims").get<std::vector<int>>();
    net.batch_norm = j.at("batch_norm").get<bool>();
    for (const auto& layer : j.at("dense")) {
        nn::Dense d;
        d.weight = matrix_from_json(layer.at("weight"));
        d.bias = vector_from_json(layer.at("bias"));
        net.dense.push_back(std::move(d));
    }
    if (net.batch_norm) {
        for (const auto& layer : j.at("batch_norm_layers")) {
            nn::BatchNorm b;
            b.gamma = vector_from_json(layer.at("gamma"));
            b.beta = vector_from_json(layer.at("beta"));
            b.running_mean = vector_from_json(layer.at("running_mean"));
            b.running_var = vector_from_json(layer.at("running_var"));
            if ((b.running_var.array() <= 0).any())
                throw DataError("mlp_from_json: nonpositive running variance");
            net.bn.push_back(std::move(b));
        }
    }
    if (net.dense.size() + 1 != net.dims.size())
        throw DataError("mlp_from_json: layer count does not match dims");
    return net;
}

json action_bins_to_json(const ActionBins& bins) {
    return json{{"iv_quartiles", bins.iv_quartiles}, {"vp_quartiles", bins.vp_quartiles}};
}

ActionBins action_bins_from_json(const json& j) {
    ActionBins bins;
    bins.iv_quartiles = j.at("iv_quartiles").get<std::array<double, 3>>();
    bins.vp_quartiles = j.at("vp_quartiles").get<std::array<double, 3>>();
    return bins;
}

json synth_config_to_json(const SynthConfig& cfg) {
    return json{{"n_patients", cfg.n_patients},
                {"max_horizon", cfg.max_horizon},
                {"severity_drift", cfg.severity_drift},
                {"treatment_effect", to_json(cfg.treatment_effect)},
                {"noise_std", cfg.noise_std},
                {"clinician_temperature", cfg.clinician_temperature},
                {"mortality_slope", cfg.mortality_slope},
                {"mortality_intercept", cfg.mortality_intercept},
                {"seed", cfg.seed},
                {"discharge_on_recovery", cfg.discharge_on_recovery}};
}

SynthConfig synth_config_from_json(const json& j) {
    SynthConfig cfg;
    cfg.n_patients = j.at("n_patients").get<int>();
    cfg.max_horizon = j.at("max_horizon").get<int>();
    cfg.severity_drift = j.at("severity_drift").get<double>();
    cfg.treatment_effect = matrix_from_json(j.at("treatment_effect"));
    cfg.noise_std = j.at("noise_std").get<double>();
    cfg.clinician_temperature = j.at("clinician_temperature").get<double>();
    cfg.mortality_slope = j.at("mortality_slope").get<double>();
    cfg.mortality_intercept = j.at("mortality_intercept").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.discharge_on_recovery = j.at("discharge_on_recovery").get<bool>();
    cfg.validate();
    return cfg;
}

void save_dynamics(const FittedDynamics& dyn, const std::string& path,
                   const std::string& config_hash, std::uint64_t seed) {
    json payload;
    payload["config_hash"] = config_hash;
    payload["seed"] = seed;
    payload["standardizer"] = standardizer_to_json(dyn.standardizer);
    payload["schema"] = schema_to_json(dyn.schema);
    if (std::holds_alternative<LinearDynamics>(dyn.model)) {
        const auto& lin = std::get<LinearDynamics>(dyn.model);
        payload["model_type"] = "linear";
        payload["linear"] = json{{"weights", to_json(lin.weights)},
                                 {"bias", to_json(lin.bias)},
                                 {"ridge_lambda", lin.ridge_lambda}};
    } else {
        payload["model_type"] = "mlp";
        payload["mlp"] = mlp_to_json(std::get<MlpDynamics>(dyn.model).net);
    }
    write_json_file(wrap_model("dynamics_model", std::move(payload)), path);
}

FittedDynamics load_dynamics(const std::string& path, std::string* config_hash_out) {
    const json payload = unwrap_model(read_json_file(path), "dynamics_model");
    FittedDynamics dyn;
    dyn.standardizer = standardizer_from_json(payload.at("standardizer"));
    dyn.schema = schema_from_json(payload.at("schema"));
    const std::string type = payload.at("model_type").get<std::string>();
    if (type == "linear") {
        LinearDynamics lin;
        lin.weights = matrix_from_json(payload.at("linear").at("weights"));
        lin.bias = vector_from_json(payload.at("linear").at("bias"));
        lin.ridge_lambda = payload.at("linear").at("ridge_lambda").get<double>();
        dyn.model = std::move(lin);
    } else if (type == "mlp") {
        MlpDynamics mlp;
        mlp.net = mlp_from_json(payload.at("mlp"));
        dyn.model = std::move(mlp);
    } else {
        throw DataError("load_dynamics: unknown model_type '" + type + "'");
    }
    if (config_hash_out) *config_hash_out = payload.value("config_hash", "");
    return dyn;
}

void save_policy(const NetworkPolicy& policy, const std::string& path, const std::string& flavor,
                 const std::string& config_hash, std::uint64_t seed, double l2) {
    json payload;
    payload["config_hash"] = config_hash;
    payload["seed"] = seed;
    payload["flavor"] = flavor;
    payload["l2"] = l2;
    payload["standardizer"] = standardizer_to_json(policy.standardizer());
    payload["schema"] = schema_to_json(policy.schema());
    payload["net"] = mlp_to_json(policy.policy_net().net);
    write_json_file(wrap_model("policy_model", std::move(payload)), path);
}

NetworkPolicy load_policy(const std::string& path, std::string* config_hash_out,
                          std::string* flavor_out) {
    const json payload = unwrap_model(read_json_file(path), "policy_model");
    PolicyNet net;
    net.net = mlp_from_json(payload.at("net"));
    net.l2 = payload.value("l2", 1e-4);
    if (config_hash_out) *config_hash_out = payload.value("config_hash", "");
    if (flavor_out) *flavor_out = payload.value("flavor", "");
    return NetworkPolicy(std::move(net), standardizer_from_json(payload.at("standardizer")),
                         schema_from_json(payload.at("schema")));
}

namespace {

json diagnostics_to_json(const OpeDiagnostics& d) {
    json groups = json::array();
    for (const auto& g : d.groups)
        groups.push_back(json{{"horizon", g.horizon},
                              {"count", g.count},
                              {"weight_sum", g.weight_sum},
                              {"ess", g.ess},
                              {"dropped", g.dropped}});
    return json{{"groups", std::move(groups)},
                {"clip_fraction", d.clip_fraction},
                {"dropped_groups", d.dropped_groups}};
}

} // namespace

json ope_report_to_json(const OpeReport& report) {
    json j;
    j["phwis"] = report.phwis;
    j["phwdr"] = report.phwdr;
    j["am"] = report.am;
    j["ess"] = report.ess;
    j["phwis_diagnostics"] = diagnostics_to_json(report.phwis_diagnostics);
    j["phwdr_diagnostics"] = diagnostics_to_json(report.phwdr_diagnostics);
    j["config"] = json{{"gamma", report.config.gamma},
                       {"k", report.config.k},
                       {"alpha", report.config.alpha},
                       {"clip_max", report.config.clip_max},
                       {"fqi_iterations", report.config.fqi_iterations},
                       {"forest",
                        json{{"n_trees", report.config.forest.n_trees},
                             {"max_depth", report.config.forest.max_depth},
                             {"min_samples_leaf", report.config.forest.min_samples_leaf},
                             {"bootstrap", report.config.forest.bootstrap},
                             {"features_per_split", report.config.forest.features_per_split}}},
                       {"seed", report.config.seed},
                       {"sofa_low_max", report.config.sofa_low_max},
                       {"sofa_high_min", report.config.sofa_high_min}};
    return j;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DependencyError("read_json_file: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("read_json_file: " + path + ": " + e.what());
    }
    return j;
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw DataError("write_json_file: cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
    if (!out)
        throw DataError("write_json_file: write failure on " + path);
}

} // namespace sepsisrl
