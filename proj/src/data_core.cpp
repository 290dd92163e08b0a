#include "sepsisrl/data_core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sepsisrl/rng.hpp"

namespace sepsisrl {

void FeatureSchema::validate() const {
    if (names.empty())
        throw ConfigError("FeatureSchema: empty feature list");
    std::set<std::string> uniq(names.begin(), names.end());
    if (uniq.size() != names.size())
        throw ConfigError("FeatureSchema: duplicate feature names");
    if (sofa_index < 0 || sofa_index >= d_raw())
        throw ConfigError("FeatureSchema: sofa_index out of range");
    if (lactate_index < 0 || lactate_index >= d_raw())
        throw ConfigError("FeatureSchema: lactate_index out of range");
    if (sofa_index == lactate_index)
        throw ConfigError("FeatureSchema: sofa_index equals lactate_index");
}

FeatureSchema FeatureSchema::default_synthetic() {
    FeatureSchema s;
    s.names = {"sofa",      "lactate",  "heart_rate", "mean_bp",   "resp_rate", "temperature",
               "wbc_count", "creatinine", "bun",      "platelets", "spo2",      "fluid_balance"};
    s.sofa_index = 0;
    s.lactate_index = 1;
    return s;
}

Observation Standardizer::apply(const Observation& obs) const {
    if (obs.size() != mean.size())
        throw ShapeError("Standardizer::apply: dimension mismatch");
    return (obs - mean).cwiseQuotient(std);
}

Observation Standardizer::invert(const Observation& obs) const {
    if (obs.size() != mean.size())
        throw ShapeError("Standardizer::invert: dimension mismatch");
    return obs.cwiseProduct(std) + mean;
}

Eigen::VectorXd Standardizer::apply_state(const Eigen::VectorXd& state) const {
    const int d = static_cast<int>(mean.size());
    if (state.size() % d != 0)
        throw ShapeError("Standardizer::apply_state: state length not a multiple of d_raw");
    Eigen::VectorXd out(state.size());
    for (int block = 0; block * d < state.size(); ++block)
        out.segment(block * d, d) = (state.segment(block * d, d) - mean).cwiseQuotient(std);
    return out;
}

double nearest_rank_quantile(std::vector<double> values, double p) {
    if (values.empty())
        throw InsufficientDataError("nearest_rank_quantile: empty sample");
    std::sort(values.begin(), values.end());
    const auto n = static_cast<double>(values.size());
    auto rank = static_cast<std::size_t>(std::ceil(p * n));
    rank = std::min(std::max<std::size_t>(rank, 1), values.size());
    return values[rank - 1];
}

ActionBins fit_action_bins(const std::vector<std::pair<double, double>>& raw_doses) {
    std::vector<double> iv, vp;
    for (const auto& [iv_dose, vp_dose] : raw_doses) {
        if (!std::isfinite(iv_dose) || !std::isfinite(vp_dose) || iv_dose < 0 || vp_dose < 0)
            throw DomainError("fit_action_bins: doses must be finite and nonnegative");
        if (iv_dose > 0) iv.push_back(iv_dose);
        if (vp_dose > 0) vp.push_back(vp_dose);
    }
    if (iv.size() < 4)
        throw InsufficientDataError("fit_action_bins: fewer than 4 nonzero IV doses");
    if (vp.size() < 4)
        throw InsufficientDataError("fit_action_bins: fewer than 4 nonzero VP doses");
    ActionBins bins;
    bins.iv_quartiles = {nearest_rank_quantile(iv, 0.25), nearest_rank_quantile(iv, 0.50),
                         nearest_rank_quantile(iv, 0.75)};
    bins.vp_quartiles = {nearest_rank_quantile(vp, 0.25), nearest_rank_quantile(vp, 0.50),
                         nearest_rank_quantile(vp, 0.75)};
    return bins;
}

int bin_dose(double dose, const std::array<double, 3>& quartiles) {
    if (!std::isfinite(dose) || dose < 0)
        throw DomainError("bin_dose: dose must be finite and nonnegative");
    if (dose == 0.0) return 0;
    if (dose <= quartiles[0]) return 1;
    if (dose <= quartiles[1]) return 2;
    if (dose <= quartiles[2]) return 3;
    return 4;
}

namespace {

const Observation& obs_at_or_first(const Trajectory& traj, int t) {
    return traj.steps[static_cast<std::size_t>(std::max(t, 0))].obs;
}

void check_timestep(const Trajectory& traj, int t, const char* op) {
    if (t < 0 || t >= traj.length())
        throw IndexError(std::string(op) + ": timestep " + std::to_string(t) +
                         " out of range for trajectory of length " + std::to_string(traj.length()));
}

} // namespace

Eigen::VectorXd build_state(const Trajectory& traj, int t) {
    check_timestep(traj, t, "build_state");
    const int d = static_cast<int>(traj.steps[0].obs.size());
    Eigen::VectorXd state(kHistoryLags * d);
    for (int lag = 0; lag < kHistoryLags; ++lag)
        state.segment(lag * d, d) = obs_at_or_first(traj, t - lag);
    return state;
}

Eigen::VectorXd build_history(const Trajectory& traj, int t) {
    check_timestep(traj, t, "build_history");
    const int d = static_cast<int>(traj.steps[0].obs.size());
    const int block = d + kNumActions;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(kHistoryLags * block);
    for (int lag = 0; lag < kHistoryLags; ++lag) {
        h.segment(lag * block, d) = obs_at_or_first(traj, t - lag);
        if (t - lag >= 0) {
            const int a = traj.steps[static_cast<std::size_t>(t - lag)].action.flat_index();
            h(lag * block + d + a) = 1.0;
        }
    }
    return h;
}

Eigen::VectorXd build_decision_history(const Trajectory& traj, int t) {
    Eigen::VectorXd h = build_history(traj, t);
    const int d = static_cast<int>(traj.steps[0].obs.size());
    h.segment(d, kNumActions).setZero();
    return h;
}

Standardizer fit_standardizer(const std::vector<Observation>& observations) {
    if (observations.empty())
        throw InsufficientDataError("fit_standardizer: empty observation list");
    const auto d = observations[0].size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const auto& obs : observations) {
        if (obs.size() != d)
            throw ShapeError("fit_standardizer: inconsistent observation dimensions");
        mean += obs;
    }
    mean /= static_cast<double>(observations.size());
    // population (biased) variance
    Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
    for (const auto& obs : observations) {
        const Eigen::VectorXd diff = obs - mean;
        var += diff.cwiseProduct(diff);
    }
    var /= static_cast<double>(observations.size());
    Standardizer st;
    st.mean = mean;
    st.std = var.cwiseSqrt();
    for (Eigen::Index i = 0; i < st.std.size(); ++i)
        if (st.std(i) <= 0.0) st.std(i) = 1.0;
    return st;
}

SplitCohort split_cohort(const Cohort& cohort, const std::array<double, 3>& fractions,
                         std::uint64_t seed) {
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0))
            throw ConfigError("split_cohort: fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("split_cohort: fractions must sum to 1");

    std::vector<std::size_t> order(cohort.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    constexpr std::uint64_t kSplitStream = 0x51u;
    Rng rng = Rng::split(seed, kSplitStream, 0);
    rng.shuffle(order);

    const auto n = cohort.size();
    std::array<std::size_t, 3> sizes{static_cast<std::size_t>(std::floor(fractions[0] * n)),
                                     static_cast<std::size_t>(std::floor(fractions[1] * n)),
                                     static_cast<std::size_t>(std::floor(fractions[2] * n))};
    std::size_t assigned = sizes[0] + sizes[1] + sizes[2];
    for (std::size_t i = 0; assigned < n; i = (i + 1) % 3) {
        ++sizes[i];
        ++assigned;
    }

    SplitCohort out;
    std::size_t pos = 0;
    auto take = [&](std::size_t count) {
        Cohort part;
        part.reserve(count);
        for (std::size_t i = 0; i < count; ++i) part.push_back(cohort[order[pos++]]);
        return part;
    };
    out.train = take(sizes[0]);
    out.val = take(sizes[1]);
    out.test = take(sizes[2]);
    return out;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

double parse_double(const std::string& s, std::size_t row, const std::string& col) {
    double v = 0.0;
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end)
        throw DataError("row " + std::to_string(row) + ": cannot parse '" + s + "' in column " + col);
    if (!std::isfinite(v))
        throw DataError("row " + std::to_string(row) + ": non-finite value in column " + col);
    return v;
}

int parse_flag(const std::string& s, std::size_t row, const std::string& col) {
    if (s == "0") return 0;
    if (s == "1") return 1;
    throw DataError("row " + std::to_string(row) + ": column " + col + " must be 0 or 1, got '" + s + "'");
}

std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace

void validate_observation(const Observation& obs, const FeatureSchema& schema,
                          const std::string& where) {
    if (obs.size() != schema.d_raw())
        throw DataError(where + ": observation length " + std::to_string(obs.size()) +
                        " does not match schema d_raw " + std::to_string(schema.d_raw()));
    if (!obs.allFinite())
        throw DataError(where + ": non-finite observation entry");
    const double sofa = obs(schema.sofa_index);
    if (sofa < 0.0 || sofa > kSofaMax)
        throw DataError(where + ": SOFA value " + format_double(sofa) + " outside [0, 24]");
    if (obs(schema.lactate_index) < 0.0)
        throw DataError(where + ": negative lactate value");
}

std::vector<Observation> collect_observations(const Cohort& cohort) {
    std::vector<Observation> out;
    for (const auto& traj : cohort)
        for (const auto& step : traj.steps) out.push_back(step.obs);
    return out;
}

Cohort read_cohort_csv(const std::string& path, const FeatureSchema& schema,
                       const std::optional<ActionBins>& bins_in) {
    schema.validate();
    std::ifstream in(path);
    if (!in)
        throw DataError("read_cohort_csv: cannot open " + path);

    std::string line;
    std::size_t row = 0;
    // skip comments before the header
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        break;
    }
    if (line.empty() || line[0] == '#')
        return {}; // empty file (possibly comments only)

    std::vector<std::string> expected = {"patient_id", "t"};
    for (const auto& n : schema.names) expected.push_back(n);
    for (const auto& n : {"iv_dose", "vp_dose", "reward", "terminal", "survived"})
        expected.push_back(n);
    const auto header = split_line(line);
    if (header != expected) {
        std::string msg = "read_cohort_csv: header mismatch at row " + std::to_string(row) + ";";
        for (std::size_t i = 0; i < std::max(header.size(), expected.size()); ++i) {
            const std::string got = i < header.size() ? header[i] : "<missing>";
            const std::string want = i < expected.size() ? expected[i] : "<extra>";
            if (got != want) {
                msg += " column " + std::to_string(i) + ": expected '" + want + "', got '" + got + "'";
                break;
            }
        }
        throw DataError(msg);
    }

    struct RawRow {
        std::string patient_id;
        int t;
        Observation obs;
        double iv_dose, vp_dose, reward;
        bool terminal, survived;
        std::size_t row;
    };
    std::vector<RawRow> rows;
    const std::size_t ncols = expected.size();
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto fields = split_line(line);
        if (fields.size() != ncols)
            throw DataError("row " + std::to_string(row) + ": expected " + std::to_string(ncols) +
                            " columns, got " + std::to_string(fields.size()));
        RawRow r;
        r.patient_id = fields[0];
        r.t = static_cast<int>(parse_double(fields[1], row, "t"));
        r.obs = Observation(schema.d_raw());
        for (int i = 0; i < schema.d_raw(); ++i)
            r.obs(i) = parse_double(fields[2 + i], row, schema.names[i]);
        validate_observation(r.obs, schema, "row " + std::to_string(row));
        std::size_t base = 2 + schema.names.size();
        r.iv_dose = parse_double(fields[base + 0], row, "iv_dose");
        r.vp_dose = parse_double(fields[base + 1], row, "vp_dose");
        if (r.iv_dose < 0 || r.vp_dose < 0)
            throw DataError("row " + std::to_string(row) + ": negative dose");
        r.reward = parse_double(fields[base + 2], row, "reward");
        r.terminal = parse_flag(fields[base + 3], row, "terminal") != 0;
        r.survived = parse_flag(fields[base + 4], row, "survived") != 0;
        r.row = row;
        rows.push_back(std::move(r));
    }
    if (rows.empty()) return {};

    ActionBins bins;
    if (bins_in) {
        bins = *bins_in;
    } else {
        std::vector<double> iv, vp;
        for (const auto& r : rows) {
            if (r.iv_dose > 0) iv.push_back(r.iv_dose);
            if (r.vp_dose > 0) vp.push_back(r.vp_dose);
        }
        auto quartiles_for = [&](std::vector<double>& doses, const char* drug) {
            if (doses.empty())
                return std::array<double, 3>{1.0, 1.0, 1.0}; // drug never given; bins unused
            if (doses.size() < 4)
                throw InsufficientDataError(std::string("read_cohort_csv: fewer than 4 nonzero ") +
                                            drug + " doses; supply ActionBins explicitly");
            return std::array<double, 3>{nearest_rank_quantile(doses, 0.25),
                                         nearest_rank_quantile(doses, 0.50),
                                         nearest_rank_quantile(doses, 0.75)};
        };
        bins.iv_quartiles = quartiles_for(iv, "IV");
        bins.vp_quartiles = quartiles_for(vp, "VP");
    }

    Cohort cohort;
    Trajectory current;
    int expected_t = 0;
    auto flush = [&]() {
        if (current.steps.empty()) return;
        if (!current.steps.back().is_terminal)
            throw DataError("read_cohort_csv: trajectory " + current.patient_id +
                            " does not end with terminal = 1");
        cohort.push_back(std::move(current));
        current = Trajectory{};
    };
    for (const auto& r : rows) {
        if (current.steps.empty() || r.patient_id != current.patient_id) {
            flush();
            current.patient_id = r.patient_id;
            current.survived = r.survived;
            expected_t = 0;
        }
        if (r.t != expected_t)
            throw DataError("row " + std::to_string(r.row) + ": expected t = " +
                            std::to_string(expected_t) + " for patient " + r.patient_id +
                            ", got " + std::to_string(r.t));
        if (r.survived != current.survived)
            throw DataError("row " + std::to_string(r.row) + ": inconsistent survived flag for patient " +
                            r.patient_id);
        if (!current.steps.empty() && current.steps.back().is_terminal)
            throw DataError("row " + std::to_string(r.row) + ": step after terminal for patient " +
                            r.patient_id);
        Step step;
        step.obs = r.obs;
        step.iv_dose = r.iv_dose;
        step.vp_dose = r.vp_dose;
        step.action = Action{bin_dose(r.iv_dose, bins.iv_quartiles), bin_dose(r.vp_dose, bins.vp_quartiles)};
        step.reward = r.reward;
        step.is_terminal = r.terminal;
        current.steps.push_back(std::move(step));
        ++expected_t;
    }
    flush();
    return cohort;
}

void write_cohort_csv(const Cohort& cohort, const FeatureSchema& schema,
                      const std::string& path, const std::string& comment) {
    schema.validate();
    std::ofstream out(path);
    if (!out)
        throw DataError("write_cohort_csv: cannot open " + path + " for writing");
    if (!comment.empty()) out << "# " << comment << "\n";
    out << "patient_id,t";
    for (const auto& n : schema.names) out << "," << n;
    out << ",iv_dose,vp_dose,reward,terminal,survived\n";
    for (const auto& traj : cohort) {
        for (int t = 0; t < traj.length(); ++t) {
            const auto& s = traj.steps[static_cast<std::size_t>(t)];
            out << traj.patient_id << "," << t;
            for (int i = 0; i < schema.d_raw(); ++i) out << "," << format_double(s.obs(i));
            out << "," << format_double(s.iv_dose) << "," << format_double(s.vp_dose) << ","
                << format_double(s.reward) << "," << (s.is_terminal ? 1 : 0) << ","
                << (traj.survived ? 1 : 0) << "\n";
        }
    }
    if (!out)
        throw DataError("write_cohort_csv: write failure on " + path);
}

FeatureSchema read_schema_json(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("read_schema_json: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("read_schema_json: " + std::string(e.what()));
    }
    FeatureSchema s;
    try {
        s.names = j.at("names").get<std::vector<std::string>>();
        s.sofa_index = j.at("sofa_index").get<int>();
        s.lactate_index = j.at("lactate_index").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("read_schema_json: " + std::string(e.what()));
    }
    s.validate();
    return s;
}

void write_schema_json(const FeatureSchema& schema, const std::string& path) {
    schema.validate();
    nlohmann::json j;
    j["names"] = schema.names;
    j["sofa_index"] = schema.sofa_index;
    j["lactate_index"] = schema.lactate_index;
    std::ofstream out(path);
    if (!out)
        throw DataError("write_schema_json: cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

} // namespace sepsisrl
