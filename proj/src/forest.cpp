#include "sepsisrl/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sepsisrl {

namespace {
constexpr std::uint64_t kTreeStream = 0xFE01;
} // namespace

void ForestConfig::validate() const {
    if (n_trees < 1)
        throw ConfigError("ForestConfig: n_trees must be >= 1");
    if (max_depth < 1)
        throw ConfigError("ForestConfig: max_depth must be >= 1");
    if (min_samples_leaf < 1)
        throw ConfigError("ForestConfig: min_samples_leaf must be >= 1");
    if (features_per_split == 0 || features_per_split < -1)
        throw ConfigError("ForestConfig: features_per_split must be -1 or >= 1");
}

int RegressionForest::build_node(Tree& tree, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                 std::vector<int>& samples, int begin, int end, int depth,
                                 const ForestConfig& config, int features_per_split, Rng& rng) {
    const int count = end - begin;
    double sum = 0.0, sum_sq = 0.0;
    for (int i = begin; i < end; ++i) {
        const double v = y(samples[static_cast<std::size_t>(i)]);
        sum += v;
        sum_sq += v * v;
    }
    const double mean = sum / count;
    const double sse = sum_sq - sum * sum / count;

    const int node_index = static_cast<int>(tree.size());
    tree.push_back(Node{});
    tree[static_cast<std::size_t>(node_index)].value = mean;

    if (depth >= config.max_depth || count < 2 * config.min_samples_leaf || sse <= 1e-12)
        return node_index;

    // draw candidate features without replacement (partial Fisher-Yates)
    const int d = static_cast<int>(X.cols());
    std::vector<int> features(static_cast<std::size_t>(d));
    std::iota(features.begin(), features.end(), 0);
    for (int i = 0; i < features_per_split; ++i) {
        const int j = rng.uniform_int(i, d - 1);
        std::swap(features[static_cast<std::size_t>(i)], features[static_cast<std::size_t>(j)]);
    }

    int best_feature = -1;
    double best_threshold = 0.0;
    double best_score = sse - 1e-12; // must strictly reduce the node SSE
    std::vector<int> order(samples.begin() + begin, samples.begin() + end);
    std::vector<int> best_order;
    int best_left_count = 0;

    for (int fi = 0; fi < features_per_split; ++fi) {
        const int f = features[static_cast<std::size_t>(fi)];
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            const double xa = X(a, f), xb = X(b, f);
            if (xa != xb) return xa < xb;
            return a < b;
        });
        double left_sum = 0.0, left_sq = 0.0;
        for (int i = 0; i + 1 < count; ++i) {
            const double v = y(order[static_cast<std::size_t>(i)]);
            left_sum += v;
            left_sq += v * v;
            const int nl = i + 1, nr = count - nl;
            if (nl < config.min_samples_leaf || nr < config.min_samples_leaf) continue;
            const double xl = X(order[static_cast<std::size_t>(i)], f);
            const double xr = X(order[static_cast<std::size_t>(i + 1)], f);
            if (xl == xr) continue; // no split point between equal values
            const double right_sum = sum - left_sum;
            const double right_sq = sum_sq - left_sq;
            const double score =
                (left_sq - left_sum * left_sum / nl) + (right_sq - right_sum * right_sum / nr);
            if (score < best_score) {
                best_score = score;
                best_feature = f;
                best_threshold = xl + 0.5 * (xr - xl);
                best_order = order;
                best_left_count = nl;
            }
        }
    }
    if (best_feature < 0)
        return node_index;

    std::copy(best_order.begin(), best_order.end(), samples.begin() + begin);
    tree[static_cast<std::size_t>(node_index)].feature = best_feature;
    tree[static_cast<std::size_t>(node_index)].threshold = best_threshold;
    const int left =
        build_node(tree, X, y, samples, begin, begin + best_left_count, depth + 1, config,
                   features_per_split, rng);
    const int right = build_node(tree, X, y, samples, begin + best_left_count, end, depth + 1,
                                 config, features_per_split, rng);
    tree[static_cast<std::size_t>(node_index)].left = left;
    tree[static_cast<std::size_t>(node_index)].right = right;
    return node_index;
}

RegressionForest RegressionForest::fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                       const ForestConfig& config) {
    config.validate();
    if (X.rows() != y.size())
        throw ShapeError("RegressionForest::fit: feature/target count mismatch");
    if (X.rows() < 1)
        throw InsufficientDataError("RegressionForest::fit: empty training set");

    const int n = static_cast<int>(X.rows());
    const int d = static_cast<int>(X.cols());
    const int features_per_split =
        config.features_per_split > 0
            ? std::min(config.features_per_split, d)
            : std::max(1, static_cast<int>(std::lround(std::sqrt(static_cast<double>(d)))));

    // canonical order: lexicographic over the feature row, then the target
    std::vector<int> canonical(static_cast<std::size_t>(n));
    std::iota(canonical.begin(), canonical.end(), 0);
    std::sort(canonical.begin(), canonical.end(), [&](int a, int b) {
        for (int j = 0; j < d; ++j) {
            if (X(a, j) != X(b, j)) return X(a, j) < X(b, j);
        }
        return y(a) < y(b);
    });

    RegressionForest forest;
    forest.n_features_ = d;
    forest.trees_.resize(static_cast<std::size_t>(config.n_trees));
    for (int t = 0; t < config.n_trees; ++t) {
        Rng rng = Rng::split(config.seed, kTreeStream, static_cast<std::uint64_t>(t));
        std::vector<int> samples;
        samples.reserve(static_cast<std::size_t>(n));
        if (config.bootstrap) {
            for (int i = 0; i < n; ++i)
                samples.push_back(canonical[static_cast<std::size_t>(rng.uniform_int(0, n - 1))]);
        } else {
            samples = canonical;
        }
        auto& tree = forest.trees_[static_cast<std::size_t>(t)];
        tree.reserve(64);
        build_node(tree, X, y, samples, 0, n, 0, config, features_per_split, rng);
    }
    return forest;
}

double RegressionForest::predict_one(const Eigen::VectorXd& x) const {
    if (x.size() != n_features_)
        throw ShapeError("RegressionForest::predict_one: feature dimension mismatch");
    double sum = 0.0;
    for (const auto& tree : trees_) {
        int node = 0;
        while (tree[static_cast<std::size_t>(node)].feature >= 0) {
            const auto& nd = tree[static_cast<std::size_t>(node)];
            node = x(nd.feature) <= nd.threshold ? nd.left : nd.right;
        }
        sum += tree[static_cast<std::size_t>(node)].value;
    }
    return sum / static_cast<double>(trees_.size());
}

Eigen::VectorXd RegressionForest::predict(const Eigen::MatrixXd& X) const {
    if (X.cols() != n_features_)
        throw ShapeError("RegressionForest::predict: feature dimension mismatch");
    Eigen::VectorXd out(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        double sum = 0.0;
        for (const auto& tree : trees_) {
            int node = 0;
            while (tree[static_cast<std::size_t>(node)].feature >= 0) {
                const auto& nd = tree[static_cast<std::size_t>(node)];
                node = X(i, nd.feature) <= nd.threshold ? nd.left : nd.right;
            }
            sum += tree[static_cast<std::size_t>(node)].value;
        }
        out(i) = sum / static_cast<double>(trees_.size());
    }
    return out;
}

} // namespace sepsisrl
