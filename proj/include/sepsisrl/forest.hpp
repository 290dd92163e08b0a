#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "sepsisrl/errors.hpp"
#include "sepsisrl/rng.hpp"

namespace sepsisrl {

struct ForestConfig {
    int n_trees = 80;
    int max_depth = 12;
    int min_samples_leaf = 5;
    bool bootstrap = true;
    int features_per_split = -1; // -1 = round(sqrt(n_features))
    std::uint64_t seed = 0;

    void validate() const;
};

/// Variance-reduction CART regression forest. Samples are canonicalized by a
/// lexicographic sort before fitting, so predictions depend only on the data
/// multiset and the seed, not on input order.
class RegressionForest {
public:
    static RegressionForest fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                const ForestConfig& config);

    double predict_one(const Eigen::VectorXd& x) const;
    Eigen::VectorXd predict(const Eigen::MatrixXd& X) const;

    int n_trees() const { return static_cast<int>(trees_.size()); }
    Eigen::Index n_features() const { return n_features_; }

private:
    struct Node {
        int feature = -1; // -1 marks a leaf
        double threshold = 0.0;
        int left = -1;
        int right = -1;
        double value = 0.0;
    };
    using Tree = std::vector<Node>;

    static int build_node(Tree& tree, const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          std::vector<int>& samples, int begin, int end, int depth,
                          const ForestConfig& config, int features_per_split, Rng& rng);

    std::vector<Tree> trees_;
    Eigen::Index n_features_ = 0;
};

} // namespace sepsisrl
