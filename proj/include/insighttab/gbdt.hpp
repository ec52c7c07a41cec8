#pragma once

#include "insighttab/dataset.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace insighttab {

struct Hyperparams {
    int rounds = 100;
    double learning_rate = 0.3;
    int max_depth = 6;
    double reg_lambda = 1.0;
    double gamma = 0.0;
    double min_child_weight = 1.0;

    void validate() const;
    friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

struct TreeNode {
    // -1 marks a leaf.
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    // Leaf output, already scaled by the learning rate.
    double weight = 0.0;
    int leaf_id = -1;
    // Split gain (after the gamma penalty) for internal nodes.
    double gain = 0.0;

    bool is_leaf() const noexcept { return feature < 0; }
    friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

// Binary regression tree. Routing: value < threshold goes left. Node 0 is
// the root; leaf ids are assigned 0..F-1 in left-first depth-first order.
class DecisionTree {
public:
    DecisionTree() : nodes_{TreeNode{-1, 0.0, -1, -1, 0.0, 0, 0.0}} {}
    explicit DecisionTree(std::vector<TreeNode> nodes);

    const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
    std::size_t leaf_count() const noexcept { return leaf_count_; }
    int depth() const;

    const TreeNode& leaf_for(std::span<const double> x) const;
    int leaf_index(std::span<const double> x) const { return leaf_for(x).leaf_id; }
    double predict(std::span<const double> x) const { return leaf_for(x).weight; }

    friend bool operator==(const DecisionTree& a, const DecisionTree& b) { return a.nodes_ == b.nodes_; }

private:
    std::vector<TreeNode> nodes_;
    std::size_t leaf_count_ = 1;
};

// Softmax-objective boosted ensemble: one tree per class per round.
class GbdtModel {
public:
    GbdtModel() = default;
    GbdtModel(std::size_t class_count, OrdinalEncoding encoding, Hyperparams params, double base_score = 0.5);

    std::size_t class_count() const noexcept { return class_count_; }
    std::size_t round_count() const noexcept { return trees_.size(); }
    double base_score() const noexcept { return base_score_; }
    const Hyperparams& params() const noexcept { return params_; }
    const OrdinalEncoding& encoding() const noexcept { return encoding_; }
    const std::vector<std::vector<DecisionTree>>& trees() const noexcept { return trees_; }

    // The tree used for grouping: class 0 of round 0.
    const DecisionTree& first_tree() const;

    void add_round(std::vector<DecisionTree> per_class);

    std::vector<double> margins(std::span<const double> encoded) const;
    std::vector<double> predict_proba(std::span<const double> encoded) const;
    std::vector<double> predict_proba(const Row& row) const { return predict_proba(encoding_.encode_row(row.features)); }
    std::size_t predict(std::span<const double> encoded) const;

    nlohmann::json to_json() const;
    static GbdtModel from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static GbdtModel load(const std::filesystem::path& path);

private:
    std::size_t class_count_ = 0;
    double base_score_ = 0.5;
    Hyperparams params_;
    OrdinalEncoding encoding_;
    std::vector<std::vector<DecisionTree>> trees_;
};

// Per-round training cross-entropy, recorded when requested.
struct FitTrace {
    std::vector<double> loss;
};

GbdtModel fit(const LabeledDataset& train, const Hyperparams& params = {}, std::uint64_t seed = 0,
              FitTrace* trace = nullptr);

std::vector<double> softmax(std::span<const double> margins);

// Natural-log entropy with 0 ln 0 = 0.
double entropy(std::span<const double> probabilities);

int leaf_index(const DecisionTree& tree, std::span<const double> encoded);

struct Grouping {
    // Row indices into the training set, one group per non-empty leaf in leaf-id order.
    std::vector<std::vector<std::size_t>> groups;
    std::vector<int> leaf_ids;
    std::vector<std::string> notes;
};

Grouping group_by_first_tree(const GbdtModel& model, const LabeledDataset& train);

std::vector<double> entropy_scores(const GbdtModel& model, const LabeledDataset& train);

enum class RankDirection { lowest, highest };

// Indices of the k most extreme scores; ties go to the smaller index. The
// result is sorted by index.
std::vector<std::size_t> rank_select(std::span<const double> scores, std::size_t k, RankDirection direction);

// max(1, floor(0.5 * n)).
std::size_t default_hard_count(std::size_t n);

}  // namespace insighttab
