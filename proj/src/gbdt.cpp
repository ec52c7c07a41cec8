#include "insighttab/gbdt.hpp"

#include "insighttab/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace insighttab {

namespace {

constexpr int kModelFormatVersion = 1;
constexpr double kMinHessian = 1e-16;

class TreeBuilder {
public:
    TreeBuilder(const Matrix& x, std::span<const double> grad, std::span<const double> hess, const Hyperparams& params)
        : x_(x), grad_(grad), hess_(hess), params_(params) {}

    DecisionTree build() {
        std::vector<std::size_t> all(x_.rows);
        std::iota(all.begin(), all.end(), std::size_t{0});
        grow(all, 0);
        return DecisionTree(std::move(nodes_));
    }

private:
    struct Candidate {
        int feature = -1;
        double threshold = 0.0;
        double gain = 0.0;
    };

    double score(double g, double h) const { return g * g / (h + params_.reg_lambda); }

    Candidate best_split(std::vector<std::size_t>& idx, double g_total, double h_total) const {
        Candidate best;
        const double parent = score(g_total, h_total);
        for (std::size_t j = 0; j < x_.cols; ++j) {
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::size_t a, std::size_t b) { return x_.at(a, j) < x_.at(b, j); });
            double gl = 0.0, hl = 0.0;
            for (std::size_t k = 1; k < idx.size(); ++k) {
                gl += grad_[idx[k - 1]];
                hl += hess_[idx[k - 1]];
                const double lo = x_.at(idx[k - 1], j);
                const double hi = x_.at(idx[k], j);
                if (!(lo < hi)) continue;
                const double gr = g_total - gl;
                const double hr = h_total - hl;
                if (hl < params_.min_child_weight || hr < params_.min_child_weight) continue;
                const double gain = 0.5 * (score(gl, hl) + score(gr, hr) - parent) - params_.gamma;
                if (gain > best.gain) {
                    double mid = lo + (hi - lo) / 2.0;
                    if (!(mid > lo)) mid = hi;
                    best = {static_cast<int>(j), mid, gain};
                }
            }
        }
        return best;
    }

    int grow(std::vector<std::size_t>& idx, int depth) {
        double g = 0.0, h = 0.0;
        for (auto i : idx) {
            g += grad_[i];
            h += hess_[i];
        }
        const int self = static_cast<int>(nodes_.size());
        nodes_.emplace_back();

        Candidate split;
        if (depth < params_.max_depth && idx.size() > 1) split = best_split(idx, g, h);
        if (split.feature < 0) {
            auto& leaf = nodes_[static_cast<std::size_t>(self)];
            leaf.weight = -g / (h + params_.reg_lambda) * params_.learning_rate;
            leaf.leaf_id = next_leaf_++;
            return self;
        }

        std::vector<std::size_t> left, right;
        for (auto i : idx) (x_.at(i, static_cast<std::size_t>(split.feature)) < split.threshold ? left : right).push_back(i);
        const int l = grow(left, depth + 1);
        const int r = grow(right, depth + 1);
        auto& node = nodes_[static_cast<std::size_t>(self)];
        node.feature = split.feature;
        node.threshold = split.threshold;
        node.gain = split.gain;
        node.left = l;
        node.right = r;
        return self;
    }

    const Matrix& x_;
    std::span<const double> grad_;
    std::span<const double> hess_;
    const Hyperparams& params_;
    std::vector<TreeNode> nodes_;
    int next_leaf_ = 0;
};

nlohmann::json encoding_to_json(const OrdinalEncoding& enc) {
    auto cols = nlohmann::json::array();
    for (const auto& c : enc.columns()) {
        cols.push_back({{"name", c.name},
                        {"kind", std::string(to_string(c.kind))},
                        {"tokens", c.tokens},
                        {"impute", c.impute}});
    }
    return {{"missing_code", OrdinalEncoding::kMissingCode}, {"columns", cols}};
}

OrdinalEncoding encoding_from_json(const nlohmann::json& j) {
    std::vector<ColumnEncoding> cols;
    for (const auto& c : j.at("columns")) {
        ColumnEncoding col;
        col.name = c.at("name").get<std::string>();
        col.kind = c.at("kind").get<std::string>() == "categorical" ? FeatureKind::categorical : FeatureKind::numeric;
        col.tokens = c.at("tokens").get<std::vector<std::string>>();
        col.impute = c.at("impute").get<double>();
        cols.push_back(std::move(col));
    }
    return OrdinalEncoding(std::move(cols));
}

double cross_entropy(const Matrix& margins, const LabeledDataset& train) {
    double loss = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto p = softmax(margins.row(i));
        loss -= std::log(std::max(p[train.rows[i].label], 1e-300));
    }
    return loss / static_cast<double>(train.size());
}

}  // namespace

void Hyperparams::validate() const {
    if (rounds < 1) throw ArgumentError("rounds must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw ArgumentError("learning_rate must be in (0, 1]");
    if (max_depth < 1) throw ArgumentError("max_depth must be >= 1");
    if (reg_lambda < 0.0) throw ArgumentError("reg_lambda must be >= 0");
    if (gamma < 0.0) throw ArgumentError("gamma must be >= 0");
    if (min_child_weight < 0.0) throw ArgumentError("min_child_weight must be >= 0");
}

// ---------------------------------------------------------------------------
// DecisionTree

DecisionTree::DecisionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.empty()) throw ArgumentError("tree needs at least one node");
    std::vector<int> seen(nodes_.size(), 0);
    std::vector<int> leaf_ids;
    std::vector<int> stack{0};
    while (!stack.empty()) {
        const int n = stack.back();
        stack.pop_back();
        if (n < 0 || static_cast<std::size_t>(n) >= nodes_.size() || seen[static_cast<std::size_t>(n)]++)
            throw ArgumentError("tree nodes do not form a proper binary tree");
        const auto& node = nodes_[static_cast<std::size_t>(n)];
        if (node.is_leaf()) {
            leaf_ids.push_back(node.leaf_id);
        } else {
            stack.push_back(node.right);
            stack.push_back(node.left);
        }
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw ArgumentError("tree has unreachable nodes");
    for (std::size_t i = 0; i < leaf_ids.size(); ++i)
        if (leaf_ids[i] != static_cast<int>(i)) throw ArgumentError("leaf ids must be 0..F-1 in depth-first order");
    leaf_count_ = leaf_ids.size();
}

int DecisionTree::depth() const {
    std::vector<std::pair<int, int>> stack{{0, 0}};
    int deepest = 0;
    while (!stack.empty()) {
        const auto [n, d] = stack.back();
        stack.pop_back();
        deepest = std::max(deepest, d);
        const auto& node = nodes_[static_cast<std::size_t>(n)];
        if (!node.is_leaf()) {
            stack.emplace_back(node.left, d + 1);
            stack.emplace_back(node.right, d + 1);
        }
    }
    return deepest;
}

const TreeNode& DecisionTree::leaf_for(std::span<const double> x) const {
    const TreeNode* node = &nodes_.front();
    while (!node->is_leaf()) {
        const auto f = static_cast<std::size_t>(node->feature);
        if (f >= x.size()) throw ShapeError("row is narrower than the tree's split features");
        node = &nodes_[static_cast<std::size_t>(x[f] < node->threshold ? node->left : node->right)];
    }
    return *node;
}

int leaf_index(const DecisionTree& tree, std::span<const double> encoded) { return tree.leaf_index(encoded); }

// ---------------------------------------------------------------------------
// GbdtModel

GbdtModel::GbdtModel(std::size_t class_count, OrdinalEncoding encoding, Hyperparams params, double base_score)
    : class_count_(class_count), base_score_(base_score), params_(params), encoding_(std::move(encoding)) {
    if (class_count_ < 1) throw ArgumentError("model needs at least one class");
}

const DecisionTree& GbdtModel::first_tree() const {
    if (trees_.empty()) throw ArgumentError("model has no trees");
    return trees_.front().front();
}

void GbdtModel::add_round(std::vector<DecisionTree> per_class) {
    if (per_class.size() != class_count_) throw ShapeError("a round needs exactly one tree per class");
    trees_.push_back(std::move(per_class));
}

std::vector<double> GbdtModel::margins(std::span<const double> encoded) const {
    if (encoded.size() != encoding_.width())
        throw ShapeError("row has " + std::to_string(encoded.size()) + " features, model expects " +
                         std::to_string(encoding_.width()));
    std::vector<double> m(class_count_, base_score_);
    for (const auto& round : trees_)
        for (std::size_t c = 0; c < class_count_; ++c) m[c] += round[c].predict(encoded);
    return m;
}

std::vector<double> GbdtModel::predict_proba(std::span<const double> encoded) const { return softmax(margins(encoded)); }

std::size_t GbdtModel::predict(std::span<const double> encoded) const {
    const auto p = predict_proba(encoded);
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

nlohmann::json GbdtModel::to_json() const {
    auto rounds = nlohmann::json::array();
    for (const auto& round : trees_) {
        auto per_class = nlohmann::json::array();
        for (const auto& tree : round) {
            auto nodes = nlohmann::json::array();
            for (const auto& n : tree.nodes()) {
                if (n.is_leaf())
                    nodes.push_back({{"leaf", n.leaf_id}, {"weight", n.weight}});
                else
                    nodes.push_back({{"feature", n.feature},
                                     {"threshold", n.threshold},
                                     {"left", n.left},
                                     {"right", n.right},
                                     {"gain", n.gain}});
            }
            per_class.push_back(std::move(nodes));
        }
        rounds.push_back(std::move(per_class));
    }
    return {{"format", "insighttab-gbdt"},
            {"version", kModelFormatVersion},
            {"class_count", class_count_},
            {"base_score", base_score_},
            {"params",
             {{"rounds", params_.rounds},
              {"learning_rate", params_.learning_rate},
              {"max_depth", params_.max_depth},
              {"reg_lambda", params_.reg_lambda},
              {"gamma", params_.gamma},
              {"min_child_weight", params_.min_child_weight}}},
            {"encoding", encoding_to_json(encoding_)},
            {"trees", std::move(rounds)}};
}

GbdtModel GbdtModel::from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "insighttab-gbdt") throw ConfigError("not a model file");
        if (j.at("version").get<int>() != kModelFormatVersion)
            throw ConfigError("unsupported model version " + j.at("version").dump());
        const auto& p = j.at("params");
        Hyperparams params{p.at("rounds").get<int>(),         p.at("learning_rate").get<double>(),
                           p.at("max_depth").get<int>(),      p.at("reg_lambda").get<double>(),
                           p.at("gamma").get<double>(),       p.at("min_child_weight").get<double>()};
        GbdtModel model(j.at("class_count").get<std::size_t>(), encoding_from_json(j.at("encoding")), params,
                        j.at("base_score").get<double>());
        for (const auto& round : j.at("trees")) {
            std::vector<DecisionTree> per_class;
            for (const auto& tree : round) {
                std::vector<TreeNode> nodes;
                for (const auto& n : tree) {
                    TreeNode node;
                    if (n.contains("leaf")) {
                        node.leaf_id = n.at("leaf").get<int>();
                        node.weight = n.at("weight").get<double>();
                    } else {
                        node.feature = n.at("feature").get<int>();
                        node.threshold = n.at("threshold").get<double>();
                        node.left = n.at("left").get<int>();
                        node.right = n.at("right").get<int>();
                        node.gain = n.value("gain", 0.0);
                    }
                    nodes.push_back(node);
                }
                per_class.emplace_back(std::move(nodes));
            }
            model.add_round(std::move(per_class));
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model file: ") + e.what());
    }
}

void GbdtModel::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json().dump(1) << '\n';
}

GbdtModel GbdtModel::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("malformed model file: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Training

std::vector<double> softmax(std::span<const double> margins) {
    std::vector<double> p(margins.size());
    if (margins.empty()) return p;
    const double top = *std::max_element(margins.begin(), margins.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < margins.size(); ++c) {
        p[c] = std::exp(margins[c] - top);
        sum += p[c];
    }
    for (auto& v : p) v /= sum;
    return p;
}

double entropy(std::span<const double> probabilities) {
    double h = 0.0;
    for (auto p : probabilities)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

GbdtModel fit(const LabeledDataset& train, const Hyperparams& params, std::uint64_t /*seed*/, FitTrace* trace) {
    params.validate();
    if (train.empty()) throw InsufficientDataError("cannot fit on an empty training set");

    auto encoded = encode_ordinal(train);
    const auto k = train.schema.class_count();
    const auto n = train.size();
    GbdtModel model(k, encoded.encoding, params);

    Matrix margins(n, k);
    std::fill(margins.values.begin(), margins.values.end(), model.base_score());
    if (trace) trace->loss = {cross_entropy(margins, train)};

    std::vector<double> grad(n), hess(n);
    std::vector<std::vector<double>> probs(n);
    for (int round = 0; round < params.rounds; ++round) {
        for (std::size_t i = 0; i < n; ++i) probs[i] = softmax(margins.row(i));
        std::vector<DecisionTree> per_class;
        per_class.reserve(k);
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                const double p = probs[i][c];
                const double y = train.rows[i].label == c ? 1.0 : 0.0;
                grad[i] = p - y;
                hess[i] = std::max(2.0 * p * (1.0 - p), kMinHessian);
            }
            per_class.push_back(TreeBuilder(encoded.matrix, grad, hess, params).build());
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < k; ++c) margins.at(i, c) += per_class[c].predict(encoded.matrix.row(i));
        model.add_round(std::move(per_class));
        if (trace) trace->loss.push_back(cross_entropy(margins, train));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Group and rank

Grouping group_by_first_tree(const GbdtModel& model, const LabeledDataset& train) {
    const auto& tree = model.first_tree();
    std::vector<std::vector<std::size_t>> by_leaf(tree.leaf_count());
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto encoded = model.encoding().encode_row(train.rows[i].features);
        by_leaf[static_cast<std::size_t>(tree.leaf_index(encoded))].push_back(i);
    }
    Grouping out;
    for (std::size_t leaf = 0; leaf < by_leaf.size(); ++leaf) {
        if (by_leaf[leaf].empty()) {
            out.notes.push_back("leaf " + std::to_string(leaf) + " is empty and was dropped");
            continue;
        }
        out.groups.push_back(std::move(by_leaf[leaf]));
        out.leaf_ids.push_back(static_cast<int>(leaf));
    }
    return out;
}

std::vector<double> entropy_scores(const GbdtModel& model, const LabeledDataset& train) {
    std::vector<double> h;
    h.reserve(train.size());
    for (const auto& row : train.rows) h.push_back(entropy(model.predict_proba(row)));
    return h;
}

std::vector<std::size_t> rank_select(std::span<const double> scores, std::size_t k, RankDirection direction) {
    if (k < 1 || k > scores.size())
        throw ArgumentError("k=" + std::to_string(k) + " out of range for " + std::to_string(scores.size()) +
                            " scores");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const bool low = direction == RankDirection::lowest;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return low ? scores[a] < scores[b] : scores[a] > scores[b];
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::size_t default_hard_count(std::size_t n) { return std::max<std::size_t>(1, n / 2); }

}  // namespace insighttab
