#include "insighttab/error.hpp"
#include "insighttab/gbdt.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace insighttab;
using namespace insighttab::testing;

namespace {

struct OracleSplit {
    double gain = 0.0;
    std::vector<std::pair<int, double>> argmax;  // every (feature, threshold) reaching gain
};

// Root split of the class-0 tree in round 0, found by brute force: every
// feature, every midpoint between distinct values, sums recomputed per
// candidate.
OracleSplit exhaustive_root(const LabeledDataset& d, const Hyperparams& hp) {
    const auto k = static_cast<double>(d.schema.class_count());
    const double p = 1.0 / k;
    const double h = std::max(2.0 * p * (1.0 - p), 1e-16);
    std::vector<double> g(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) g[i] = p - (d.rows[i].label == 0 ? 1.0 : 0.0);
    const auto score = [&](double gs, double hs) { return gs * gs / (hs + hp.reg_lambda); };
    const double gt = std::accumulate(g.begin(), g.end(), 0.0);
    const double ht = h * static_cast<double>(d.size());

    std::vector<std::tuple<int, double, double>> candidates;
    for (std::size_t j = 0; j < d.schema.feature_count(); ++j) {
        std::set<double> values;
        for (const auto& r : d.rows) values.insert(r.features[j].number());
        for (auto it = values.begin(); std::next(it) != values.end(); ++it) {
            const double t = (*it + *std::next(it)) / 2.0;
            double gl = 0.0, hl = 0.0, gr = 0.0, hr = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i) {
                if (d.rows[i].features[j].number() < t) {
                    gl += g[i];
                    hl += h;
                } else {
                    gr += g[i];
                    hr += h;
                }
            }
            if (hl < hp.min_child_weight || hr < hp.min_child_weight) continue;
            const double gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(gt, ht)) - hp.gamma;
            candidates.emplace_back(static_cast<int>(j), t, gain);
        }
    }
    OracleSplit out;
    for (const auto& [j, t, gain] : candidates) out.gain = std::max(out.gain, gain);
    for (const auto& [j, t, gain] : candidates)
        if (out.gain > 0.0 && std::abs(gain - out.gain) <= 1e-9 * std::max(1.0, out.gain)) out.argmax.emplace_back(j, t);
    return out;
}

Hyperparams one_round() {
    Hyperparams hp;
    hp.rounds = 1;
    return hp;
}

double training_macro_f1(const GbdtModel& m, const LabeledDataset& d) {
    const auto k = d.schema.class_count();
    std::vector<double> tp(k), fp(k), fn(k);
    for (const auto& r : d.rows) {
        const auto p = m.predict(m.encoding().encode_row(r.features));
        if (p == r.label) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[r.label];
        }
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        const double denom = 2 * tp[c] + fp[c] + fn[c];
        sum += denom == 0 ? 0.0 : 2 * tp[c] / denom;
    }
    return sum / static_cast<double>(k);
}

}  // namespace

TEST(Hyperparams, DefaultsAndValidation) {
    Hyperparams hp;
    EXPECT_EQ(hp.rounds, 100);
    EXPECT_EQ(hp.learning_rate, 0.3);
    EXPECT_EQ(hp.max_depth, 6);
    EXPECT_EQ(hp.reg_lambda, 1.0);
    EXPECT_EQ(hp.gamma, 0.0);
    EXPECT_EQ(hp.min_child_weight, 1.0);
    hp.learning_rate = 0.0;
    EXPECT_THROW(hp.validate(), ArgumentError);
    hp = {};
    hp.max_depth = 0;
    EXPECT_THROW(hp.validate(), ArgumentError);
}

TEST(Fit, EmptyTrainingSet) {
    LabeledDataset d;
    d.schema = numeric_schema(1, 2);
    EXPECT_THROW(fit(d), InsufficientDataError);
}

TEST(Fit, SingleClassGivesSingleLeafAndConfidentModel) {
    const auto d = numeric_dataset({{1}, {2}, {3}, {4}, {5}}, {0, 0, 0, 0, 0}, 2);
    const auto m = fit(d);
    EXPECT_EQ(m.first_tree().leaf_count(), 1u);
    EXPECT_GE(m.predict_proba(d.rows[0])[0], 0.99);
}

TEST(Fit, FourRowThresholdInRange) {
    const auto d = numeric_dataset({{1}, {2}, {8}, {9}}, {0, 0, 1, 1}, 2);
    Hyperparams hp;
    hp.min_child_weight = 0.0;
    const auto m = fit(d, hp);
    const auto& root = m.first_tree().nodes().front();
    ASSERT_FALSE(root.is_leaf());
    EXPECT_GT(root.threshold, 2.0);
    EXPECT_LE(root.threshold, 8.0);
    EXPECT_EQ(root.threshold, 5.0);
}

TEST(Fit, TreeCountIsRoundsTimesClasses) {
    Rng rng(1);
    const auto d = random_dataset(rng, 30, 2, 3);
    Hyperparams hp;
    hp.rounds = 7;
    const auto m = fit(d, hp);
    EXPECT_EQ(m.round_count(), 7u);
    for (const auto& round : m.trees()) EXPECT_EQ(round.size(), 3u);
}

TEST(Fit, DepthBoundRespected) {
    Rng rng(2);
    const auto d = random_dataset(rng, 50, 3, 2);
    Hyperparams hp;
    hp.rounds = 5;
    hp.max_depth = 2;
    hp.min_child_weight = 0.0;
    const auto model = fit(d, hp);
    for (const auto& round : model.trees())
        for (const auto& t : round) EXPECT_LE(t.depth(), 2);
}

TEST(Fit, Deterministic) {
    Rng rng(3);
    const auto d = random_dataset(rng, 40, 3, 2);
    EXPECT_EQ(fit(d).to_json(), fit(d).to_json());
}

TEST(Fit, LinearlySeparableReachesHighTrainingF1) {
    const auto d = loans();
    const auto m = fit(d);
    EXPECT_GE(training_macro_f1(m, d), 0.95);
}

TEST(Fit, LossNeverIncreases) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const auto d = random_dataset(rng, 10 + rng.below(30), 1 + rng.below(3), 2 + rng.below(3));
        Hyperparams hp;
        hp.rounds = 15;
        FitTrace trace;
        fit(d, hp, 0, &trace);
        ASSERT_EQ(trace.loss.size(), 16u);
        for (std::size_t r = 1; r < trace.loss.size(); ++r) EXPECT_LE(trace.loss[r], trace.loss[r - 1] + 1e-9);
    }
}

TEST(Fit, RootSplitMatchesExhaustiveSearch) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto d = random_dataset(rng, 2 + rng.below(49), 1 + rng.below(3), 2 + rng.below(2));
        const auto oracle = exhaustive_root(d, one_round());
        const auto model = fit(d, one_round());
        const auto& root = model.first_tree().nodes().front();
        if (oracle.argmax.empty()) {
            EXPECT_TRUE(root.is_leaf());
            continue;
        }
        ASSERT_FALSE(root.is_leaf());
        EXPECT_NEAR(root.gain, oracle.gain, 1e-9 * std::max(1.0, oracle.gain));
        const auto chosen = std::make_pair(root.feature, root.threshold);
        EXPECT_NE(std::find(oracle.argmax.begin(), oracle.argmax.end(), chosen), oracle.argmax.end());
    }
}

TEST(Fit, MinChildWeightBlocksTinyChildren) {
    // Every row starts with hessian 0.5, so weight 2 needs four rows per side.
    const auto d = numeric_dataset({{1}, {2}, {3}, {4}, {5}, {6}}, {0, 1, 1, 1, 1, 1}, 2);
    Hyperparams hp = one_round();
    hp.min_child_weight = 2.0;
    EXPECT_TRUE(fit(d, hp).first_tree().nodes().front().is_leaf());
    hp.min_child_weight = 1.0;
    const auto model = fit(d, hp);
    const auto& root = model.first_tree().nodes().front();
    ASSERT_FALSE(root.is_leaf());
    EXPECT_GE(root.threshold, 2.5);
    EXPECT_LE(root.threshold, 4.5);
}

TEST(Fit, GammaSuppressesWeakSplits) {
    const auto d = numeric_dataset({{1}, {2}, {8}, {9}}, {0, 0, 1, 1}, 2);
    Hyperparams hp = one_round();
    hp.min_child_weight = 0.0;
    hp.gamma = 100.0;
    EXPECT_TRUE(fit(d, hp).first_tree().nodes().front().is_leaf());
}

TEST(PredictProba, ZeroTreesIsUniform) {
    GbdtModel two(2, OrdinalEncoding({ColumnEncoding{"x0"}}), Hyperparams{});
    const std::vector<double> x{3.0};
    EXPECT_EQ(two.predict_proba(x), (std::vector<double>{0.5, 0.5}));
    GbdtModel four(4, OrdinalEncoding({ColumnEncoding{"x0"}}), Hyperparams{});
    for (double p : four.predict_proba(x)) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(PredictProba, WidthMismatchIsShapeError) {
    GbdtModel m(2, OrdinalEncoding({ColumnEncoding{"x0"}, ColumnEncoding{"x1"}}), Hyperparams{});
    const std::vector<double> x{1.0};
    EXPECT_THROW(m.predict_proba(x), ShapeError);
}

TEST(PredictProba, SimplexOnRandomRows) {
    Rng rng(6);
    const auto d = random_dataset(rng, 60, 3, 4);
    Hyperparams hp;
    hp.rounds = 30;
    const auto m = fit(d, hp);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> x(3);
        for (auto& v : x) v = static_cast<double>(rng.below(12)) - 1.0;
        const auto p = m.predict_proba(x);
        double sum = 0.0;
        for (double v : p) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Softmax, StableForLargeMargins) {
    const std::vector<double> m{1000.0, 0.0};
    const auto p = softmax(m);
    EXPECT_NEAR(p[0], 1.0, 1e-12);
    EXPECT_GE(p[1], 0.0);
}

TEST(Entropy, KnownValues) {
    EXPECT_NEAR(entropy(std::vector<double>{0.5, 0.5}), 0.6931, 1e-4);
    EXPECT_EQ(entropy(std::vector<double>{1.0, 0.0}), 0.0);
    EXPECT_NEAR(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), 1.3863, 1e-4);
}

TEST(LeafIndex, SingleLeafTree) {
    const DecisionTree t;
    EXPECT_EQ(leaf_index(t, std::vector<double>{42.0}), 0);
}

TEST(LeafIndex, DepthOneRouting) {
    const DecisionTree t({TreeNode{0, 5.0, 1, 2, 0.0, -1, 1.0}, TreeNode{-1, 0, -1, -1, -0.1, 0, 0},
                          TreeNode{-1, 0, -1, -1, 0.1, 1, 0}});
    EXPECT_EQ(leaf_index(t, std::vector<double>{3.0}), 0);
    EXPECT_EQ(leaf_index(t, std::vector<double>{7.0}), 1);
    EXPECT_EQ(leaf_index(t, std::vector<double>{5.0}), 1);
}

TEST(LeafIndex, RejectsMalformedTrees) {
    EXPECT_THROW(DecisionTree({TreeNode{0, 1.0, 1, 1, 0, -1, 0}, TreeNode{-1, 0, -1, -1, 0, 0, 0}}), ArgumentError);
    EXPECT_THROW(DecisionTree({TreeNode{0, 1.0, 1, 2, 0, -1, 0}, TreeNode{-1, 0, -1, -1, 0, 1, 0},
                               TreeNode{-1, 0, -1, -1, 0, 0, 0}}),
                 ArgumentError);
}

TEST(LeafIndex, ExactlyOneLeafPerRow) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const auto d = random_dataset(rng, 40, 3, 2);
        Hyperparams hp = one_round();
        hp.min_child_weight = 0.0;
        const auto model = fit(d, hp);
        const auto& tree = model.first_tree();
        for (int i = 0; i < 100; ++i) {
            std::vector<double> x(3);
            for (auto& v : x) v = static_cast<double>(rng.below(10));
            // Count leaves whose path constraints the row satisfies.
            int hits = 0;
            std::vector<std::pair<int, bool>> stack{{0, true}};
            while (!stack.empty()) {
                auto [n, ok] = stack.back();
                stack.pop_back();
                const auto& node = tree.nodes()[static_cast<std::size_t>(n)];
                if (node.is_leaf()) {
                    if (ok) {
                        ++hits;
                        EXPECT_EQ(node.leaf_id, tree.leaf_index(x));
                    }
                    continue;
                }
                const bool left = x[static_cast<std::size_t>(node.feature)] < node.threshold;
                stack.emplace_back(node.left, ok && left);
                stack.emplace_back(node.right, ok && !left);
            }
            EXPECT_EQ(hits, 1);
        }
    }
}

TEST(LeafIndex, IdsAreDepthFirstLeftFirst) {
    Rng rng(8);
    const auto d = random_dataset(rng, 50, 2, 2);
    Hyperparams hp = one_round();
    hp.min_child_weight = 0.0;
    const auto model = fit(d, hp);
    const auto& tree = model.first_tree();
    std::vector<int> order;
    std::vector<int> stack{0};
    while (!stack.empty()) {
        const auto& node = tree.nodes()[static_cast<std::size_t>(stack.back())];
        stack.pop_back();
        if (node.is_leaf()) {
            order.push_back(node.leaf_id);
        } else {
            stack.push_back(node.right);
            stack.push_back(node.left);
        }
    }
    for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(order[i], static_cast<int>(i));
    EXPECT_EQ(order.size(), tree.leaf_count());
}

TEST(Grouping, SingleLeafIsOneGroup) {
    const auto d = numeric_dataset({{1}, {2}, {3}}, {0, 0, 0}, 2);
    const auto g = group_by_first_tree(fit(d), d);
    ASSERT_EQ(g.groups.size(), 1u);
    EXPECT_EQ(g.groups[0], (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Grouping, DepthOneMatchesFilter) {
    Rng rng(9);
    const auto d = random_dataset(rng, 40, 2, 2);
    Hyperparams hp;
    hp.max_depth = 1;
    hp.min_child_weight = 0.0;
    const auto m = fit(d, hp);
    const auto& root = m.first_tree().nodes().front();
    ASSERT_FALSE(root.is_leaf());
    std::vector<std::size_t> below, above;
    for (std::size_t i = 0; i < d.size(); ++i)
        (d.rows[i].features[static_cast<std::size_t>(root.feature)].number() < root.threshold ? below : above)
            .push_back(i);
    const auto g = group_by_first_tree(m, d);
    ASSERT_EQ(g.groups.size(), 2u);
    EXPECT_EQ(g.groups[0], below);
    EXPECT_EQ(g.groups[1], above);
}

TEST(Grouping, PartitionOnRandomFits) {
    Rng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        const auto d = random_dataset(rng, 5 + rng.below(60), 1 + rng.below(3), 2 + rng.below(3));
        Hyperparams hp;
        hp.rounds = 3;
        const auto g = group_by_first_tree(fit(d, hp), d);
        std::vector<std::size_t> all;
        for (const auto& grp : g.groups) {
            EXPECT_FALSE(grp.empty());
            all.insert(all.end(), grp.begin(), grp.end());
        }
        std::sort(all.begin(), all.end());
        std::vector<std::size_t> expected(d.size());
        std::iota(expected.begin(), expected.end(), std::size_t{0});
        EXPECT_EQ(all, expected);
    }
}

TEST(Grouping, EmptyLeavesDroppedWithNote) {
    // Fit on one set, group a different set that never reaches the left leaf.
    const auto d = numeric_dataset({{1}, {2}, {8}, {9}}, {0, 0, 1, 1}, 2);
    Hyperparams hp;
    hp.min_child_weight = 0.0;
    const auto m = fit(d, hp);
    const auto other = numeric_dataset({{8}, {9}}, {1, 1}, 2);
    const auto g = group_by_first_tree(m, other);
    EXPECT_EQ(g.groups.size(), 1u);
    EXPECT_EQ(g.notes.size(), m.first_tree().leaf_count() - 1);
}

TEST(EntropyScores, MatchesDefinition) {
    Rng rng(11);
    const auto d = random_dataset(rng, 30, 2, 3);
    Hyperparams hp;
    hp.rounds = 10;
    const auto m = fit(d, hp);
    const auto h = entropy_scores(m, d);
    ASSERT_EQ(h.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        double e = 0.0;
        for (double p : m.predict_proba(d.rows[i]))
            if (p > 0) e -= p * std::log(p);
        EXPECT_NEAR(h[i], e, 1e-12);
    }
}

TEST(RankSelect, Examples) {
    const std::vector<double> s{0.2, 0.9, 0.5};
    EXPECT_EQ(rank_select(s, 2, RankDirection::lowest), (std::vector<std::size_t>{0, 2}));
    const std::vector<double> flat{0.3, 0.3, 0.3, 0.3};
    EXPECT_EQ(rank_select(flat, 2, RankDirection::lowest), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(rank_select(flat, 2, RankDirection::highest), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(rank_select(s, 3, RankDirection::highest), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(rank_select(s, 3, RankDirection::lowest), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(RankSelect, OutOfRange) {
    const std::vector<double> s{0.1, 0.2};
    EXPECT_THROW(rank_select(s, 0, RankDirection::lowest), ArgumentError);
    EXPECT_THROW(rank_select(s, 3, RankDirection::highest), ArgumentError);
}

TEST(RankSelect, LowestAndHighestCoverDistinctScores) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const auto n = 2 + rng.below(40);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<double>(i);
        rng.shuffle(std::span<double>(s));
        const auto k = 1 + rng.below(n - 1);
        auto lo = rank_select(s, k, RankDirection::lowest);
        const auto hi = rank_select(s, n - k, RankDirection::highest);
        std::set<std::size_t> all(lo.begin(), lo.end());
        all.insert(hi.begin(), hi.end());
        EXPECT_EQ(all.size(), n);
    }
}

TEST(HardCount, Rounding) {
    EXPECT_EQ(default_hard_count(1), 1u);
    EXPECT_EQ(default_hard_count(7), 3u);
    for (std::size_t n = 1; n <= 64; ++n) EXPECT_EQ(default_hard_count(n), std::max<std::size_t>(1, n / 2));
}

TEST(ModelFile, JsonRoundTrip) {
    const auto d = loans();
    Hyperparams hp;
    hp.rounds = 5;
    const auto m = fit(d, hp);
    const auto back = GbdtModel::from_json(m.to_json());
    EXPECT_EQ(back.to_json(), m.to_json());
    for (const auto& r : d.rows) EXPECT_EQ(back.predict_proba(r), m.predict_proba(r));
}

TEST(ModelFile, SaveLoad) {
    TempDir dir("model");
    Rng rng(13);
    const auto d = random_dataset(rng, 30, 2, 2);
    const auto m = fit(d);
    m.save(dir / "m.json");
    EXPECT_EQ(GbdtModel::load(dir / "m.json").to_json(), m.to_json());
}

TEST(ModelFile, RejectsUnknownVersion) {
    Rng rng(14);
    auto j = fit(random_dataset(rng, 10, 1, 2)).to_json();
    j["version"] = 99;
    EXPECT_THROW(GbdtModel::from_json(j), ValidationError);
}
