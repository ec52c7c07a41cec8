#pragma once

#include "insighttab/dataset.hpp"
#include "insighttab/gbdt.hpp"
#include "insighttab/llm.hpp"
#include "insighttab/serializer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace insighttab {

struct RuleSet {
    std::vector<std::string> rules;
    // Group ids ("group:0,3"), "merged" or "reflection".
    std::string provenance;

    // Non-empty lines of `text`, in order.
    static RuleSet from_text(std::string_view text, std::string provenance);

    bool empty() const noexcept { return rules.empty(); }
    std::string text() const;

    friend bool operator==(const RuleSet&, const RuleSet&) = default;
};

struct ScoredExemplar {
    // Position in the training set handed to distill().
    std::size_t index = 0;
    std::size_t row_id = 0;
    std::size_t label = 0;
    double entropy = 0.0;
    ExemplarBlock block;

    friend bool operator==(const ScoredExemplar&, const ScoredExemplar&) = default;
};

struct ReflectionOutcome {
    std::size_t index = 0;
    std::size_t truth = 0;
    ParsedAnswer predicted;

    friend bool operator==(const ReflectionOutcome&, const ReflectionOutcome&) = default;
};

struct ReflectionReport {
    std::size_t hard_count = 0;
    std::vector<std::size_t> hard_indices;
    std::vector<std::size_t> misclassified_indices;
    std::vector<ReflectionOutcome> outcomes;

    friend bool operator==(const ReflectionReport&, const ReflectionReport&) = default;
};

struct DistillConfig {
    // Easy exemplars; also the number of shots in the final prompt.
    std::size_t n_e = 16;
    // Hard samples; max(1, floor(n/2)) when unset.
    std::optional<std::size_t> n_h;
    Hyperparams gbdt;
    std::uint64_t seed = 0;
    bool no_demonstration = false;
    bool no_grouping = false;
    bool no_reflection = false;
    int reflection_rounds = 1;
    // Spread exemplars across classes instead of taking the global lowest
    // entropies.
    bool balanced_exemplars = false;

    std::string mode() const;
    nlohmann::json to_json() const;
};

struct Gateways {
    Gateway& summarizer;
    Gateway& predictor;
};

struct InsightPackage {
    static constexpr int kFormatVersion = 1;

    RuleSet merged_rules;
    std::optional<RuleSet> reflection_rules;
    std::vector<RuleSet> group_rules;
    std::vector<ScoredExemplar> easy_exemplars;
    ReflectionReport reflection;
    bool use_demonstrations = true;
    std::vector<std::string> feature_names;
    std::vector<std::string> notes;
    nlohmann::json config = nlohmann::json::object();
    UsageLedger usage;

    std::vector<ExemplarBlock> shots() const;

    // Merged rules under "Useful patterns", reflection rules under
    // "Additional patterns", exemplars (easiest first) as shots.
    PromptText classification_prompt(const TaskSpec& task, std::string_view query_features) const;

    nlohmann::json to_json() const;
    static InsightPackage from_json(const nlohmann::json& j);
    std::string dump() const;
    void save(const std::filesystem::path& path) const;
    static InsightPackage load(const std::filesystem::path& path);
};

std::vector<ExemplarBlock> exemplar_blocks(const LabeledDataset& data, std::span<const std::size_t> indices,
                                           const TaskSpec& task);

// One summarizer call per group, results in group order.
std::vector<RuleSet> summarize_group_rules(std::span<const std::vector<ExemplarBlock>> groups, Gateway& summarizer,
                                           std::span<const int> group_ids = {});

RuleSet merge_rules(std::span<const RuleSet> rule_sets, const TaskSpec& task, Gateway& summarizer);

// The n_e lowest-entropy rows, easiest first; ties go to the lower index.
std::vector<ScoredExemplar> select_exemplars(std::span<const double> entropies, const LabeledDataset& train,
                                             const TaskSpec& task, std::size_t n_e, bool balanced = false);
std::vector<ScoredExemplar> select_exemplars(const GbdtModel& model, const LabeledDataset& train,
                                             const TaskSpec& task, std::size_t n_e);

struct ReflectionResult {
    std::optional<RuleSet> rules;
    ReflectionReport report;
};

struct ReflectOptions {
    bool use_demonstrations = true;
    int rounds = 1;
};

// Hard samples are the n_h highest-entropy rows outside the exemplar set.
ReflectionResult reflect(std::span<const double> entropies, const LabeledDataset& train, const TaskSpec& task,
                         std::span<const ScoredExemplar> exemplars, const RuleSet& merged_rules, Gateways gateways,
                         std::size_t n_h, ReflectOptions options = {});

struct DistillOptions {
    // Where partial artifacts (group rules) are written and resumed from.
    std::optional<std::filesystem::path> work_dir;
};

InsightPackage distill(const LabeledDataset& train, const TaskSpec& task, const DistillConfig& config,
                       Gateways gateways, const DistillOptions& options = {});

}  // namespace insighttab
