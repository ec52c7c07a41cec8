#pragma once

#include "insighttab/dataset.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace insighttab {

namespace markers {
inline constexpr std::string_view kSectionBreak = "###";
inline constexpr std::string_view kShotsStart = "[FEW-SHOT EXAMPLES START]";
inline constexpr std::string_view kShotsEnd = "[FEW-SHOT EXAMPLES END]";
inline constexpr std::string_view kQuestionStart = "[CURRENT QUESTION START]";
inline constexpr std::string_view kSeparator = "- - -";
inline constexpr std::string_view kUsefulPatterns = "Useful patterns for the task at hand:";
inline constexpr std::string_view kAdditionalPatterns =
    "Additional patterns for the task summarized from incorrectly classified examples with high entropy:";
inline constexpr std::string_view kDistillInstruction =
    "Please distill the key trends that may assist an AI model in making future predictions. "
    "Output trends only without any further explanations.";
}  // namespace markers

enum class PromptKind { group_rules, merge_rules, classify };

std::string_view to_string(PromptKind kind);

struct PromptText {
    std::string text;
    PromptKind kind = PromptKind::classify;
    std::size_t token_estimate = 0;
};

// One labeled sample as it appears inside a prompt.
struct ExemplarBlock {
    std::string serialized_features;
    std::string question;
    std::string answer;

    friend bool operator==(const ExemplarBlock&, const ExemplarBlock&) = default;
};

// Rough token count: one token per four bytes, rounded up.
std::size_t estimate_tokens(std::string_view text);

// Integers print bare; other reals print as the shortest decimal that
// round-trips.
std::string format_number(double value);
// Missing values print as "unknown".
std::string format_value(const FeatureValue& value);

// "The {name} is {value}." sentences joined by single spaces.
std::string serialize_features(std::span<const std::string> names, std::span<const FeatureValue> values);
std::string serialize_row(std::span<const FeatureValue> row, const Schema& schema);

ExemplarBlock make_exemplar(const Row& row, const Schema& schema, const TaskSpec& task);

PromptText render_group_rule_prompt(std::span<const ExemplarBlock> group);

PromptText render_merge_prompt(std::span<const std::string> rule_sets, const TaskSpec& task);

// Empty `rules` drops the "Useful patterns" section and an absent or empty
// `extra_rules` drops the "Additional patterns" section. The few-shot markers
// are always present, even with no shots.
PromptText render_classification_prompt(const TaskSpec& task, std::string_view rules,
                                        std::optional<std::string_view> extra_rules,
                                        std::span<const ExemplarBlock> shots, std::string_view query_features);

// The serialized-feature line of the current question, or nullopt when the
// prompt does not contain one.
std::optional<std::string> extract_query_features(std::string_view prompt);

}  // namespace insighttab
