#include "insighttab/serializer.hpp"

#include "insighttab/error.hpp"

#include <charconv>
#include <cmath>

namespace insighttab {

namespace {

std::string_view trim_newlines(std::string_view s) {
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == '\n' || s.front() == '\r')) s.remove_prefix(1);
    return s;
}

PromptText finish(std::string text, PromptKind kind) {
    const auto tokens = estimate_tokens(text);
    return {std::move(text), kind, tokens};
}

}  // namespace

std::string_view to_string(PromptKind kind) {
    switch (kind) {
        case PromptKind::group_rules: return "group_rules";
        case PromptKind::merge_rules: return "merge_rules";
        case PromptKind::classify: return "classify";
    }
    return "classify";
}

std::size_t estimate_tokens(std::string_view text) { return (text.size() + 3) / 4; }

std::string format_number(double value) {
    if (value == 0.0) return "0";
    char buf[64];
    if (std::abs(value) < 1e15 && value == std::floor(value)) {
        const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, static_cast<long long>(value));
        return std::string(buf, ptr);
    }
    const auto fmt = std::abs(value) >= 1e-6 && std::abs(value) < 1e15 ? std::chars_format::fixed
                                                                        : std::chars_format::general;
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value, fmt);
    return std::string(buf, ptr);
}

std::string format_value(const FeatureValue& value) {
    if (value.is_numeric()) return format_number(value.number());
    if (value.is_categorical()) return value.token();
    return "unknown";
}

std::string serialize_features(std::span<const std::string> names, std::span<const FeatureValue> values) {
    if (names.size() != values.size()) throw ShapeError("feature names and values differ in length");
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) out += ' ';
        out += "The ";
        out += names[i];
        out += " is ";
        out += format_value(values[i]);
        out += '.';
    }
    return out;
}

std::string serialize_row(std::span<const FeatureValue> row, const Schema& schema) {
    if (row.size() != schema.feature_count()) throw ShapeError("row does not match schema width");
    const auto names = schema.feature_names();
    return serialize_features(names, row);
}

ExemplarBlock make_exemplar(const Row& row, const Schema& schema, const TaskSpec& task) {
    return {serialize_row(row.features, schema), task.question, schema.answer_for(row.label)};
}

PromptText render_group_rule_prompt(std::span<const ExemplarBlock> group) {
    if (group.empty()) throw ArgumentError("group-rule prompt needs at least one sample");
    std::string out;
    for (const auto& s : group) {
        out += s.serialized_features;
        out += '\n';
        out += s.question;
        out += "\nAnswer: ";
        out += s.answer;
        out += '\n';
        out += markers::kSeparator;
        out += '\n';
    }
    out += markers::kDistillInstruction;
    return finish(std::move(out), PromptKind::group_rules);
}

PromptText render_merge_prompt(std::span<const std::string> rule_sets, const TaskSpec& task) {
    if (rule_sets.empty()) throw ArgumentError("merge prompt needs at least one rule set");
    std::string out;
    for (const auto& rules : rule_sets) {
        out += trim_newlines(rules);
        out += '\n';
        out += markers::kSeparator;
        out += '\n';
    }
    out += "Summarize the rules into a small set of non-conflicting and complementary patterns for predicting ";
    out += task.merge_target();
    out += ". Output patterns only without any further explanations.";
    return finish(std::move(out), PromptKind::merge_rules);
}

PromptText render_classification_prompt(const TaskSpec& task, std::string_view rules,
                                        std::optional<std::string_view> extra_rules,
                                        std::span<const ExemplarBlock> shots, std::string_view query_features) {
    std::string out;
    out += "Title: ";
    out += task.title;
    out += '\n';
    if (!task.description.empty()) {
        out += task.description;
        out += '\n';
    }
    out += '\n';

    rules = trim_newlines(rules);
    if (!rules.empty()) {
        out += markers::kUsefulPatterns;
        out += '\n';
        out += rules;
        out += "\n\n";
    }
    if (extra_rules) {
        const auto extra = trim_newlines(*extra_rules);
        if (!extra.empty()) {
            out += markers::kAdditionalPatterns;
            out += '\n';
            out += extra;
            out += "\n\n";
        }
    }

    out += markers::kSectionBreak;
    out += "\n\n";
    out += markers::kShotsStart;
    out += "\n\n";
    for (std::size_t i = 0; i < shots.size(); ++i) {
        if (i) {
            out += '\n';
            out += markers::kSeparator;
            out += '\n';
        }
        out += shots[i].serialized_features;
        out += "\n\n";
        out += shots[i].question;
        out += "\nAnswer: ";
        out += shots[i].answer;
    }
    if (!shots.empty()) out += "\n\n";
    out += markers::kShotsEnd;
    out += "\n\n";
    out += markers::kSectionBreak;
    out += "\n\n";
    out += markers::kQuestionStart;
    out += "\n\n";
    out += query_features;
    out += "\n\n";
    out += task.question;
    if (!task.answer_instruction.empty()) {
        out += ' ';
        out += task.answer_instruction;
    }
    out += "\nAnswer:";
    return finish(std::move(out), PromptKind::classify);
}

std::optional<std::string> extract_query_features(std::string_view prompt) {
    const auto at = prompt.find(markers::kQuestionStart);
    if (at == std::string_view::npos) return std::nullopt;
    auto rest = prompt.substr(at + markers::kQuestionStart.size());
    while (!rest.empty() && rest.front() == '\n') rest.remove_prefix(1);
    const auto end = rest.find('\n');
    auto line = rest.substr(0, end);
    if (line.empty()) return std::nullopt;
    return std::string(line);
}

}  // namespace insighttab
