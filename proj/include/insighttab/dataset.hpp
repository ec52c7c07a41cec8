#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace insighttab {

enum class FeatureKind { numeric, categorical };

std::string_view to_string(FeatureKind kind);

// One cell of a feature vector. Numbers are always finite and tokens are
// always non-empty; anything else collapses to missing.
class FeatureValue {
public:
    FeatureValue() = default;

    static FeatureValue numeric(double value);
    static FeatureValue categorical(std::string_view token);
    static FeatureValue missing() { return FeatureValue{}; }

    bool is_missing() const noexcept { return std::holds_alternative<std::monostate>(value_); }
    bool is_numeric() const noexcept { return std::holds_alternative<double>(value_); }
    bool is_categorical() const noexcept { return std::holds_alternative<std::string>(value_); }

    double number() const { return std::get<double>(value_); }
    const std::string& token() const { return std::get<std::string>(value_); }

    friend bool operator==(const FeatureValue&, const FeatureValue&) = default;
    friend auto operator<=>(const FeatureValue&, const FeatureValue&) = default;

private:
    std::variant<std::monostate, double, std::string> value_;
};

struct FeatureSpec {
    std::string name;
    FeatureKind kind = FeatureKind::numeric;

    friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

struct Schema {
    std::vector<FeatureSpec> features;
    std::string label_column;
    std::vector<std::string> class_labels;
    // verbalizer[c] is the answer token the LLM uses for class_labels[c].
    std::vector<std::string> verbalizer;

    void validate() const;

    std::size_t feature_count() const noexcept { return features.size(); }
    std::size_t class_count() const noexcept { return class_labels.size(); }
    std::vector<std::string> feature_names() const;
    std::optional<std::size_t> feature_index(std::string_view name) const;
    std::optional<std::size_t> class_index(std::string_view label) const;
    const std::string& answer_for(std::size_t cls) const;

    friend bool operator==(const Schema&, const Schema&) = default;
};

struct Row {
    std::vector<FeatureValue> features;
    std::size_t label = 0;
    // Position of the row in the file it was loaded from.
    std::size_t id = 0;
};

struct LabeledDataset {
    Schema schema;
    std::vector<Row> rows;

    std::size_t size() const noexcept { return rows.size(); }
    bool empty() const noexcept { return rows.empty(); }

    void validate() const;
    // Rows at the given positions, in the given order.
    LabeledDataset subset(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> class_counts() const;
};

// Task metadata: the natural-language frame around every prompt.
struct TaskSpec {
    std::string title;
    std::string description;
    std::string question;
    std::string answer_instruction;
    std::vector<std::string> answer_choices;
    std::string label_column;
    // (class label in the data file, answer choice) in answer_choices order.
    std::vector<std::pair<std::string, std::string>> verbalizer;
    // Phrase completing "patterns for predicting ..." in the merge prompt.
    std::string prediction_target;

    void validate() const;
    std::string merge_target() const;
};

TaskSpec load_task_spec(const std::filesystem::path& path);
TaskSpec parse_task_spec(std::string_view json_text);

struct CsvOptions {
    char delimiter = ',';
    // Empty means the last header column.
    std::string label_column;
    // Declared kinds, class order and verbalizer; anything not given is
    // inferred from the file.
    std::optional<Schema> hints;
};

// Hints derived from task metadata: label column, class order, verbalizer.
Schema schema_hints_from_task(const TaskSpec& task);

LabeledDataset load_csv(const std::filesystem::path& path, const CsvOptions& options = {});
LabeledDataset read_csv(std::istream& in, const CsvOptions& options = {});

struct SplitPlan {
    std::uint64_t seed = 0;
    std::size_t fold_count = 5;
    double train_fraction = 0.8;
    std::size_t few_shot_n = 16;
    std::size_t test_cap = 1000;

    void validate() const;
    // Test size before capping.
    std::size_t raw_test_size(std::size_t n) const;
};

struct Split {
    LabeledDataset train;
    LabeledDataset test;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
};

// Fold k takes the k-th contiguous block of a seeded permutation as its test
// set (wrapping when the blocks do not fit), then caps it at test_cap.
Split split_train_test(const LabeledDataset& dataset, const SplitPlan& plan, std::size_t fold);

struct SampleOptions {
    bool stratified = false;
};

LabeledDataset sample_few_shot(const LabeledDataset& train, std::size_t n, std::uint64_t seed,
                               SampleOptions options = {});
std::vector<std::size_t> sample_few_shot_indices(const LabeledDataset& train, std::size_t n,
                                                 std::uint64_t seed, SampleOptions options = {});

struct ShuffledRow {
    // names[i] = schema.features[order[i]].name
    std::vector<std::size_t> order;
    std::vector<std::string> names;
    std::vector<FeatureValue> values;
};

ShuffledRow shuffle_columns(std::span<const FeatureValue> row, const Schema& schema, std::uint64_t seed);

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
    std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
};

struct ColumnEncoding {
    std::string name;
    FeatureKind kind = FeatureKind::numeric;
    // Categorical: code i stands for tokens[i], in first-appearance order.
    std::vector<std::string> tokens;
    // Numeric: value substituted for missing cells (median of the fitted data).
    double impute = 0.0;

    friend bool operator==(const ColumnEncoding&, const ColumnEncoding&) = default;
};

class OrdinalEncoding {
public:
    // Code for missing categorical cells and for tokens never seen at fit time.
    static constexpr double kMissingCode = -1.0;

    OrdinalEncoding() = default;
    explicit OrdinalEncoding(std::vector<ColumnEncoding> columns) : columns_(std::move(columns)) {}

    static OrdinalEncoding fit(const LabeledDataset& dataset);

    std::size_t width() const noexcept { return columns_.size(); }
    const std::vector<ColumnEncoding>& columns() const noexcept { return columns_; }

    std::vector<double> encode_row(std::span<const FeatureValue> row) const;
    Matrix encode(const LabeledDataset& dataset) const;
    FeatureValue decode(std::size_t column, double code) const;

    friend bool operator==(const OrdinalEncoding&, const OrdinalEncoding&) = default;

private:
    std::vector<ColumnEncoding> columns_;
};

struct EncodedDataset {
    Matrix matrix;
    OrdinalEncoding encoding;
};

EncodedDataset encode_ordinal(const LabeledDataset& dataset);

}  // namespace insighttab
