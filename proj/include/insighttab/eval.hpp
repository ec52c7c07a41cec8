#pragma once

#include "insighttab/dataset.hpp"
#include "insighttab/distiller.hpp"
#include "insighttab/llm.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace insighttab {

struct PredictionRecord {
    // Position in the test set and the row's id in the source file.
    std::size_t index = 0;
    std::size_t row_id = 0;
    std::size_t truth = 0;
    ParsedAnswer predicted;
    std::string cache_key;
    double latency_ms = 0.0;
    std::string error;

    bool correct() const noexcept { return predicted && *predicted == truth; }
};

struct PredictOptions {
    // Permute each query row's columns, seeded by (seed, row id). Exemplars
    // are never shuffled.
    bool shuffle = false;
    std::uint64_t seed = 0;
};

// Gateway failures become NoAnswer records with the error attached.
std::vector<PredictionRecord> predict_dataset(const InsightPackage& package, const TaskSpec& task,
                                              const LabeledDataset& test, Gateway& predictor,
                                              PredictOptions options = {});

struct ConfusionTable {
    std::vector<std::size_t> tp;
    std::vector<std::size_t> fp;
    std::vector<std::size_t> fn;

    // NoAnswer adds a false negative for the truth class and nothing else.
    static ConfusionTable from_records(std::span<const PredictionRecord> records, std::size_t class_count);
};

struct F1Result {
    double macro = 0.0;
    std::vector<double> per_class;
};

F1Result f1_scores(std::span<const PredictionRecord> records, std::size_t class_count);

double no_answer_rate(std::span<const PredictionRecord> records);

struct PipelineConfig {
    DistillConfig distill;
    SampleOptions sampling;
    std::string dataset_name = "dataset";
    // Headline metric: macro F1 unless a positive class is named.
    std::optional<std::size_t> positive_class;
    // When set, each fold's package is written here as fold<k>.json.
    std::optional<std::filesystem::path> package_dir;
};

struct FoldResult {
    std::size_t fold = 0;
    std::size_t n = 0;
    std::size_t shots = 0;
    std::string mode;
    double macro_f1 = 0.0;
    std::vector<double> per_class_f1;
    double no_answer_rate = 0.0;
    double cost_usd = 0.0;
    std::size_t train_size = 0;
    std::size_t test_size = 0;
    std::string package_digest;
    std::string error;
    nlohmann::json config = nlohmann::json::object();

    bool ok() const noexcept { return error.empty(); }
};

struct CvResult {
    std::string dataset;
    std::size_t n = 0;
    std::size_t shots = 0;
    std::string mode;
    std::vector<std::string> class_labels;
    std::vector<FoldResult> folds;
    std::vector<std::string> warnings;
    // Means over completed folds.
    double mean_macro_f1 = 0.0;
    std::vector<double> mean_per_class_f1;
    double mean_no_answer_rate = 0.0;
    double total_cost_usd = 0.0;
    std::size_t completed = 0;
};

CvResult cross_validate(const LabeledDataset& dataset, const TaskSpec& task, const SplitPlan& plan,
                        const PipelineConfig& config, Gateways gateways);

struct BiasFold {
    std::size_t fold = 0;
    std::vector<std::size_t> test_indices;
    F1Result unshuffled;
    F1Result shuffled;
    std::size_t changed_predictions = 0;
    std::vector<std::size_t> class_support;
};

struct BiasReport {
    std::string dataset;
    std::vector<std::string> class_labels;
    std::vector<BiasFold> folds;
    std::vector<std::string> warnings;
    double unshuffled_macro_f1 = 0.0;
    double shuffled_macro_f1 = 0.0;
    std::vector<double> unshuffled_per_class_f1;
    std::vector<double> shuffled_per_class_f1;
    // Share of each class in the scored test rows, for the imbalance view.
    std::vector<double> class_share;
};

BiasReport bias_analysis(const LabeledDataset& dataset, const TaskSpec& task, const SplitPlan& plan,
                         const PipelineConfig& config, Gateways gateways);

// One line of a results report.
struct ReportRow {
    std::string dataset;
    std::size_t n = 0;
    std::size_t shots = 0;
    std::string mode;
    double macro_f1 = 0.0;
    std::vector<std::string> class_labels;
    std::vector<double> per_class_f1;
    double no_answer_rate = 0.0;
    double cost_usd = 0.0;
    std::optional<double> macro_f1_shuffled;
    std::vector<double> per_class_f1_shuffled;

    friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

ReportRow report_row(const CvResult& result);
ReportRow report_row(const FoldResult& fold, const std::string& dataset, std::vector<std::string> class_labels);
ReportRow report_row(const BiasReport& bias, const CvResult& baseline);

enum class ReportFormat { table, json, csv };

std::optional<ReportFormat> parse_report_format(std::string_view name);

// Percent with one decimal, e.g. 0.648 -> "64.8".
std::string format_percent(double fraction);

std::string render_report(std::span<const ReportRow> rows, ReportFormat format,
                          const nlohmann::json& config = nlohmann::json::object());
void emit_report(std::span<const ReportRow> rows, ReportFormat format, const std::filesystem::path& path,
                 const nlohmann::json& config = nlohmann::json::object());

// Readers for the json and csv report formats.
std::vector<ReportRow> parse_json_report(std::string_view text);
std::vector<ReportRow> parse_csv_report(std::string_view text);

}  // namespace insighttab
