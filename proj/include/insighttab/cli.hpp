#pragma once

#include "insighttab/dataset.hpp"
#include "insighttab/gbdt.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace insighttab::cli {

struct GatewayConfig {
    std::string summarizer_model = "scripted";
    std::string predictor_model = "scripted";
    std::string endpoint;
    // Name of the environment variable holding the API key.
    std::string api_key_env = "INSIGHTTAB_API_KEY";
    std::optional<std::filesystem::path> price_table;
    std::optional<std::filesystem::path> scripted;
    std::optional<std::filesystem::path> cache_dir;
    std::size_t max_in_flight = 1;
    int retries = 3;
};

struct ExperimentConfig {
    std::filesystem::path dataset;
    std::filesystem::path task;
    std::string dataset_name;
    char delimiter = ',';
    SplitPlan split;
    // Sweeps; one report row per (n, shots) pair.
    std::vector<std::size_t> n_values{16};
    std::vector<std::size_t> shots{16};
    Hyperparams gbdt;
    GatewayConfig gateway;
    bool no_demonstration = false;
    bool no_grouping = false;
    bool no_reflection = false;
    bool bias = false;
    std::optional<std::size_t> positive_class;
    std::filesystem::path out = "out";

    // Relative paths are resolved against `base`.
    static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
    nlohmann::json to_json() const;
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Exit codes: 0 success, 1 runtime failure, 2 validation failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace insighttab::cli
