#include "insighttab/cli.hpp"
#include "insighttab/distiller.hpp"
#include "insighttab/error.hpp"
#include "insighttab/eval.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace insighttab;
using namespace insighttab::testing;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::vector<std::string> scripted_args(const std::string& command, const TempDir& dir) {
    return {command,
            "--dataset",
            (data_dir() / "loans.csv").string(),
            "--task",
            (data_dir() / "loans_task.json").string(),
            "--scripted",
            (data_dir() / "loans_policy.json").string(),
            "--out",
            dir.path().string()};
}

std::vector<std::string> with(std::vector<std::string> a, std::initializer_list<std::string> more) {
    a.insert(a.end(), more);
    return a;
}

}  // namespace

TEST(Cli, ValidatePrintsStats) {
    TempDir dir("cli-validate");
    const auto r = run_cli(scripted_args("validate", dir));
    EXPECT_EQ(r.code, 0) << r.err;
    // 99 "yes" rows and 101 "no" rows.
    const auto d = loans();
    const auto counts = d.class_counts();
    const std::string expected = "200 rows, 4 features, classes " +
                                 format_percent(counts[0] / 200.0) + "/" + format_percent(counts[1] / 200.0) + "\n";
    EXPECT_EQ(r.out, expected);
}

TEST(Cli, ValidateBloodShapedFile) {
    TempDir dir("cli-blood");
    std::string csv = "Recency,Frequency,Monetary,Time,Donated\n";
    for (int i = 0; i < 748; ++i) csv += std::to_string(i % 20) + ",1,250,10," + (i < 178 ? "1" : "0") + "\n";
    spit(dir / "blood.csv", csv);
    spit(dir / "blood.json", R"({"title":"Blood","description":"d","answer_instruction":"a","question":"Will the person donate blood?",
        "answer_choices":["Yes","No"],"label_column":"Donated","verbalizer":{"0":"No","1":"Yes"}})");
    const auto r = run_cli({"validate", "--dataset", (dir / "blood.csv").string(), "--task",
                            (dir / "blood.json").string()});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, "748 rows, 4 features, classes 23.8/76.2\n");
}

TEST(Cli, MissingLabelColumn) {
    TempDir dir("cli-label");
    spit(dir / "d.csv", "a,b\n1,2\n");
    spit(dir / "t.json", R"({"title":"t","description":"d","answer_instruction":"a","question":"q?","answer_choices":["Yes","No"],"label_column":"approved"})");
    const auto r = run_cli({"validate", "--dataset", (dir / "d.csv").string(), "--task", (dir / "t.json").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("approved"), std::string::npos);
    EXPECT_TRUE(r.out.empty());
}

TEST(Cli, ValidateReportsPolicyProblems) {
    TempDir dir("cli-policy");
    spit(dir / "p.json", R"({"predictor":{"mode":"rule_on_features","rules":[
        {"when":[{"feature":"salary","op":"<","value":1}],"answer":"Yes"}],"default":"No"}})");
    auto args = scripted_args("validate", dir);
    args[6] = (dir / "p.json").string();
    const auto r = run_cli(args);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("salary"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli({}).code, 2);
    EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
    EXPECT_EQ(run_cli({"validate", "--folds", "0"}).code, 2);
    EXPECT_EQ(run_cli({"validate"}).code, 2);
    TempDir dir("cli-format");
    EXPECT_EQ(run_cli(with(scripted_args("evaluate", dir), {"--format", "xml"})).code, 2);
}

TEST(Cli, HelpExitsZero) {
    const auto r = run_cli({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("evaluate"), std::string::npos);
}

TEST(Cli, LiveModeNeedsKey) {
    TempDir dir("cli-live");
    spit(dir / "cfg.json", nlohmann::json{{"dataset", (data_dir() / "loans.csv").string()},
                                          {"task", (data_dir() / "loans_task.json").string()},
                                          {"gateway",
                                           {{"endpoint", "http://127.0.0.1:9/v1/chat/completions"},
                                            {"api_key_env", "INSIGHTTAB_TEST_UNSET_KEY"}}}}
                                .dump());
    ::unsetenv("INSIGHTTAB_TEST_UNSET_KEY");
    const auto r = run_cli({"distill", "--config", (dir / "cfg.json").string(), "--out", dir.path().string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("INSIGHTTAB_TEST_UNSET_KEY"), std::string::npos);
}

TEST(Cli, DistillWritesPackageDeterministically) {
    TempDir a("cli-distill-a"), b("cli-distill-b");
    const auto args_a = with(scripted_args("distill", a), {"--n", "32", "--shots", "8", "--seed", "3"});
    const auto args_b = with(scripted_args("distill", b), {"--n", "32", "--shots", "8", "--seed", "3"});
    const auto ra = run_cli(args_a);
    const auto rb = run_cli(args_b);
    ASSERT_EQ(ra.code, 0) << ra.err;
    ASSERT_EQ(rb.code, 0) << rb.err;
    EXPECT_EQ(slurp(a / "package.json"), slurp(b / "package.json"));
    const auto p = InsightPackage::load(a / "package.json");
    EXPECT_EQ(p.easy_exemplars.size(), 8u);
    EXPECT_EQ(p.config["train_size"], 32);
    EXPECT_TRUE(std::filesystem::exists(a / "usage.json"));
    EXPECT_NE(ra.out.find(sha256_hex(p.dump())), std::string::npos);
}

TEST(Cli, DistillAblations) {
    TempDir dir("cli-ablate");
    const auto r = run_cli(with(scripted_args("distill", dir),
                                {"--n", "32", "--shots", "4", "--no-grouping", "--no-reflection", "--no-demonstration"}));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto p = InsightPackage::load(dir / "package.json");
    EXPECT_TRUE(p.group_rules.empty());
    EXPECT_FALSE(p.reflection_rules);
    EXPECT_FALSE(p.use_demonstrations);
    EXPECT_EQ(p.config["mode"], "-demonstration-grouping-reflection");
}

TEST(Cli, DistillClampsN) {
    TempDir dir("cli-clamp");
    const auto r = run_cli(with(scripted_args("distill", dir), {"--n", "5000", "--shots", "4", "--no-reflection"}));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("warning"), std::string::npos);
    EXPECT_EQ(InsightPackage::load(dir / "package.json").config["train_size"], 160);
}

TEST(Cli, EvaluateWritesReports) {
    TempDir dir("cli-eval");
    const auto r = run_cli(with(scripted_args("evaluate", dir), {"--n", "16,32", "--shots", "4", "--folds", "2",
                                                                 "--format", "json"}));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = parse_json_report(r.out);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].n, 16u);
    EXPECT_EQ(rows[1].n, 32u);
    EXPECT_EQ(rows[0].dataset, "loans");
    EXPECT_EQ(parse_csv_report(slurp(dir / "report.csv")), rows);
    EXPECT_EQ(parse_json_report(slurp(dir / "report.json")), rows);
    EXPECT_TRUE(std::filesystem::exists(dir / "usage.json"));
}

TEST(Cli, EvaluateBiasColumns) {
    TempDir dir("cli-bias");
    const auto r = run_cli(with(scripted_args("evaluate", dir), {"--n", "16", "--shots", "4", "--folds", "2",
                                                                 "--bias", "--format", "csv"}));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = parse_csv_report(r.out);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_TRUE(rows[0].macro_f1_shuffled.has_value());
    EXPECT_EQ(rows[0].mode, "full+bias");
}

TEST(Cli, EvaluateAllFoldsFailedExitsOne) {
    TempDir dir("cli-fail");
    // A summarizer that cannot answer: keyed mode with no choices and no match.
    spit(dir / "p.json", R"({"summarizer":{"mode":"keyed_by_prompt_hash","responses":{"00":"x"}},
        "predictor":{"mode":"fixed_text","text":"Yes"}})");
    auto args = scripted_args("evaluate", dir);
    args[6] = (dir / "p.json").string();
    const auto r = run_cli(with(args, {"--n", "16", "--shots", "4", "--folds", "2"}));
    EXPECT_EQ(r.code, 1) << r.err;
    EXPECT_NE(r.err.find("every fold failed"), std::string::npos);
}

TEST(Cli, ConfigFileResolvesRelativePaths) {
    const auto c = cli::load_experiment_config(data_dir() / "loans_experiment.json");
    EXPECT_EQ(c.dataset, data_dir() / "loans.csv");
    EXPECT_EQ(c.n_values, (std::vector<std::size_t>{16, 32, 64, 128}));
    EXPECT_EQ(c.split.seed, 7u);
    EXPECT_EQ(c.gateway.scripted, data_dir() / "loans_policy.json");
    const auto again = cli::ExperimentConfig::from_json(c.to_json());
    EXPECT_EQ(again.to_json(), c.to_json());
}

TEST(Cli, BadConfigFile) {
    TempDir dir("cli-badcfg");
    spit(dir / "c.json", "[1,2]");
    EXPECT_THROW(cli::load_experiment_config(dir / "c.json"), ConfigError);
    spit(dir / "d.json", "{nope");
    EXPECT_EQ(run_cli({"validate", "--config", (dir / "d.json").string()}).code, 2);
}

TEST(Cli, ConfigSweepGivesOneRowPerN) {
    TempDir dir("cli-sweep");
    const auto r = run_cli({"evaluate", "--config", (data_dir() / "loans_experiment.json").string(), "--folds", "2",
                            "--out", dir.path().string(), "--format", "csv"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = parse_csv_report(r.out);
    ASSERT_EQ(rows.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rows[i].n, std::size_t{16} << i);
}

TEST(Cli, RerunWithCacheIsStable) {
    TempDir dir("cli-rerun");
    spit(dir / "cfg.json", nlohmann::json{{"dataset", (data_dir() / "loans.csv").string()},
                                          {"task", (data_dir() / "loans_task.json").string()},
                                          {"split", {{"folds", 2}, {"n", 16}}},
                                          {"shots", 4},
                                          {"gateway",
                                           {{"scripted", (data_dir() / "loans_policy.json").string()},
                                            {"cache_dir", (dir / "cache").string()}}}}
                                .dump());
    const std::vector<std::string> args{"evaluate", "--config", (dir / "cfg.json").string(), "--out",
                                        (dir / "out").string(), "--format", "json"};
    const auto first = run_cli(args);
    ASSERT_EQ(first.code, 0) << first.err;
    const auto second = run_cli(args);
    ASSERT_EQ(second.code, 0) << second.err;
    EXPECT_EQ(first.out, second.out);
    const auto usage = nlohmann::json::parse(slurp(dir / "out" / "usage.json"));
    EXPECT_EQ(usage["predictor"]["cache_hits"], usage["predictor"]["requests"]);
}
