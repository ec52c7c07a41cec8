#include "insighttab/cli.hpp"

#include "insighttab/distiller.hpp"
#include "insighttab/error.hpp"
#include "insighttab/eval.hpp"
#include "insighttab/live_client.hpp"
#include "insighttab/llm.hpp"
#include "insighttab/random.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

namespace insighttab::cli {

namespace fs = std::filesystem;

namespace {

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

std::vector<std::size_t> size_list(const nlohmann::json& j) {
    if (j.is_array()) return j.get<std::vector<std::size_t>>();
    return {j.get<std::size_t>()};
}

std::string optional_path(const std::optional<fs::path>& p) { return p ? p->string() : std::string{}; }

// Command-line overrides on top of the config file.
struct Overrides {
    std::string config;
    std::string dataset;
    std::string task;
    std::vector<std::size_t> n_values;
    std::vector<std::size_t> shots;
    std::optional<std::size_t> folds;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> fold;
    bool bias = false;
    bool no_demonstration = false;
    bool no_grouping = false;
    bool no_reflection = false;
    std::string scripted;
    std::string out;
    std::string format = "table";
};

ExperimentConfig resolve_config(const Overrides& o) {
    ExperimentConfig c;
    if (!o.config.empty()) c = load_experiment_config(o.config);
    if (!o.dataset.empty()) c.dataset = o.dataset;
    if (!o.task.empty()) c.task = o.task;
    if (!o.n_values.empty()) c.n_values = o.n_values;
    if (!o.shots.empty()) c.shots = o.shots;
    if (o.folds) c.split.fold_count = *o.folds;
    if (o.seed) c.split.seed = *o.seed;
    if (!o.scripted.empty()) c.gateway.scripted = fs::path(o.scripted);
    if (!o.out.empty()) c.out = o.out;
    c.bias = c.bias || o.bias;
    c.no_demonstration = c.no_demonstration || o.no_demonstration;
    c.no_grouping = c.no_grouping || o.no_grouping;
    c.no_reflection = c.no_reflection || o.no_reflection;
    if (c.dataset.empty()) throw ConfigError("no dataset given (--dataset or config 'dataset')");
    if (c.task.empty()) throw ConfigError("no task metadata given (--task or config 'task')");
    if (c.dataset_name.empty()) c.dataset_name = c.dataset.stem().string();
    if (c.n_values.empty() || c.shots.empty()) throw ConfigError("n and shots sweeps must not be empty");
    c.split.validate();
    try {
        c.gbdt.validate();
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("gbdt: ") + e.what());
    }
    return c;
}

struct Loaded {
    TaskSpec task;
    LabeledDataset data;
};

Loaded load_inputs(const ExperimentConfig& c) {
    Loaded l;
    l.task = load_task_spec(c.task);
    CsvOptions opts;
    opts.delimiter = c.delimiter;
    opts.label_column = l.task.label_column;
    opts.hints = schema_hints_from_task(l.task);
    l.data = load_csv(c.dataset, opts);
    if (c.positive_class && *c.positive_class >= l.data.schema.class_count())
        throw ConfigError("positive_class " + std::to_string(*c.positive_class) + " is out of range");
    return l;
}

struct Wiring {
    std::shared_ptr<UsageTracker> usage;
    std::unique_ptr<Gateway> summarizer;
    std::unique_ptr<Gateway> predictor;

    Gateways gateways() { return {*summarizer, *predictor}; }
};

Wiring wire(const ExperimentConfig& c, const Loaded& in) {
    const auto& g = c.gateway;
    std::optional<PriceTable> prices;
    if (g.price_table) {
        prices = load_price_table(*g.price_table);
        for (const auto& m : {g.summarizer_model, g.predictor_model})
            if (!prices->contains(m)) throw ConfigError("model '" + m + "' is missing from the price table");
    }

    std::shared_ptr<LlmClient> summarizer, predictor;
    if (g.scripted) {
        auto policies = load_scripted_policies(*g.scripted);
        policies.predictor.validate_against(in.task, in.data.schema);
        summarizer = std::make_shared<ScriptedClient>(policies.summarizer);
        predictor = std::make_shared<ScriptedClient>(policies.predictor);
    } else {
        if (g.endpoint.empty()) throw ConfigError("gateway.endpoint is required without a scripted policy");
        const char* key = std::getenv(g.api_key_env.c_str());
        if (key == nullptr || *key == '\0') throw ConfigError("environment variable " + g.api_key_env + " is not set");
        LiveSettings ls;
        ls.endpoint = g.endpoint;
        ls.api_key = key;
        ls.max_retries = g.retries;
        summarizer = predictor = std::make_shared<LiveClient>(ls);
    }
    if (g.cache_dir) {
        auto cache = std::make_shared<ResponseCache>(*g.cache_dir);
        summarizer = std::make_shared<CachingClient>(summarizer, cache);
        predictor = std::make_shared<CachingClient>(predictor, cache);
    }

    Wiring w;
    w.usage = std::make_shared<UsageTracker>(prices);
    w.summarizer = std::make_unique<Gateway>(
        summarizer, GatewaySettings{g.summarizer_model, 0.0, 1024, Role::summarizer, g.max_in_flight}, w.usage);
    w.predictor = std::make_unique<Gateway>(
        predictor, GatewaySettings{g.predictor_model, 0.0, 1024, Role::predictor, g.max_in_flight}, w.usage);
    return w;
}

DistillConfig distill_config(const ExperimentConfig& c, std::size_t shots) {
    DistillConfig d;
    d.n_e = shots;
    d.gbdt = c.gbdt;
    d.no_demonstration = c.no_demonstration;
    d.no_grouping = c.no_grouping;
    d.no_reflection = c.no_reflection;
    return d;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
}

std::string class_distribution(const LabeledDataset& d) {
    const auto counts = d.class_counts();
    std::string s;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (c) s += '/';
        s += format_percent(static_cast<double>(counts[c]) / static_cast<double>(d.size()));
    }
    return s;
}

int cmd_validate(const Overrides& o, std::ostream& out, std::ostream& err) {
    std::vector<std::string> issues;
    std::optional<ExperimentConfig> config;
    std::optional<Loaded> loaded;
    try {
        config = resolve_config(o);
    } catch (const ValidationError& e) {
        issues.push_back(e.what());
    }
    if (config) {
        try {
            loaded = load_inputs(*config);
        } catch (const ValidationError& e) {
            issues.push_back(e.what());
        }
    }
    if (config && loaded) {
        const auto& g = config->gateway;
        try {
            if (g.scripted) load_scripted_policies(*g.scripted).predictor.validate_against(loaded->task, loaded->data.schema);
        } catch (const ValidationError& e) {
            issues.push_back(e.what());
        }
        try {
            if (g.price_table) {
                const auto prices = load_price_table(*g.price_table);
                for (const auto& m : {g.summarizer_model, g.predictor_model})
                    if (!prices.contains(m)) issues.push_back("model '" + m + "' is missing from the price table");
            }
        } catch (const ValidationError& e) {
            issues.push_back(e.what());
        }
        const auto counts = loaded->data.class_counts();
        for (std::size_t c = 0; c < counts.size(); ++c)
            if (counts[c] == 0)
                issues.push_back("class '" + loaded->data.schema.class_labels[c] + "' has no rows in the dataset");
    }
    if (!issues.empty()) {
        for (const auto& i : issues) err << "error: " << i << '\n';
        return 2;
    }
    const auto& d = loaded->data;
    out << d.size() << " rows, " << d.schema.feature_count() << " features, classes " << class_distribution(d) << '\n';
    return 0;
}

int cmd_distill(const Overrides& o, std::ostream& out, std::ostream& err) {
    const auto c = resolve_config(o);
    const auto in = load_inputs(c);
    auto w = wire(c, in);
    ensure_dir(c.out);

    const std::size_t fold = o.fold.value_or(0);
    if (fold >= c.split.fold_count) throw ConfigError("--fold must be below the fold count");
    const auto split = split_train_test(in.data, c.split, fold);
    auto n = c.n_values.front();
    if (n > split.train.size()) {
        err << "warning: n=" << n << " exceeds the training split; using " << split.train.size() << " rows\n";
        n = split.train.size();
    }
    const auto train = sample_few_shot(split.train, n, Rng::derive({c.split.seed, fold, 1}));
    auto dc = distill_config(c, std::min(c.shots.front(), train.size()));
    dc.seed = Rng::derive({c.split.seed, fold, 2});

    const auto package = distill(train, in.task, dc, w.gateways(), DistillOptions{c.out / "work"});
    const auto path = c.out / "package.json";
    package.save(path);
    write_text(c.out / "usage.json", w.usage->snapshot().to_json().dump(2) + "\n");
    for (const auto& note : package.notes) err << "note: " << note << '\n';
    out << "wrote " << path.string() << " (" << sha256_hex(package.dump()) << ")\n";
    return 0;
}

int cmd_evaluate(const Overrides& o, std::ostream& out, std::ostream& err) {
    const auto c = resolve_config(o);
    const auto format = parse_report_format(o.format);
    if (!format) throw ConfigError("unknown report format '" + o.format + "'");
    const auto in = load_inputs(c);
    auto w = wire(c, in);
    ensure_dir(c.out);

    std::vector<ReportRow> rows;
    std::size_t completed = 0;
    for (const auto n : c.n_values) {
        for (const auto shots : c.shots) {
            auto plan = c.split;
            plan.few_shot_n = n;
            PipelineConfig pc;
            pc.distill = distill_config(c, shots);
            pc.dataset_name = c.dataset_name;
            pc.positive_class = c.positive_class;
            const auto cv = cross_validate(in.data, in.task, plan, pc, w.gateways());
            for (const auto& warning : cv.warnings) err << "warning: " << warning << '\n';
            completed += cv.completed;
            if (cv.completed == 0) continue;
            if (c.bias) {
                const auto bias = bias_analysis(in.data, in.task, plan, pc, w.gateways());
                for (const auto& warning : bias.warnings) err << "warning: " << warning << '\n';
                if (!bias.folds.empty()) {
                    rows.push_back(report_row(bias, cv));
                    continue;
                }
            }
            rows.push_back(report_row(cv));
        }
    }
    if (completed == 0) {
        err << "error: every fold failed\n";
        return 1;
    }
    const auto config = c.to_json();
    emit_report(rows, ReportFormat::csv, c.out / "report.csv", config);
    emit_report(rows, ReportFormat::json, c.out / "report.json", config);
    write_text(c.out / "usage.json", w.usage->snapshot().to_json().dump(2) + "\n");
    out << render_report(rows, *format, config);
    return 0;
}

void add_common(CLI::App* app, Overrides& o) {
    app->add_option("--config", o.config, "Experiment config (JSON)");
    app->add_option("--dataset", o.dataset, "CSV data file");
    app->add_option("--task", o.task, "Task metadata (JSON)");
    app->add_option("--n", o.n_values, "Few-shot training sizes")->delimiter(',');
    app->add_option("--shots", o.shots, "Demonstration counts")->delimiter(',');
    app->add_option("--folds", o.folds, "Number of folds")->check(CLI::PositiveNumber);
    app->add_option("--seed", o.seed, "Master seed");
    app->add_flag("--no-demonstration", o.no_demonstration, "Drop exemplars from the prompt");
    app->add_flag("--no-grouping", o.no_grouping, "Skip group rule summarization");
    app->add_flag("--no-reflection", o.no_reflection, "Skip reflection");
    app->add_option("--scripted", o.scripted, "Scripted policy file; no network access");
    app->add_option("--out", o.out, "Output directory");
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const fs::path& base) {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    ExperimentConfig c;
    try {
        if (j.contains("dataset")) c.dataset = resolve(j["dataset"].get<std::string>(), base);
        if (j.contains("task")) c.task = resolve(j["task"].get<std::string>(), base);
        c.dataset_name = j.value("dataset_name", std::string{});
        const auto delim = j.value("delimiter", std::string(","));
        if (delim.size() != 1) throw ConfigError("delimiter must be a single character");
        c.delimiter = delim[0];
        if (j.contains("split")) {
            const auto& s = j["split"];
            c.split.seed = s.value("seed", c.split.seed);
            c.split.fold_count = s.value("folds", c.split.fold_count);
            c.split.train_fraction = s.value("train_fraction", c.split.train_fraction);
            c.split.test_cap = s.value("test_cap", c.split.test_cap);
            if (s.contains("n")) c.n_values = size_list(s["n"]);
        }
        if (j.contains("shots")) c.shots = size_list(j["shots"]);
        if (j.contains("gbdt")) {
            const auto& g = j["gbdt"];
            c.gbdt.rounds = g.value("rounds", c.gbdt.rounds);
            c.gbdt.learning_rate = g.value("learning_rate", c.gbdt.learning_rate);
            c.gbdt.max_depth = g.value("max_depth", c.gbdt.max_depth);
            c.gbdt.reg_lambda = g.value("reg_lambda", c.gbdt.reg_lambda);
            c.gbdt.gamma = g.value("gamma", c.gbdt.gamma);
            c.gbdt.min_child_weight = g.value("min_child_weight", c.gbdt.min_child_weight);
        }
        if (j.contains("gateway")) {
            const auto& g = j["gateway"];
            auto& cg = c.gateway;
            cg.summarizer_model = g.value("summarizer_model", cg.summarizer_model);
            cg.predictor_model = g.value("predictor_model", cg.predictor_model);
            cg.endpoint = g.value("endpoint", cg.endpoint);
            cg.api_key_env = g.value("api_key_env", cg.api_key_env);
            cg.max_in_flight = g.value("max_in_flight", cg.max_in_flight);
            cg.retries = g.value("retries", cg.retries);
            if (g.contains("price_table")) cg.price_table = resolve(g["price_table"].get<std::string>(), base);
            if (g.contains("scripted")) cg.scripted = resolve(g["scripted"].get<std::string>(), base);
            if (g.contains("cache_dir")) cg.cache_dir = resolve(g["cache_dir"].get<std::string>(), base);
            if (cg.max_in_flight == 0) throw ConfigError("gateway.max_in_flight must be positive");
        }
        if (j.contains("ablation")) {
            const auto& a = j["ablation"];
            c.no_demonstration = a.value("no_demonstration", false);
            c.no_grouping = a.value("no_grouping", false);
            c.no_reflection = a.value("no_reflection", false);
        }
        c.bias = j.value("bias", false);
        if (j.contains("positive_class")) c.positive_class = j["positive_class"].get<std::size_t>();
        if (j.contains("out")) c.out = resolve(j["out"].get<std::string>(), base);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad experiment config: ") + e.what());
    }
    return c;
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["dataset"] = dataset.string();
    j["dataset_name"] = dataset_name;
    j["task"] = task.string();
    j["split"] = {{"seed", split.seed},
                  {"folds", split.fold_count},
                  {"train_fraction", split.train_fraction},
                  {"test_cap", split.test_cap},
                  {"n", n_values}};
    j["shots"] = shots;
    j["gbdt"] = {{"rounds", gbdt.rounds},         {"learning_rate", gbdt.learning_rate},
                 {"max_depth", gbdt.max_depth},   {"reg_lambda", gbdt.reg_lambda},
                 {"gamma", gbdt.gamma},           {"min_child_weight", gbdt.min_child_weight}};
    j["gateway"] = {{"summarizer_model", gateway.summarizer_model},
                    {"predictor_model", gateway.predictor_model},
                    {"endpoint", gateway.endpoint},
                    {"price_table", optional_path(gateway.price_table)},
                    {"scripted", optional_path(gateway.scripted)}};
    j["ablation"] = {{"no_demonstration", no_demonstration},
                     {"no_grouping", no_grouping},
                     {"no_reflection", no_reflection}};
    j["bias"] = bias;
    return j;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read config " + path.string());
    std::stringstream buf;
    buf << f.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return ExperimentConfig::from_json(j, path.parent_path());
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Few-shot tabular classification with distilled insights", "insighttab"};
    app.require_subcommand(1);
    Overrides o;

    auto* validate = app.add_subcommand("validate", "Check config, task and data; print dataset stats");
    add_common(validate, o);

    auto* distill_cmd = app.add_subcommand("distill", "Distill an insight package for one fold");
    add_common(distill_cmd, o);
    distill_cmd->add_option("--fold", o.fold, "Fold whose training split is used");

    auto* evaluate = app.add_subcommand("evaluate", "Cross-validate and write reports");
    add_common(evaluate, o);
    evaluate->add_flag("--bias", o.bias, "Add feature-shuffled columns");
    evaluate->add_option("--format", o.format, "Console format: table, csv or json");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(std::move(reversed));
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*validate) return cmd_validate(o, out, err);
        if (*distill_cmd) return cmd_distill(o, out, err);
        return cmd_evaluate(o, out, err);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + (argc > 0 ? 1 : 0), argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace insighttab::cli
