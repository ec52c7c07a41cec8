#pragma once

#include "insighttab/dataset.hpp"
#include "insighttab/distiller.hpp"
#include "insighttab/llm.hpp"
#include "insighttab/random.hpp"

#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <unistd.h>
#include <string>
#include <vector>

namespace insighttab::testing {

inline std::filesystem::path golden_dir() { return INSIGHTTAB_GOLDEN_DIR; }
inline std::filesystem::path data_dir() { return INSIGHTTAB_DATA_DIR; }

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    f << text;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("insighttab-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline const std::vector<std::string>& answer_words() {
    static const std::vector<std::string> w{"Alpha", "Beta", "Gamma", "Delta"};
    return w;
}

// Numeric features x0..x{d-1}, classes c0..c{k-1} answered as Alpha, Beta, ...
inline Schema numeric_schema(std::size_t d, std::size_t k) {
    Schema s;
    for (std::size_t j = 0; j < d; ++j) s.features.push_back({"x" + std::to_string(j), FeatureKind::numeric});
    s.label_column = "label";
    for (std::size_t c = 0; c < k; ++c) {
        s.class_labels.push_back("c" + std::to_string(c));
        s.verbalizer.push_back(answer_words()[c]);
    }
    return s;
}

inline TaskSpec task_for(const Schema& s) {
    TaskSpec t;
    t.title = "Synthetic task";
    t.description = "Rows of numbers with a class.";
    t.question = "Which class is it?";
    t.answer_instruction = "Answer with one class name.";
    t.label_column = s.label_column;
    for (std::size_t c = 0; c < s.class_count(); ++c) {
        t.answer_choices.push_back(s.verbalizer[c]);
        t.verbalizer.emplace_back(s.class_labels[c], s.verbalizer[c]);
    }
    return t;
}

inline LabeledDataset numeric_dataset(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y,
                                      std::size_t k) {
    LabeledDataset d;
    d.schema = numeric_schema(x.empty() ? 1 : x.front().size(), k);
    for (std::size_t i = 0; i < x.size(); ++i) {
        Row r;
        for (double v : x[i]) r.features.push_back(FeatureValue::numeric(v));
        r.label = y[i];
        r.id = i;
        d.rows.push_back(std::move(r));
    }
    return d;
}

// Integer-valued features in [0, 10), so duplicate values and ties are common.
inline LabeledDataset random_dataset(Rng& rng, std::size_t n, std::size_t d, std::size_t k) {
    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& v : x[i]) v = static_cast<double>(rng.below(10));
        y[i] = static_cast<std::size_t>(rng.below(k));
    }
    return numeric_dataset(x, y, k);
}

inline TaskSpec loans_task() { return load_task_spec(data_dir() / "loans_task.json"); }

inline LabeledDataset loans() {
    const auto task = loans_task();
    CsvOptions o;
    o.label_column = task.label_column;
    o.hints = schema_hints_from_task(task);
    return load_csv(data_dir() / "loans.csv", o);
}

// Summarizer and predictor gateways sharing one usage tracker.
struct Rig {
    std::shared_ptr<LlmClient> summarizer_client;
    std::shared_ptr<LlmClient> predictor_client;
    std::shared_ptr<UsageTracker> usage;
    Gateway summarizer;
    Gateway predictor;

    Rig(std::shared_ptr<LlmClient> s, std::shared_ptr<LlmClient> p,
        std::optional<PriceTable> prices = std::nullopt, std::size_t in_flight = 1)
        : summarizer_client(s),
          predictor_client(p),
          usage(std::make_shared<UsageTracker>(std::move(prices))),
          summarizer(s, GatewaySettings{"scripted", 0.0, 1024, Role::summarizer, in_flight}, usage),
          predictor(p, GatewaySettings{"scripted", 0.0, 1024, Role::predictor, in_flight}, usage) {}

    Rig(ScriptedPolicy s, ScriptedPolicy p, std::optional<PriceTable> prices = std::nullopt)
        : Rig(std::make_shared<ScriptedClient>(std::move(s)), std::make_shared<ScriptedClient>(std::move(p)),
              std::move(prices)) {}

    Gateways gateways() { return {summarizer, predictor}; }

    std::size_t summarizer_calls() const {
        if (auto* c = dynamic_cast<ScriptedClient*>(summarizer_client.get())) return c->call_count();
        if (auto* c = dynamic_cast<FunctionClient*>(summarizer_client.get())) return c->call_count();
        return 0;
    }
    std::size_t predictor_calls() const {
        if (auto* c = dynamic_cast<ScriptedClient*>(predictor_client.get())) return c->call_count();
        if (auto* c = dynamic_cast<FunctionClient*>(predictor_client.get())) return c->call_count();
        return 0;
    }
};

inline ScriptedPolicies loans_policies() { return load_scripted_policies(data_dir() / "loans_policy.json"); }

}  // namespace insighttab::testing
