#include "insighttab/eval.hpp"

#include "insighttab/error.hpp"
#include "insighttab/random.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace insighttab {

namespace {

constexpr std::uint64_t kSampleSeed = 1;
constexpr std::uint64_t kDistillSeed = 2;
constexpr std::uint64_t kShuffleSeed = 3;

double usage_cost(const Gateways& g) {
    if (g.summarizer.usage() == g.predictor.usage()) return g.summarizer.usage()->snapshot().total_cost();
    return g.summarizer.usage()->snapshot().total_cost() + g.predictor.usage()->snapshot().total_cost();
}

std::string number(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

double parse_double(std::string_view s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw ParseError("not a number: '" + std::string(s) + "'", 0);
    return v;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else {
            field += c;
        }
    }
    out.push_back(std::move(field));
    return out;
}

// Class labels across all rows in first-appearance order.
std::vector<std::string> label_union(std::span<const ReportRow> rows) {
    std::vector<std::string> labels;
    for (const auto& r : rows)
        for (const auto& l : r.class_labels)
            if (std::find(labels.begin(), labels.end(), l) == labels.end()) labels.push_back(l);
    return labels;
}

std::optional<double> per_class_value(const ReportRow& row, const std::vector<double>& values, const std::string& label) {
    for (std::size_t i = 0; i < row.class_labels.size() && i < values.size(); ++i)
        if (row.class_labels[i] == label) return values[i];
    return std::nullopt;
}

struct Prepared {
    LabeledDataset train;
    Split split;
    std::vector<std::string> notes;
};

Prepared prepare_fold(const LabeledDataset& dataset, const SplitPlan& plan, const PipelineConfig& config,
                      std::size_t fold) {
    Prepared p;
    p.split = split_train_test(dataset, plan, fold);
    auto n = plan.few_shot_n;
    if (n > p.split.train.size()) {
        p.notes.push_back("fold " + std::to_string(fold) + ": few-shot n=" + std::to_string(n) +
                          " exceeds the training split; using all " + std::to_string(p.split.train.size()) + " rows");
        n = p.split.train.size();
    }
    p.train = sample_few_shot(p.split.train, n, Rng::derive({plan.seed, fold, kSampleSeed}), config.sampling);
    return p;
}

DistillConfig fold_distill_config(const PipelineConfig& config, const SplitPlan& plan, std::size_t fold,
                                  std::size_t train_size, std::vector<std::string>& notes) {
    auto dc = config.distill;
    dc.seed = Rng::derive({plan.seed, fold, kDistillSeed});
    if (dc.n_e > train_size) {
        notes.push_back("fold " + std::to_string(fold) + ": shots=" + std::to_string(dc.n_e) +
                        " exceeds the training set; using " + std::to_string(train_size));
        dc.n_e = train_size;
    }
    return dc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Prediction

std::vector<PredictionRecord> predict_dataset(const InsightPackage& package, const TaskSpec& task,
                                              const LabeledDataset& test, Gateway& predictor, PredictOptions options) {
    if (!package.feature_names.empty() && package.feature_names != test.schema.feature_names())
        throw SchemaError("package was distilled for a different feature schema");

    std::vector<PromptText> prompts;
    prompts.reserve(test.size());
    for (const auto& row : test.rows) {
        std::string query;
        if (options.shuffle) {
            const auto s = shuffle_columns(row.features, test.schema, Rng::derive({options.seed, row.id}));
            query = serialize_features(s.names, s.values);
        } else {
            query = serialize_row(row.features, test.schema);
        }
        prompts.push_back(package.classification_prompt(task, query));
    }
    const auto outcomes = predictor.complete_all(prompts);

    std::vector<PredictionRecord> records;
    records.reserve(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        PredictionRecord r;
        r.index = i;
        r.row_id = test.rows[i].id;
        r.truth = test.rows[i].label;
        r.cache_key = outcomes[i].key;
        r.latency_ms = outcomes[i].latency_ms;
        if (outcomes[i].response)
            r.predicted = parse_class(outcomes[i].response->text, task, test.schema);
        else
            r.error = outcomes[i].error;
        records.push_back(std::move(r));
    }
    return records;
}

// ---------------------------------------------------------------------------
// Scoring

ConfusionTable ConfusionTable::from_records(std::span<const PredictionRecord> records, std::size_t class_count) {
    ConfusionTable t{std::vector<std::size_t>(class_count, 0), std::vector<std::size_t>(class_count, 0),
                     std::vector<std::size_t>(class_count, 0)};
    for (const auto& r : records) {
        if (r.truth >= class_count) throw ArgumentError("record truth label out of range");
        if (r.predicted && *r.predicted < class_count) {
            if (*r.predicted == r.truth) {
                ++t.tp[r.truth];
            } else {
                ++t.fp[*r.predicted];
                ++t.fn[r.truth];
            }
        } else {
            ++t.fn[r.truth];
        }
    }
    return t;
}

F1Result f1_scores(std::span<const PredictionRecord> records, std::size_t class_count) {
    if (records.empty()) throw ArgumentError("cannot score an empty record list");
    if (class_count == 0) throw ArgumentError("class_count must be positive");
    const auto t = ConfusionTable::from_records(records, class_count);
    const auto ratio = [](std::size_t a, std::size_t b) {
        return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
    };
    F1Result out;
    out.per_class.resize(class_count);
    double sum = 0.0;
    for (std::size_t c = 0; c < class_count; ++c) {
        const double p = ratio(t.tp[c], t.tp[c] + t.fp[c]);
        const double r = ratio(t.tp[c], t.tp[c] + t.fn[c]);
        out.per_class[c] = p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
        sum += out.per_class[c];
    }
    out.macro = sum / static_cast<double>(class_count);
    return out;
}

double no_answer_rate(std::span<const PredictionRecord> records) {
    if (records.empty()) return 0.0;
    const auto missing = std::count_if(records.begin(), records.end(), [](const auto& r) { return !r.predicted; });
    return static_cast<double>(missing) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Protocols

CvResult cross_validate(const LabeledDataset& dataset, const TaskSpec& task, const SplitPlan& plan,
                        const PipelineConfig& config, Gateways gateways) {
    plan.validate();
    const auto k = dataset.schema.class_count();
    CvResult res;
    res.dataset = config.dataset_name;
    res.n = plan.few_shot_n;
    res.shots = config.distill.n_e;
    res.mode = config.distill.mode();
    res.class_labels = dataset.schema.class_labels;
    res.mean_per_class_f1.assign(k, 0.0);

    for (std::size_t fold = 0; fold < plan.fold_count; ++fold) {
        FoldResult fr;
        fr.fold = fold;
        fr.n = plan.few_shot_n;
        fr.shots = config.distill.n_e;
        fr.mode = res.mode;
        const double cost_before = usage_cost(gateways);
        try {
            auto prepared = prepare_fold(dataset, plan, config, fold);
            auto dc = fold_distill_config(config, plan, fold, prepared.train.size(), prepared.notes);
            res.warnings.insert(res.warnings.end(), prepared.notes.begin(), prepared.notes.end());

            const auto package = distill(prepared.train, task, dc, gateways);
            const auto records = predict_dataset(package, task, prepared.split.test, gateways.predictor);
            const auto f1 = f1_scores(records, k);

            fr.macro_f1 = config.positive_class ? f1.per_class.at(*config.positive_class) : f1.macro;
            fr.per_class_f1 = f1.per_class;
            fr.no_answer_rate = no_answer_rate(records);
            fr.train_size = prepared.train.size();
            fr.test_size = prepared.split.test.size();
            fr.package_digest = sha256_hex(package.dump());
            fr.config = package.config;
            if (config.package_dir) package.save(*config.package_dir / ("fold" + std::to_string(fold) + ".json"));
        } catch (const std::exception& e) {
            fr.error = e.what();
            res.warnings.push_back("fold " + std::to_string(fold) + " failed: " + e.what());
        }
        fr.cost_usd = usage_cost(gateways) - cost_before;
        res.total_cost_usd += fr.cost_usd;
        res.folds.push_back(std::move(fr));
    }

    for (const auto& f : res.folds) {
        if (!f.ok()) continue;
        ++res.completed;
        res.mean_macro_f1 += f.macro_f1;
        res.mean_no_answer_rate += f.no_answer_rate;
        for (std::size_t c = 0; c < k; ++c) res.mean_per_class_f1[c] += f.per_class_f1[c];
    }
    if (res.completed > 0) {
        const auto m = static_cast<double>(res.completed);
        res.mean_macro_f1 /= m;
        res.mean_no_answer_rate /= m;
        for (auto& v : res.mean_per_class_f1) v /= m;
    }
    if (res.completed < plan.fold_count)
        res.warnings.push_back("aggregate covers " + std::to_string(res.completed) + " of " +
                               std::to_string(plan.fold_count) + " folds");
    return res;
}

BiasReport bias_analysis(const LabeledDataset& dataset, const TaskSpec& task, const SplitPlan& plan,
                         const PipelineConfig& config, Gateways gateways) {
    plan.validate();
    const auto k = dataset.schema.class_count();
    BiasReport report;
    report.dataset = config.dataset_name;
    report.class_labels = dataset.schema.class_labels;
    report.unshuffled_per_class_f1.assign(k, 0.0);
    report.shuffled_per_class_f1.assign(k, 0.0);
    report.class_share.assign(k, 0.0);
    std::size_t scored = 0;

    for (std::size_t fold = 0; fold < plan.fold_count; ++fold) {
        try {
            auto prepared = prepare_fold(dataset, plan, config, fold);
            auto dc = fold_distill_config(config, plan, fold, prepared.train.size(), prepared.notes);
            report.warnings.insert(report.warnings.end(), prepared.notes.begin(), prepared.notes.end());
            const auto package = distill(prepared.train, task, dc, gateways);
            const auto& test = prepared.split.test;

            const auto plain = predict_dataset(package, task, test, gateways.predictor);
            const auto shuffled = predict_dataset(package, task, test, gateways.predictor,
                                                  {true, Rng::derive({plan.seed, fold, kShuffleSeed})});
            BiasFold bf;
            bf.fold = fold;
            bf.test_indices = prepared.split.test_indices;
            bf.unshuffled = f1_scores(plain, k);
            bf.shuffled = f1_scores(shuffled, k);
            bf.class_support = test.class_counts();
            for (std::size_t i = 0; i < plain.size(); ++i)
                if (plain[i].predicted != shuffled[i].predicted) ++bf.changed_predictions;
            for (std::size_t c = 0; c < k; ++c) report.class_share[c] += static_cast<double>(bf.class_support[c]);
            scored += test.size();
            report.folds.push_back(std::move(bf));
        } catch (const std::exception& e) {
            report.warnings.push_back("fold " + std::to_string(fold) + " failed: " + e.what());
        }
    }

    if (!report.folds.empty()) {
        const auto m = static_cast<double>(report.folds.size());
        for (const auto& f : report.folds) {
            report.unshuffled_macro_f1 += f.unshuffled.macro / m;
            report.shuffled_macro_f1 += f.shuffled.macro / m;
            for (std::size_t c = 0; c < k; ++c) {
                report.unshuffled_per_class_f1[c] += f.unshuffled.per_class[c] / m;
                report.shuffled_per_class_f1[c] += f.shuffled.per_class[c] / m;
            }
        }
    }
    if (scored > 0)
        for (auto& s : report.class_share) s /= static_cast<double>(scored);
    return report;
}

// ---------------------------------------------------------------------------
// Reports

ReportRow report_row(const CvResult& result) {
    ReportRow r;
    r.dataset = result.dataset;
    r.n = result.n;
    r.shots = result.shots;
    r.mode = result.mode;
    r.macro_f1 = result.mean_macro_f1;
    r.class_labels = result.class_labels;
    r.per_class_f1 = result.mean_per_class_f1;
    r.no_answer_rate = result.mean_no_answer_rate;
    r.cost_usd = result.total_cost_usd;
    return r;
}

ReportRow report_row(const FoldResult& fold, const std::string& dataset, std::vector<std::string> class_labels) {
    ReportRow r;
    r.dataset = dataset;
    r.n = fold.n;
    r.shots = fold.shots;
    r.mode = fold.mode;
    r.macro_f1 = fold.macro_f1;
    r.class_labels = std::move(class_labels);
    r.per_class_f1 = fold.per_class_f1;
    r.no_answer_rate = fold.no_answer_rate;
    r.cost_usd = fold.cost_usd;
    return r;
}

ReportRow report_row(const BiasReport& bias, const CvResult& baseline) {
    auto r = report_row(baseline);
    r.mode += "+bias";
    r.macro_f1 = bias.unshuffled_macro_f1;
    r.per_class_f1 = bias.unshuffled_per_class_f1;
    r.macro_f1_shuffled = bias.shuffled_macro_f1;
    r.per_class_f1_shuffled = bias.shuffled_per_class_f1;
    return r;
}

std::optional<ReportFormat> parse_report_format(std::string_view name) {
    if (name == "table") return ReportFormat::table;
    if (name == "json") return ReportFormat::json;
    if (name == "csv") return ReportFormat::csv;
    return std::nullopt;
}

std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", fraction * 100.0);
    return buf;
}

std::string render_report(std::span<const ReportRow> rows, ReportFormat format, const nlohmann::json& config) {
    if (rows.empty()) throw ArgumentError("report needs at least one result row");
    const auto labels = label_union(rows);
    const bool shuffled = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.macro_f1_shuffled.has_value(); });

    if (format == ReportFormat::json) {
        auto out_rows = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json j{{"dataset", r.dataset},     {"n", r.n},
                             {"shots", r.shots},         {"mode", r.mode},
                             {"macro_f1", r.macro_f1},   {"class_labels", r.class_labels},
                             {"per_class_f1", r.per_class_f1}, {"no_answer_rate", r.no_answer_rate},
                             {"cost_usd", r.cost_usd}};
            if (r.macro_f1_shuffled) {
                j["macro_f1_shuffled"] = *r.macro_f1_shuffled;
                j["per_class_f1_shuffled"] = r.per_class_f1_shuffled;
            }
            out_rows.push_back(std::move(j));
        }
        return nlohmann::json{{"config", config}, {"rows", out_rows}}.dump(2) + "\n";
    }

    std::vector<std::string> header{"dataset", "n", "shots", "mode", "macro_f1"};
    for (const auto& l : labels) header.push_back("f1[" + l + "]");
    header.push_back("no_answer_rate");
    header.push_back("cost_usd");
    if (shuffled) {
        header.push_back("macro_f1_shuffled");
        for (const auto& l : labels) header.push_back("f1_shuffled[" + l + "]");
    }

    const bool table = format == ReportFormat::table;
    const auto fraction = [&](double v) { return table ? format_percent(v) : number(v); };
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) {
        std::vector<std::string> line{r.dataset, std::to_string(r.n), std::to_string(r.shots), r.mode,
                                      fraction(r.macro_f1)};
        for (const auto& l : labels) {
            const auto v = per_class_value(r, r.per_class_f1, l);
            line.push_back(v ? fraction(*v) : "");
        }
        line.push_back(fraction(r.no_answer_rate));
        if (table) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6f", r.cost_usd);
            line.emplace_back(buf);
        } else {
            line.push_back(number(r.cost_usd));
        }
        if (shuffled) {
            line.push_back(r.macro_f1_shuffled ? fraction(*r.macro_f1_shuffled) : "");
            for (const auto& l : labels) {
                const auto v = per_class_value(r, r.per_class_f1_shuffled, l);
                line.push_back(v ? fraction(*v) : "");
            }
        }
        cells.push_back(std::move(line));
    }

    std::ostringstream out;
    out << "# config: " << config.dump() << '\n';
    if (!table) {
        for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << csv_field(header[i]);
        out << '\n';
        for (const auto& line : cells) {
            for (std::size_t i = 0; i < line.size(); ++i) out << (i ? "," : "") << csv_field(line[i]);
            out << '\n';
        }
        return out.str();
    }

    std::vector<std::size_t> width(header.size());
    for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
    for (const auto& line : cells)
        for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    const auto emit = [&](const std::vector<std::string>& line) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (i) out << "  ";
            out << line[i];
            if (i + 1 < line.size()) out << std::string(width[i] - line[i].size(), ' ');
        }
        out << '\n';
    };
    emit(header);
    for (const auto& line : cells) emit(line);
    return out.str();
}

void emit_report(std::span<const ReportRow> rows, ReportFormat format, const std::filesystem::path& path,
                 const nlohmann::json& config) {
    const auto text = render_report(rows, format, config);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report " + path.string());
    out << text;
    if (!out) throw IoError("failed writing report " + path.string());
}

std::vector<ReportRow> parse_json_report(std::string_view text) {
    std::vector<ReportRow> rows;
    try {
        const auto j = nlohmann::json::parse(text);
        for (const auto& r : j.at("rows")) {
            ReportRow row;
            row.dataset = r.at("dataset").get<std::string>();
            row.n = r.at("n").get<std::size_t>();
            row.shots = r.at("shots").get<std::size_t>();
            row.mode = r.at("mode").get<std::string>();
            row.macro_f1 = r.at("macro_f1").get<double>();
            row.class_labels = r.at("class_labels").get<std::vector<std::string>>();
            row.per_class_f1 = r.at("per_class_f1").get<std::vector<double>>();
            row.no_answer_rate = r.at("no_answer_rate").get<double>();
            row.cost_usd = r.at("cost_usd").get<double>();
            if (r.contains("macro_f1_shuffled")) {
                row.macro_f1_shuffled = r.at("macro_f1_shuffled").get<double>();
                row.per_class_f1_shuffled = r.at("per_class_f1_shuffled").get<std::vector<double>>();
            }
            rows.push_back(std::move(row));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed json report: ") + e.what(), 0);
    }
    return rows;
}

std::vector<ReportRow> parse_csv_report(std::string_view text) {
    std::vector<std::string> lines;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);)
        if (!line.empty() && line.front() != '#') lines.push_back(line);
    if (lines.empty()) throw ParseError("csv report has no header", 0);

    const auto header = split_csv_line(lines.front());
    std::map<std::string, std::size_t> col;
    std::vector<std::pair<std::string, std::size_t>> per_class, per_class_shuffled;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const auto& h = header[i];
        col[h] = i;
        if (h.starts_with("f1[")) per_class.emplace_back(h.substr(3, h.size() - 4), i);
        if (h.starts_with("f1_shuffled[")) per_class_shuffled.emplace_back(h.substr(12, h.size() - 13), i);
    }
    const auto at = [&](const std::vector<std::string>& f, const char* name) -> const std::string& {
        const auto it = col.find(name);
        if (it == col.end() || it->second >= f.size()) throw ParseError(std::string("missing column ") + name, 0);
        return f[it->second];
    };

    std::vector<ReportRow> rows;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto f = split_csv_line(lines[li]);
        ReportRow r;
        r.dataset = at(f, "dataset");
        r.n = static_cast<std::size_t>(parse_double(at(f, "n")));
        r.shots = static_cast<std::size_t>(parse_double(at(f, "shots")));
        r.mode = at(f, "mode");
        r.macro_f1 = parse_double(at(f, "macro_f1"));
        for (const auto& [label, i] : per_class) {
            if (f[i].empty()) continue;
            r.class_labels.push_back(label);
            r.per_class_f1.push_back(parse_double(f[i]));
        }
        r.no_answer_rate = parse_double(at(f, "no_answer_rate"));
        r.cost_usd = parse_double(at(f, "cost_usd"));
        if (col.contains("macro_f1_shuffled") && !at(f, "macro_f1_shuffled").empty()) {
            r.macro_f1_shuffled = parse_double(at(f, "macro_f1_shuffled"));
            for (const auto& [label, i] : per_class_shuffled)
                if (!f[i].empty()) r.per_class_f1_shuffled.push_back(parse_double(f[i]));
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace insighttab
