#include "insighttab/dataset.hpp"

#include "insighttab/error.hpp"
#include "insighttab/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace insighttab {

namespace {

constexpr std::uint64_t kSplitStream = 0x53504c4954ULL;   // "SPLIT"
constexpr std::uint64_t kCapStream = 0x434150ULL;         // "CAP"
constexpr std::uint64_t kSampleStream = 0x53414d504cULL;  // "SAMPL"

std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

bool is_missing_token(std::string_view s) {
    static const std::set<std::string_view> tokens = {"", "?", "NA", "N/A", "nan", "NaN", "NULL", "null"};
    return tokens.contains(s);
}

enum class NumberParse { not_a_number, finite, out_of_range };

NumberParse parse_number(std::string_view s, double& out) {
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    if (s.empty()) return NumberParse::not_a_number;
    // from_chars accepts "inf"/"nan"; those are not numbers for our purposes.
    const char c0 = s.front() == '-' && s.size() > 1 ? s[1] : s.front();
    if (!(std::isdigit(static_cast<unsigned char>(c0)) || c0 == '.')) return NumberParse::not_a_number;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ptr != s.data() + s.size()) return NumberParse::not_a_number;
    if (ec == std::errc::result_out_of_range) return NumberParse::out_of_range;
    if (ec != std::errc{}) return NumberParse::not_a_number;
    return std::isfinite(out) ? NumberParse::finite : NumberParse::out_of_range;
}

// Reads one RFC 4180 record. Returns false at end of input. `line` is advanced
// by the number of physical lines consumed.
bool read_record(std::istream& in, char delim, std::vector<std::string>& fields, std::size_t& line) {
    fields.clear();
    std::string field;
    bool in_quotes = false;
    bool any = false;
    char c;
    while (in.get(c)) {
        any = true;
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    field.push_back('"');
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                field.push_back(c);
            }
            continue;
        }
        if (c == '"') {
            in_quotes = true;
        } else if (c == delim) {
            fields.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            ++line;
            fields.push_back(std::move(field));
            return true;
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    if (!any) return false;
    fields.push_back(std::move(field));
    ++line;
    return true;
}

bool blank_record(const std::vector<std::string>& fields) {
    return fields.size() == 1 && trim(fields.front()).empty();
}

FeatureValue cell_value(std::string_view raw, FeatureKind kind, std::size_t line, const std::string& column) {
    const auto text = trim(raw);
    if (is_missing_token(text)) return FeatureValue::missing();
    if (kind == FeatureKind::categorical) return FeatureValue::categorical(text);
    double v = 0.0;
    switch (parse_number(text, v)) {
        case NumberParse::finite: return FeatureValue::numeric(v);
        case NumberParse::out_of_range: return FeatureValue::missing();
        case NumberParse::not_a_number: break;
    }
    throw ParseError("column '" + column + "' is numeric but cell '" + std::string(text) + "' is not a number",
                     line);
}

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const auto mid = values.size() / 2;
    if (values.size() % 2 == 1) return values[mid];
    return values[mid - 1] + (values[mid] - values[mid - 1]) / 2.0;
}

}  // namespace

std::string_view to_string(FeatureKind kind) {
    return kind == FeatureKind::numeric ? "numeric" : "categorical";
}

FeatureValue FeatureValue::numeric(double value) {
    FeatureValue v;
    if (std::isfinite(value)) v.value_ = value == 0.0 ? 0.0 : value;
    return v;
}

FeatureValue FeatureValue::categorical(std::string_view token) {
    FeatureValue v;
    const auto t = trim(token);
    if (!t.empty()) v.value_ = std::string(t);
    return v;
}

// ---------------------------------------------------------------------------
// Schema / dataset

void Schema::validate() const {
    std::set<std::string_view> names;
    for (const auto& f : features) {
        if (f.name.empty()) throw SchemaError("feature with empty name");
        if (!names.insert(f.name).second) throw SchemaError("duplicate feature name '" + f.name + "'");
    }
    if (!label_column.empty() && names.contains(label_column))
        throw SchemaError("label column '" + label_column + "' is also a feature");
    if (class_labels.size() < 2)
        throw SchemaError("need at least 2 class labels, got " + std::to_string(class_labels.size()));
    if (std::set<std::string_view>(class_labels.begin(), class_labels.end()).size() != class_labels.size())
        throw SchemaError("duplicate class labels");
    if (verbalizer.size() != class_labels.size())
        throw SchemaError("verbalizer must give one answer per class label");
    if (std::set<std::string_view>(verbalizer.begin(), verbalizer.end()).size() != verbalizer.size())
        throw SchemaError("verbalizer maps two classes to the same answer");
}

std::vector<std::string> Schema::feature_names() const {
    std::vector<std::string> out;
    out.reserve(features.size());
    for (const auto& f : features) out.push_back(f.name);
    return out;
}

std::optional<std::size_t> Schema::feature_index(std::string_view name) const {
    for (std::size_t i = 0; i < features.size(); ++i)
        if (features[i].name == name) return i;
    return std::nullopt;
}

std::optional<std::size_t> Schema::class_index(std::string_view label) const {
    for (std::size_t i = 0; i < class_labels.size(); ++i)
        if (class_labels[i] == label) return i;
    return std::nullopt;
}

const std::string& Schema::answer_for(std::size_t cls) const {
    if (cls >= verbalizer.size()) throw ArgumentError("class index out of range");
    return verbalizer[cls];
}

void LabeledDataset::validate() const {
    schema.validate();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].features.size() != schema.feature_count())
            throw ShapeError("row " + std::to_string(i) + " has " + std::to_string(rows[i].features.size()) +
                             " values, schema has " + std::to_string(schema.feature_count()));
        if (rows[i].label >= schema.class_count())
            throw SchemaError("row " + std::to_string(i) + " has an invalid label index");
    }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
    LabeledDataset out{schema, {}};
    out.rows.reserve(indices.size());
    for (auto i : indices) {
        if (i >= rows.size()) throw ArgumentError("subset index out of range");
        out.rows.push_back(rows[i]);
    }
    return out;
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
    std::vector<std::size_t> counts(schema.class_count(), 0);
    for (const auto& r : rows) ++counts.at(r.label);
    return counts;
}

// ---------------------------------------------------------------------------
// Task metadata

void TaskSpec::validate() const {
    if (answer_choices.size() < 2) throw ValidationError("answer_choices needs at least 2 entries");
    std::set<std::string_view> seen;
    for (const auto& c : answer_choices) {
        if (trim(c).empty()) throw ValidationError("empty answer choice");
        if (!seen.insert(c).second) throw ValidationError("duplicate answer choice '" + c + "'");
    }
    if (verbalizer.size() != answer_choices.size())
        throw ValidationError("verbalizer must list one class label per answer choice");
    std::set<std::string_view> labels;
    for (std::size_t i = 0; i < verbalizer.size(); ++i) {
        if (verbalizer[i].second != answer_choices[i])
            throw ValidationError("verbalizer answers must equal answer_choices in order");
        if (!labels.insert(verbalizer[i].first).second)
            throw ValidationError("duplicate class label '" + verbalizer[i].first + "' in verbalizer");
    }
}

std::string TaskSpec::merge_target() const {
    if (!prediction_target.empty()) return prediction_target;
    return "the answer to the question \"" + question + "\"";
}

TaskSpec parse_task_spec(std::string_view json_text) {
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("task metadata is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw SchemaError("task metadata must be a JSON object");

    const auto text = [&](const char* key, bool required) -> std::string {
        if (!j.contains(key)) {
            if (required) throw SchemaError(std::string("missing required key: ") + key);
            return {};
        }
        if (!j[key].is_string()) throw SchemaError(std::string("key must be a string: ") + key);
        return j[key].get<std::string>();
    };

    TaskSpec t;
    t.title = text("title", true);
    t.description = text("description", true);
    t.question = text("question", true);
    t.answer_instruction = text("answer_instruction", true);
    if (!j.contains("answer_choices")) throw SchemaError("missing required key: answer_choices");
    if (!j["answer_choices"].is_array()) throw SchemaError("key must be an array: answer_choices");
    for (const auto& c : j["answer_choices"]) {
        if (!c.is_string()) throw SchemaError("answer_choices entries must be strings");
        t.answer_choices.push_back(c.get<std::string>());
    }
    t.label_column = text("label_column", false);
    t.prediction_target = text("prediction_target", false);

    if (j.contains("verbalizer")) {
        const auto& v = j["verbalizer"];
        if (v.is_object()) {
            for (const auto& [label, answer] : v.items()) {
                if (!answer.is_string()) throw SchemaError("verbalizer values must be strings");
                t.verbalizer.emplace_back(label, answer.get<std::string>());
            }
            // Object keys carry no order; follow answer_choices instead.
            const auto rank = [&](const std::string& answer) {
                return std::find(t.answer_choices.begin(), t.answer_choices.end(), answer) - t.answer_choices.begin();
            };
            std::stable_sort(t.verbalizer.begin(), t.verbalizer.end(),
                             [&](const auto& a, const auto& b) { return rank(a.second) < rank(b.second); });
        } else if (v.is_array()) {
            for (const auto& pair : v) {
                if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string())
                    throw SchemaError("verbalizer array entries must be [label, answer] string pairs");
                t.verbalizer.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
            }
        } else {
            throw SchemaError("verbalizer must be an object or an array of pairs");
        }
    } else {
        for (const auto& c : t.answer_choices) t.verbalizer.emplace_back(c, c);
    }
    t.validate();
    return t;
}

TaskSpec load_task_spec(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open task metadata " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_task_spec(buf.str());
}

Schema schema_hints_from_task(const TaskSpec& task) {
    Schema s;
    s.label_column = task.label_column;
    for (const auto& [label, answer] : task.verbalizer) {
        s.class_labels.push_back(label);
        s.verbalizer.push_back(answer);
    }
    return s;
}

// ---------------------------------------------------------------------------
// CSV ingestion

LabeledDataset load_csv(const std::filesystem::path& path, const CsvOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read_csv(in, options);
}

LabeledDataset read_csv(std::istream& in, const CsvOptions& options) {
    std::vector<std::string> header;
    std::size_t line = 0;
    if (!read_record(in, options.delimiter, header, line) || blank_record(header))
        throw EmptyInputError("empty input: no header row");
    if (!header.empty() && header.front().starts_with("\xEF\xBB\xBF")) header.front().erase(0, 3);
    for (auto& h : header) h = std::string(trim(h));

    std::string label_name = options.label_column;
    if (label_name.empty() && options.hints) label_name = options.hints->label_column;
    if (label_name.empty()) label_name = header.back();
    const auto label_it = std::find(header.begin(), header.end(), label_name);
    if (label_it == header.end()) throw SchemaError("label column '" + label_name + "' not found in header");
    const auto label_col = static_cast<std::size_t>(label_it - header.begin());

    // Raw cells, column-major over features.
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> labels;
    std::vector<std::size_t> lines;
    std::vector<std::string> record;
    while (true) {
        const auto start_line = line + 1;
        if (!read_record(in, options.delimiter, record, line)) break;
        if (blank_record(record) && header.size() > 1) continue;
        if (record.size() != header.size())
            throw ParseError("expected " + std::to_string(header.size()) + " fields, found " +
                                 std::to_string(record.size()),
                             start_line);
        labels.emplace_back(trim(record[label_col]));
        if (labels.back().empty()) throw ParseError("empty label", start_line);
        lines.push_back(start_line);
        cells.push_back(std::move(record));
        record = {};
    }
    if (cells.empty()) throw EmptyInputError("empty input: header has no data rows");

    Schema schema;
    schema.label_column = label_name;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c == label_col) continue;
        FeatureSpec spec{header[c], FeatureKind::numeric};
        std::optional<FeatureKind> hinted;
        if (options.hints) {
            for (const auto& f : options.hints->features)
                if (f.name == spec.name) hinted = f.kind;
        }
        if (hinted) {
            spec.kind = *hinted;
        } else {
            for (const auto& r : cells) {
                const auto text = trim(r[c]);
                if (is_missing_token(text)) continue;
                double v;
                if (parse_number(text, v) == NumberParse::not_a_number) {
                    spec.kind = FeatureKind::categorical;
                    break;
                }
            }
        }
        schema.features.push_back(std::move(spec));
    }

    if (options.hints && !options.hints->class_labels.empty()) {
        schema.class_labels = options.hints->class_labels;
        schema.verbalizer = options.hints->verbalizer.empty() ? schema.class_labels : options.hints->verbalizer;
    } else {
        std::set<std::string> distinct(labels.begin(), labels.end());
        schema.class_labels.assign(distinct.begin(), distinct.end());
        schema.verbalizer = schema.class_labels;
    }
    schema.validate();

    LabeledDataset ds{schema, {}};
    ds.rows.reserve(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        Row row;
        row.id = i;
        const auto cls = schema.class_index(labels[i]);
        if (!cls) throw ParseError("label '" + labels[i] + "' is not a known class", lines[i]);
        row.label = *cls;
        std::size_t f = 0;
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (c == label_col) continue;
            row.features.push_back(cell_value(cells[i][c], schema.features[f].kind, lines[i], header[c]));
            ++f;
        }
        ds.rows.push_back(std::move(row));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Splitting and sampling

void SplitPlan::validate() const {
    if (fold_count < 2) throw ConfigError("fold_count must be >= 2");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
    if (few_shot_n < 1) throw ConfigError("few_shot_n must be >= 1");
    if (test_cap < 1) throw ConfigError("test_cap must be >= 1");
}

std::size_t SplitPlan::raw_test_size(std::size_t n) const {
    const double exact = (1.0 - train_fraction) * static_cast<double>(n);
    auto t = static_cast<std::size_t>(std::ceil(exact - 1e-9));
    if (t < 1) t = 1;
    if (n > 1 && t > n - 1) t = n - 1;
    return t;
}

Split split_train_test(const LabeledDataset& dataset, const SplitPlan& plan, std::size_t fold) {
    plan.validate();
    if (fold >= plan.fold_count)
        throw ArgumentError("fold " + std::to_string(fold) + " out of range for " +
                            std::to_string(plan.fold_count) + " folds");
    const auto n = dataset.size();
    if (n < plan.fold_count)
        throw InsufficientDataError("dataset has " + std::to_string(n) + " rows, fewer than " +
                                    std::to_string(plan.fold_count) + " folds");

    const auto perm = Rng(Rng::derive({plan.seed, kSplitStream})).permutation(n);
    const auto t = plan.raw_test_size(n);
    std::vector<bool> in_test(n, false);
    std::vector<std::size_t> test;
    test.reserve(t);
    for (std::size_t j = 0; j < t; ++j) {
        const auto idx = perm[(fold * t + j) % n];
        in_test[idx] = true;
        test.push_back(idx);
    }
    if (test.size() > plan.test_cap) {
        std::sort(test.begin(), test.end());
        auto pick = Rng(Rng::derive({plan.seed, kCapStream, fold})).choose(test.size(), plan.test_cap);
        std::vector<std::size_t> capped;
        capped.reserve(pick.size());
        for (auto p : pick) capped.push_back(test[p]);
        test = std::move(capped);
    }
    std::sort(test.begin(), test.end());

    std::vector<std::size_t> train;
    train.reserve(n - t);
    for (std::size_t i = 0; i < n; ++i)
        if (!in_test[i]) train.push_back(i);

    Split s;
    s.train = dataset.subset(train);
    s.test = dataset.subset(test);
    s.train_indices = std::move(train);
    s.test_indices = std::move(test);
    return s;
}

std::vector<std::size_t> sample_few_shot_indices(const LabeledDataset& train, std::size_t n, std::uint64_t seed,
                                                 SampleOptions options) {
    const auto size = train.size();
    if (n < 1) throw ArgumentError("few-shot sample size must be >= 1");
    if (n > size)
        throw InsufficientDataError("cannot sample " + std::to_string(n) + " rows from " + std::to_string(size));
    std::vector<std::size_t> out;
    if (n == size) {
        out.resize(size);
        std::iota(out.begin(), out.end(), std::size_t{0});
        return out;
    }
    if (!options.stratified) {
        out = Rng(Rng::derive({seed, kSampleStream})).choose(size, n);
        std::sort(out.begin(), out.end());
        return out;
    }

    // Proportional allocation with largest remainders; ties go to the lower class.
    const auto k = train.schema.class_count();
    std::vector<std::vector<std::size_t>> by_class(k);
    for (std::size_t i = 0; i < size; ++i) by_class[train.rows[i].label].push_back(i);
    std::vector<std::size_t> quota(k);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const double exact = static_cast<double>(n) * static_cast<double>(by_class[c].size()) / static_cast<double>(size);
        quota[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += quota[c];
        remainders.emplace_back(exact - static_cast<double>(quota[c]), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < n; r = (r + 1) % k) {
        const auto c = remainders[r].second;
        if (quota[c] < by_class[c].size()) {
            ++quota[c];
            ++assigned;
        }
    }
    for (std::size_t c = 0; c < k; ++c) {
        auto pick = Rng(Rng::derive({seed, kSampleStream, c + 1})).choose(by_class[c].size(), quota[c]);
        for (auto p : pick) out.push_back(by_class[c][p]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

LabeledDataset sample_few_shot(const LabeledDataset& train, std::size_t n, std::uint64_t seed,
                               SampleOptions options) {
    if (n == train.size() && n >= 1) return train;
    const auto idx = sample_few_shot_indices(train, n, seed, options);
    return train.subset(idx);
}

ShuffledRow shuffle_columns(std::span<const FeatureValue> row, const Schema& schema, std::uint64_t seed) {
    if (row.size() != schema.feature_count()) throw ShapeError("row does not match schema width");
    ShuffledRow out;
    out.order = Rng(seed).permutation(row.size());
    out.names.reserve(row.size());
    out.values.reserve(row.size());
    for (auto i : out.order) {
        out.names.push_back(schema.features[i].name);
        out.values.push_back(row[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ordinal encoding

OrdinalEncoding OrdinalEncoding::fit(const LabeledDataset& dataset) {
    std::vector<ColumnEncoding> cols;
    const auto d = dataset.schema.feature_count();
    cols.reserve(d);
    for (std::size_t j = 0; j < d; ++j) {
        ColumnEncoding col{dataset.schema.features[j].name, dataset.schema.features[j].kind, {}, 0.0};
        if (col.kind == FeatureKind::categorical) {
            for (const auto& r : dataset.rows) {
                const auto& v = r.features[j];
                if (!v.is_categorical()) continue;
                if (std::find(col.tokens.begin(), col.tokens.end(), v.token()) == col.tokens.end())
                    col.tokens.push_back(v.token());
            }
        } else {
            std::vector<double> observed;
            for (const auto& r : dataset.rows)
                if (r.features[j].is_numeric()) observed.push_back(r.features[j].number());
            col.impute = median(std::move(observed));
        }
        cols.push_back(std::move(col));
    }
    return OrdinalEncoding(std::move(cols));
}

std::vector<double> OrdinalEncoding::encode_row(std::span<const FeatureValue> row) const {
    if (row.size() != columns_.size())
        throw ShapeError("row has " + std::to_string(row.size()) + " values, encoding expects " +
                         std::to_string(columns_.size()));
    std::vector<double> out(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) {
        const auto& col = columns_[j];
        const auto& v = row[j];
        if (col.kind == FeatureKind::numeric) {
            out[j] = v.is_numeric() ? v.number() : col.impute;
        } else if (v.is_categorical()) {
            const auto it = std::find(col.tokens.begin(), col.tokens.end(), v.token());
            out[j] = it == col.tokens.end() ? kMissingCode : static_cast<double>(it - col.tokens.begin());
        } else if (v.is_numeric()) {
            throw ShapeError("numeric value in categorical column '" + col.name + "'");
        } else {
            out[j] = kMissingCode;
        }
    }
    return out;
}

Matrix OrdinalEncoding::encode(const LabeledDataset& dataset) const {
    Matrix m(dataset.size(), columns_.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto encoded = encode_row(dataset.rows[i].features);
        std::copy(encoded.begin(), encoded.end(), m.values.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    }
    return m;
}

FeatureValue OrdinalEncoding::decode(std::size_t column, double code) const {
    const auto& col = columns_.at(column);
    if (col.kind == FeatureKind::numeric) return FeatureValue::numeric(code);
    if (code < 0 || code >= static_cast<double>(col.tokens.size())) return FeatureValue::missing();
    return FeatureValue::categorical(col.tokens[static_cast<std::size_t>(code)]);
}

EncodedDataset encode_ordinal(const LabeledDataset& dataset) {
    auto encoding = OrdinalEncoding::fit(dataset);
    auto matrix = encoding.encode(dataset);
    return {std::move(matrix), std::move(encoding)};
}

}  // namespace insighttab
