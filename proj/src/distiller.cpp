#include "insighttab/distiller.hpp"

#include "insighttab/error.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace insighttab {

namespace {

constexpr const char* kPackageFormat = "insighttab-package";

RoleUsage minus(const RoleUsage& a, const RoleUsage& b) {
    return {a.requests - b.requests, a.cache_hits - b.cache_hits, a.input_tokens - b.input_tokens,
            a.output_tokens - b.output_tokens, a.cost_usd - b.cost_usd};
}

nlohmann::json rule_set_json(const RuleSet& r) { return {{"provenance", r.provenance}, {"rules", r.rules}}; }

RuleSet rule_set_from(const nlohmann::json& j) {
    return {j.at("rules").get<std::vector<std::string>>(), j.at("provenance").get<std::string>()};
}

nlohmann::json role_usage_json(const RoleUsage& u) {
    return {{"requests", u.requests},
            {"cache_hits", u.cache_hits},
            {"input_tokens", u.input_tokens},
            {"output_tokens", u.output_tokens},
            {"cost_usd", u.cost_usd}};
}

RoleUsage role_usage_from(const nlohmann::json& j) {
    return {j.at("requests").get<std::int64_t>(), j.at("cache_hits").get<std::int64_t>(),
            j.at("input_tokens").get<std::int64_t>(), j.at("output_tokens").get<std::int64_t>(),
            j.at("cost_usd").get<double>()};
}

template <typename Fn>
auto run_stage(const char* stage, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

std::string join_ids(std::span<const int> ids, std::size_t fallback) {
    return ids.empty() ? std::to_string(fallback) : std::to_string(ids[fallback]);
}

}  // namespace

// ---------------------------------------------------------------------------
// RuleSet

RuleSet RuleSet::from_text(std::string_view text, std::string provenance) {
    RuleSet r{{}, std::move(provenance)};
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(start, end - start);
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
            line.remove_suffix(1);
        while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
        if (!line.empty()) r.rules.emplace_back(line);
        start = end + 1;
    }
    return r;
}

std::string RuleSet::text() const {
    std::string out;
    for (std::size_t i = 0; i < rules.size(); ++i) {
        if (i) out += '\n';
        out += rules[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config

std::string DistillConfig::mode() const {
    std::string m;
    if (no_demonstration) m += "-demonstration";
    if (no_grouping) m += "-grouping";
    if (no_reflection) m += "-reflection";
    return m.empty() ? "full" : m;
}

nlohmann::json DistillConfig::to_json() const {
    return {{"n_e", n_e},
            {"n_h", n_h ? nlohmann::json(*n_h) : nlohmann::json(nullptr)},
            {"gbdt",
             {{"rounds", gbdt.rounds},
              {"learning_rate", gbdt.learning_rate},
              {"max_depth", gbdt.max_depth},
              {"reg_lambda", gbdt.reg_lambda},
              {"gamma", gbdt.gamma},
              {"min_child_weight", gbdt.min_child_weight}}},
            {"seed", seed},
            {"no_demonstration", no_demonstration},
            {"no_grouping", no_grouping},
            {"no_reflection", no_reflection},
            {"reflection_rounds", reflection_rounds},
            {"balanced_exemplars", balanced_exemplars},
            {"mode", mode()}};
}

// ---------------------------------------------------------------------------
// Package

std::vector<ExemplarBlock> InsightPackage::shots() const {
    std::vector<ExemplarBlock> out;
    if (!use_demonstrations) return out;
    out.reserve(easy_exemplars.size());
    for (const auto& e : easy_exemplars) out.push_back(e.block);
    return out;
}

PromptText InsightPackage::classification_prompt(const TaskSpec& task, std::string_view query_features) const {
    const auto s = shots();
    const auto extra = reflection_rules ? std::optional<std::string>(reflection_rules->text()) : std::nullopt;
    return render_classification_prompt(task, merged_rules.text(),
                                        extra ? std::optional<std::string_view>(*extra) : std::nullopt, s,
                                        query_features);
}

nlohmann::json InsightPackage::to_json() const {
    auto exemplars = nlohmann::json::array();
    for (const auto& e : easy_exemplars) {
        exemplars.push_back({{"index", e.index},
                             {"row_id", e.row_id},
                             {"label", e.label},
                             {"entropy", e.entropy},
                             {"features", e.block.serialized_features},
                             {"question", e.block.question},
                             {"answer", e.block.answer}});
    }
    auto groups = nlohmann::json::array();
    for (const auto& g : group_rules) groups.push_back(rule_set_json(g));
    auto outcomes = nlohmann::json::array();
    for (const auto& o : reflection.outcomes) {
        outcomes.push_back({{"index", o.index},
                            {"truth", o.truth},
                            {"predicted", o.predicted ? nlohmann::json(*o.predicted) : nlohmann::json(nullptr)}});
    }
    return {{"format", kPackageFormat},
            {"version", kFormatVersion},
            {"config", config},
            {"feature_names", feature_names},
            {"merged_rules", rule_set_json(merged_rules)},
            {"reflection_rules", reflection_rules ? rule_set_json(*reflection_rules) : nlohmann::json(nullptr)},
            {"group_rules", groups},
            {"easy_exemplars", exemplars},
            {"use_demonstrations", use_demonstrations},
            {"reflection",
             {{"hard_count", reflection.hard_count},
              {"hard_indices", reflection.hard_indices},
              {"misclassified_indices", reflection.misclassified_indices},
              {"outcomes", outcomes}}},
            {"notes", notes},
            {"usage", {{"summarizer", role_usage_json(usage.summarizer)}, {"predictor", role_usage_json(usage.predictor)}}}};
}

InsightPackage InsightPackage::from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != kPackageFormat) throw ConfigError("not an insight package");
        if (j.at("version").get<int>() != kFormatVersion)
            throw ConfigError("unsupported package version " + j.at("version").dump());
        InsightPackage p;
        p.config = j.at("config");
        p.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        p.merged_rules = rule_set_from(j.at("merged_rules"));
        if (!j.at("reflection_rules").is_null()) p.reflection_rules = rule_set_from(j.at("reflection_rules"));
        for (const auto& g : j.at("group_rules")) p.group_rules.push_back(rule_set_from(g));
        for (const auto& e : j.at("easy_exemplars")) {
            p.easy_exemplars.push_back({e.at("index").get<std::size_t>(),
                                        e.at("row_id").get<std::size_t>(),
                                        e.at("label").get<std::size_t>(),
                                        e.at("entropy").get<double>(),
                                        {e.at("features").get<std::string>(), e.at("question").get<std::string>(),
                                         e.at("answer").get<std::string>()}});
        }
        p.use_demonstrations = j.at("use_demonstrations").get<bool>();
        const auto& r = j.at("reflection");
        p.reflection.hard_count = r.at("hard_count").get<std::size_t>();
        p.reflection.hard_indices = r.at("hard_indices").get<std::vector<std::size_t>>();
        p.reflection.misclassified_indices = r.at("misclassified_indices").get<std::vector<std::size_t>>();
        for (const auto& o : r.at("outcomes")) {
            ReflectionOutcome out{o.at("index").get<std::size_t>(), o.at("truth").get<std::size_t>(), std::nullopt};
            if (!o.at("predicted").is_null()) out.predicted = o.at("predicted").get<std::size_t>();
            p.reflection.outcomes.push_back(out);
        }
        p.notes = j.at("notes").get<std::vector<std::string>>();
        p.usage.summarizer = role_usage_from(j.at("usage").at("summarizer"));
        p.usage.predictor = role_usage_from(j.at("usage").at("predictor"));
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed insight package: ") + e.what());
    }
}

std::string InsightPackage::dump() const { return to_json().dump(2) + "\n"; }

void InsightPackage::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << dump();
}

InsightPackage InsightPackage::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("malformed insight package: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Operators

std::vector<ExemplarBlock> exemplar_blocks(const LabeledDataset& data, std::span<const std::size_t> indices,
                                           const TaskSpec& task) {
    std::vector<ExemplarBlock> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(make_exemplar(data.rows.at(i), data.schema, task));
    return out;
}

std::vector<RuleSet> summarize_group_rules(std::span<const std::vector<ExemplarBlock>> groups, Gateway& summarizer,
                                           std::span<const int> group_ids) {
    std::vector<PromptText> prompts;
    prompts.reserve(groups.size());
    for (const auto& g : groups) prompts.push_back(render_group_rule_prompt(g));
    const auto outcomes = summarizer.complete_all(prompts);
    std::vector<RuleSet> out;
    out.reserve(groups.size());
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto id = join_ids(group_ids, i);
        if (!outcomes[i].response) throw GatewayError("group " + id + ": " + outcomes[i].error);
        out.push_back(RuleSet::from_text(outcomes[i].response->text, "group:" + id));
    }
    return out;
}

RuleSet merge_rules(std::span<const RuleSet> rule_sets, const TaskSpec& task, Gateway& summarizer) {
    if (rule_sets.empty()) throw ArgumentError("merge needs at least one rule set");
    std::vector<std::string> blocks;
    blocks.reserve(rule_sets.size());
    for (const auto& r : rule_sets) blocks.push_back(r.text());
    const auto response = summarizer.complete(render_merge_prompt(blocks, task));
    return RuleSet::from_text(response.text, "merged");
}

std::vector<ScoredExemplar> select_exemplars(std::span<const double> entropies, const LabeledDataset& train,
                                             const TaskSpec& task, std::size_t n_e, bool balanced) {
    if (entropies.size() != train.size()) throw ShapeError("one entropy score per training row required");
    if (n_e > train.size())
        throw ArgumentError("n_e=" + std::to_string(n_e) + " exceeds training size " + std::to_string(train.size()));

    const auto easier = [&](std::size_t a, std::size_t b) {
        return entropies[a] < entropies[b] || (entropies[a] == entropies[b] && a < b);
    };

    std::vector<std::size_t> chosen;
    if (n_e == 0) {
        // nothing
    } else if (!balanced) {
        chosen = rank_select(entropies, n_e, RankDirection::lowest);
    } else {
        std::vector<std::vector<std::size_t>> by_class(train.schema.class_count());
        for (std::size_t i = 0; i < train.size(); ++i) by_class[train.rows[i].label].push_back(i);
        for (auto& c : by_class) std::sort(c.begin(), c.end(), easier);
        std::vector<std::size_t> cursor(by_class.size(), 0);
        while (chosen.size() < n_e) {
            for (std::size_t c = 0; c < by_class.size() && chosen.size() < n_e; ++c)
                if (cursor[c] < by_class[c].size()) chosen.push_back(by_class[c][cursor[c]++]);
        }
    }
    std::sort(chosen.begin(), chosen.end(), easier);

    std::vector<ScoredExemplar> out;
    out.reserve(chosen.size());
    for (auto i : chosen) {
        const auto& row = train.rows[i];
        out.push_back({i, row.id, row.label, entropies[i], make_exemplar(row, train.schema, task)});
    }
    return out;
}

std::vector<ScoredExemplar> select_exemplars(const GbdtModel& model, const LabeledDataset& train,
                                             const TaskSpec& task, std::size_t n_e) {
    const auto h = entropy_scores(model, train);
    return select_exemplars(h, train, task, n_e);
}

ReflectionResult reflect(std::span<const double> entropies, const LabeledDataset& train, const TaskSpec& task,
                         std::span<const ScoredExemplar> exemplars, const RuleSet& merged_rules, Gateways gateways,
                         std::size_t n_h, ReflectOptions options) {
    if (entropies.size() != train.size()) throw ShapeError("one entropy score per training row required");
    if (n_h > train.size())
        throw ArgumentError("n_h=" + std::to_string(n_h) + " exceeds training size " + std::to_string(train.size()));

    std::set<std::size_t> easy;
    for (const auto& e : exemplars) easy.insert(e.index);
    std::vector<std::size_t> candidates;
    std::vector<double> candidate_scores;
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (easy.contains(i)) continue;
        candidates.push_back(i);
        candidate_scores.push_back(entropies[i]);
    }

    ReflectionResult result;
    const auto k = std::min(n_h, candidates.size());
    result.report.hard_count = k;
    if (k == 0) return result;
    for (auto c : rank_select(candidate_scores, k, RankDirection::highest))
        result.report.hard_indices.push_back(candidates[c]);

    std::vector<ExemplarBlock> shots;
    if (options.use_demonstrations)
        for (const auto& e : exemplars) shots.push_back(e.block);

    const auto rules_text = merged_rules.text();
    std::vector<std::size_t> pending = result.report.hard_indices;
    for (int round = 0; round < std::max(1, options.rounds) && !pending.empty(); ++round) {
        const auto extra = result.rules ? std::optional<std::string>(result.rules->text()) : std::nullopt;
        std::vector<PromptText> prompts;
        prompts.reserve(pending.size());
        for (auto i : pending) {
            prompts.push_back(render_classification_prompt(
                task, rules_text, extra ? std::optional<std::string_view>(*extra) : std::nullopt, shots,
                serialize_row(train.rows[i].features, train.schema)));
        }
        const auto outcomes = gateways.predictor.complete_all(prompts);

        std::vector<std::size_t> wrong;
        for (std::size_t p = 0; p < pending.size(); ++p) {
            const auto i = pending[p];
            if (!outcomes[p].response) throw GatewayError("hard sample " + std::to_string(i) + ": " + outcomes[p].error);
            const auto predicted = parse_class(outcomes[p].response->text, task, train.schema);
            const auto truth = train.rows[i].label;
            if (round == 0) result.report.outcomes.push_back({i, truth, predicted});
            if (!predicted || *predicted != truth) wrong.push_back(i);
        }
        if (round == 0) result.report.misclassified_indices = wrong;
        if (wrong.empty()) break;

        const auto blocks = exemplar_blocks(train, wrong, task);
        const auto response = gateways.summarizer.complete(render_group_rule_prompt(blocks));
        auto learned = RuleSet::from_text(response.text, "reflection");
        if (!result.rules) {
            result.rules = std::move(learned);
        } else {
            result.rules->rules.insert(result.rules->rules.end(), learned.rules.begin(), learned.rules.end());
        }
        pending = std::move(wrong);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Pipeline

InsightPackage distill(const LabeledDataset& train, const TaskSpec& task, const DistillConfig& config,
                       Gateways gateways, const DistillOptions& options) {
    if (train.empty()) throw InsufficientDataError("cannot distill an empty training set");
    const auto summarizer_before = gateways.summarizer.usage()->snapshot();
    const auto predictor_before = gateways.predictor.usage()->snapshot();

    InsightPackage package;
    package.feature_names = train.schema.feature_names();
    package.use_demonstrations = !config.no_demonstration;

    const auto model = run_stage("fit", [&] { return fit(train, config.gbdt, config.seed); });

    if (!config.no_grouping) {
        const auto grouping = run_stage("group", [&] { return group_by_first_tree(model, train); });
        package.notes.insert(package.notes.end(), grouping.notes.begin(), grouping.notes.end());

        package.group_rules = run_stage("summarize", [&] {
            std::vector<std::vector<ExemplarBlock>> groups;
            for (const auto& g : grouping.groups) groups.push_back(exemplar_blocks(train, g, task));

            std::string fingerprint_material = gateways.summarizer.settings().model;
            for (const auto& g : groups) fingerprint_material += render_group_rule_prompt(g).text;
            const auto fingerprint = sha256_hex(fingerprint_material);
            std::optional<std::filesystem::path> artifact;
            if (options.work_dir) {
                std::filesystem::create_directories(*options.work_dir);
                artifact = *options.work_dir / "group_rules.json";
                std::ifstream in(*artifact, std::ios::binary);
                if (in) {
                    const auto j = nlohmann::json::parse(in, nullptr, false);
                    if (!j.is_discarded() && j.value("fingerprint", std::string{}) == fingerprint) {
                        std::vector<RuleSet> resumed;
                        for (const auto& r : j.at("rule_sets")) resumed.push_back(rule_set_from(r));
                        return resumed;
                    }
                }
            }
            auto rule_sets = summarize_group_rules(groups, gateways.summarizer, grouping.leaf_ids);
            if (artifact) {
                auto sets = nlohmann::json::array();
                for (const auto& r : rule_sets) sets.push_back(rule_set_json(r));
                std::ofstream out(*artifact, std::ios::binary);
                if (!out) throw IoError("cannot write " + artifact->string());
                out << nlohmann::json{{"fingerprint", fingerprint}, {"rule_sets", sets}}.dump(2) << '\n';
            }
            return rule_sets;
        });

        package.merged_rules =
            run_stage("merge", [&] { return merge_rules(package.group_rules, task, gateways.summarizer); });
    } else {
        package.merged_rules.provenance = "merged";
    }

    const auto entropies = run_stage("rank", [&] { return entropy_scores(model, train); });
    package.easy_exemplars = run_stage(
        "rank", [&] { return select_exemplars(entropies, train, task, config.n_e, config.balanced_exemplars); });

    const auto n_h = config.n_h.value_or(default_hard_count(train.size()));
    if (!config.no_reflection) {
        auto reflection = run_stage("reflect", [&] {
            return reflect(entropies, train, task, package.easy_exemplars, package.merged_rules, gateways, n_h,
                           {!config.no_demonstration, config.reflection_rounds});
        });
        package.reflection_rules = std::move(reflection.rules);
        package.reflection = std::move(reflection.report);
    }

    auto snapshot = config.to_json();
    snapshot["n_h"] = n_h;
    snapshot["train_size"] = train.size();
    snapshot["summarizer_model"] = gateways.summarizer.settings().model;
    snapshot["predictor_model"] = gateways.predictor.settings().model;
    snapshot["leaf_count"] = model.first_tree().leaf_count();
    package.config = std::move(snapshot);

    package.usage.summarizer = minus(gateways.summarizer.usage()->snapshot().summarizer, summarizer_before.summarizer);
    package.usage.predictor = minus(gateways.predictor.usage()->snapshot().predictor, predictor_before.predictor);
    return package;
}

}  // namespace insighttab
