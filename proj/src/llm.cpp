#include "insighttab/llm.hpp"

#include "insighttab/error.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

namespace insighttab {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string shortest(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// Value of "The {feature} is {value}." inside a serialized-feature line.
std::optional<std::string> find_feature_value(std::string_view line, std::string_view feature) {
    const std::string needle = "The " + std::string(feature) + " is ";
    std::size_t pos = 0;
    while ((pos = line.find(needle, pos)) != std::string_view::npos) {
        if (pos == 0 || (pos >= 2 && line.substr(pos - 2, 2) == ". ")) {
            const auto start = pos + needle.size();
            auto end = line.find(". The ", start);
            if (end == std::string_view::npos) {
                end = line.size();
                if (end > start && line[end - 1] == '.') --end;
            }
            return std::string(line.substr(start, end - start));
        }
        ++pos;
    }
    return std::nullopt;
}

ScriptMode mode_from_string(const std::string& s) {
    if (s == "fixed_text") return ScriptMode::fixed_text;
    if (s == "echo") return ScriptMode::echo;
    if (s == "keyed_by_prompt_hash") return ScriptMode::keyed_by_prompt_hash;
    if (s == "rule_on_features") return ScriptMode::rule_on_features;
    throw ConfigError("unknown scripted mode '" + s + "'");
}

std::string_view mode_name(ScriptMode m) {
    switch (m) {
        case ScriptMode::fixed_text: return "fixed_text";
        case ScriptMode::echo: return "echo";
        case ScriptMode::keyed_by_prompt_hash: return "keyed_by_prompt_hash";
        case ScriptMode::rule_on_features: return "rule_on_features";
    }
    return "fixed_text";
}

}  // namespace

std::string_view to_string(Role role) { return role == Role::summarizer ? "summarizer" : "predictor"; }

void CompletionRequest::validate() const {
    if (temperature < 0.0) throw ArgumentError("temperature must be >= 0");
    if (max_output_tokens < 1) throw ArgumentError("max_output_tokens must be >= 1");
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string cache_key(const CompletionRequest& request) {
    std::string material = "insighttab-cache-v1";
    material.push_back('\0');
    material += request.model_name;
    material.push_back('\0');
    material += shortest(request.temperature);
    material.push_back('\0');
    material += request.prompt.text;
    return sha256_hex(material);
}

ParsedAnswer parse_answer(std::string_view text, const TaskSpec& task) {
    const auto hay = lower(text);
    std::vector<std::size_t> order(task.answer_choices.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return task.answer_choices[a].size() > task.answer_choices[b].size();
    });

    std::vector<bool> claimed(hay.size(), false);
    std::optional<std::pair<std::size_t, std::size_t>> best;  // (position, choice)
    for (auto c : order) {
        const auto needle = lower(task.answer_choices[c]);
        if (needle.empty()) continue;
        for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
            const auto end = pos + needle.size();
            if (pos > 0 && is_word_char(hay[pos - 1])) continue;
            if (end < hay.size() && is_word_char(hay[end])) continue;
            if (std::any_of(claimed.begin() + static_cast<std::ptrdiff_t>(pos),
                            claimed.begin() + static_cast<std::ptrdiff_t>(end), [](bool b) { return b; }))
                continue;
            std::fill(claimed.begin() + static_cast<std::ptrdiff_t>(pos),
                      claimed.begin() + static_cast<std::ptrdiff_t>(end), true);
            if (!best || pos < best->first) best = {pos, c};
        }
    }
    if (!best) return std::nullopt;
    return best->second;
}

ParsedAnswer parse_class(std::string_view text, const TaskSpec& task, const Schema& schema) {
    const auto answer = parse_answer(text, task);
    if (!answer) return std::nullopt;
    const auto& token = task.answer_choices[*answer];
    for (std::size_t c = 0; c < schema.verbalizer.size(); ++c)
        if (schema.verbalizer[c] == token) return c;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Scripted policies

bool FeatureCondition::matches(std::string_view rendered_value) const {
    if (const auto* num = std::get_if<double>(&value)) {
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(rendered_value.data(), rendered_value.data() + rendered_value.size(), v);
        if (ec != std::errc{} || ptr != rendered_value.data() + rendered_value.size()) return op == "!=";
        if (op == "<") return v < *num;
        if (op == "<=") return v <= *num;
        if (op == ">") return v > *num;
        if (op == ">=") return v >= *num;
        if (op == "==") return v == *num;
        if (op == "!=") return v != *num;
    } else {
        const auto& s = std::get<std::string>(value);
        if (op == "==") return rendered_value == s;
        if (op == "!=") return rendered_value != s;
    }
    throw ConfigError("unsupported operator '" + op + "' for condition on '" + feature + "'");
}

ScriptedPolicy ScriptedPolicy::fixed(std::string text) {
    ScriptedPolicy p;
    p.mode = ScriptMode::fixed_text;
    p.text = std::move(text);
    return p;
}

ScriptedPolicy ScriptedPolicy::echo() {
    ScriptedPolicy p;
    p.mode = ScriptMode::echo;
    return p;
}

ScriptedPolicy ScriptedPolicy::hashed(std::vector<std::string> choices) {
    ScriptedPolicy p;
    p.mode = ScriptMode::keyed_by_prompt_hash;
    p.choices = std::move(choices);
    return p;
}

ScriptedPolicy ScriptedPolicy::on_features(std::vector<FeatureRule> rules, std::string fallback) {
    ScriptedPolicy p;
    p.mode = ScriptMode::rule_on_features;
    p.rules = std::move(rules);
    p.fallback = std::move(fallback);
    return p;
}

void ScriptedPolicy::validate() const {
    static const std::vector<std::string> ops = {"<", "<=", ">", ">=", "==", "!="};
    switch (mode) {
        case ScriptMode::keyed_by_prompt_hash:
            if (choices.empty() && by_hash.empty())
                throw ConfigError("keyed_by_prompt_hash policy needs choices or explicit responses");
            break;
        case ScriptMode::rule_on_features:
            if (!fallback) throw ConfigError("rule_on_features policy needs a default answer to be total");
            for (const auto& r : rules)
                for (const auto& c : r.when) {
                    if (std::find(ops.begin(), ops.end(), c.op) == ops.end())
                        throw ConfigError("unsupported operator '" + c.op + "'");
                    if (std::holds_alternative<std::string>(c.value) && c.op != "==" && c.op != "!=")
                        throw ConfigError("text conditions support only == and !=");
                }
            break;
        default: break;
    }
}

void ScriptedPolicy::validate_against(const TaskSpec& task, const Schema& schema) const {
    validate();
    if (mode != ScriptMode::rule_on_features) return;
    const auto known = [&](const std::string& a) {
        return std::find(task.answer_choices.begin(), task.answer_choices.end(), a) != task.answer_choices.end();
    };
    for (const auto& r : rules) {
        if (!known(r.answer)) throw ConfigError("scripted answer '" + r.answer + "' is not an answer choice");
        for (const auto& c : r.when)
            if (!schema.feature_index(c.feature))
                throw ConfigError("scripted condition names unknown feature '" + c.feature + "'");
    }
    if (!known(*fallback)) throw ConfigError("scripted default '" + *fallback + "' is not an answer choice");
}

ScriptedPolicy ScriptedPolicy::from_json(const nlohmann::json& j) {
    try {
        ScriptedPolicy p;
        p.mode = mode_from_string(j.at("mode").get<std::string>());
        p.text = j.value("text", std::string{});
        if (j.contains("choices")) p.choices = j.at("choices").get<std::vector<std::string>>();
        if (j.contains("responses"))
            p.by_hash = j.at("responses").get<std::map<std::string, std::string>>();
        if (j.contains("default")) p.fallback = j.at("default").get<std::string>();
        for (const auto& r : j.value("rules", nlohmann::json::array())) {
            FeatureRule rule;
            rule.answer = r.at("answer").get<std::string>();
            for (const auto& c : r.at("when")) {
                FeatureCondition cond;
                cond.feature = c.at("feature").get<std::string>();
                cond.op = c.at("op").get<std::string>();
                const auto& v = c.at("value");
                if (v.is_number())
                    cond.value = v.get<double>();
                else
                    cond.value = v.get<std::string>();
                rule.when.push_back(std::move(cond));
            }
            p.rules.push_back(std::move(rule));
        }
        p.validate();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed scripted policy: ") + e.what());
    }
}

nlohmann::json ScriptedPolicy::to_json() const {
    nlohmann::json j{{"mode", std::string(mode_name(mode))}};
    if (!text.empty()) j["text"] = text;
    if (!choices.empty()) j["choices"] = choices;
    if (!by_hash.empty()) j["responses"] = by_hash;
    if (fallback) j["default"] = *fallback;
    if (!rules.empty()) {
        auto rs = nlohmann::json::array();
        for (const auto& r : rules) {
            auto when = nlohmann::json::array();
            for (const auto& c : r.when) {
                nlohmann::json cj{{"feature", c.feature}, {"op", c.op}};
                std::visit([&](const auto& v) { cj["value"] = v; }, c.value);
                when.push_back(std::move(cj));
            }
            rs.push_back({{"when", std::move(when)}, {"answer", r.answer}});
        }
        j["rules"] = std::move(rs);
    }
    return j;
}

ScriptedPolicies load_scripted_policies(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("scripted policy file " + path.string() + " is not valid JSON: " + e.what());
    }
    ScriptedPolicies out;
    if (j.contains("summarizer")) out.summarizer = ScriptedPolicy::from_json(j["summarizer"]);
    if (j.contains("predictor"))
        out.predictor = ScriptedPolicy::from_json(j["predictor"]);
    else if (j.contains("mode"))
        out.predictor = ScriptedPolicy::from_json(j);
    else
        throw ConfigError("scripted policy file needs a 'predictor' policy");
    return out;
}

ScriptedClient::ScriptedClient(ScriptedPolicy policy) : policy_(std::move(policy)) { policy_.validate(); }

std::string ScriptedClient::respond(std::string_view prompt) const {
    switch (policy_.mode) {
        case ScriptMode::fixed_text: return policy_.text;
        case ScriptMode::echo: {
            // Everything before the closing instruction, minus separator lines.
            const std::string sep = "\n" + std::string(markers::kSeparator) + "\n";
            const auto cut = prompt.rfind(sep);
            const auto body = cut == std::string_view::npos ? prompt : prompt.substr(0, cut);
            std::string out;
            std::size_t start = 0;
            while (start <= body.size()) {
                auto end = body.find('\n', start);
                if (end == std::string_view::npos) end = body.size();
                const auto line = body.substr(start, end - start);
                if (line != markers::kSeparator) {
                    if (!out.empty()) out += '\n';
                    out += line;
                }
                start = end + 1;
            }
            return out;
        }
        case ScriptMode::keyed_by_prompt_hash: {
            const auto digest = sha256_hex(prompt);
            if (const auto it = policy_.by_hash.find(digest); it != policy_.by_hash.end()) return it->second;
            if (policy_.choices.empty()) throw ScriptError("no scripted response for prompt digest " + digest);
            const auto bucket = std::stoull(digest.substr(0, 15), nullptr, 16) % policy_.choices.size();
            return policy_.choices[bucket];
        }
        case ScriptMode::rule_on_features: {
            const auto line = extract_query_features(prompt);
            if (!line) throw ScriptError("prompt has no current-question features; template drift?");
            for (const auto& rule : policy_.rules) {
                bool all = true;
                for (const auto& cond : rule.when) {
                    const auto value = find_feature_value(*line, cond.feature);
                    if (!value)
                        throw ScriptError("feature '" + cond.feature + "' not found in query; template drift?");
                    if (!cond.matches(*value)) {
                        all = false;
                        break;
                    }
                }
                if (all) return rule.answer;
            }
            return *policy_.fallback;
        }
    }
    return {};
}

CompletionResponse ScriptedClient::complete(const CompletionRequest& request) {
    request.validate();
    ++calls_;
    {
        std::lock_guard lock(log_mutex_);
        log_.push_back(request.prompt.text);
    }
    CompletionResponse r;
    r.text = respond(request.prompt.text);
    r.input_tokens = static_cast<std::int64_t>(estimate_tokens(request.prompt.text));
    r.output_tokens = static_cast<std::int64_t>(estimate_tokens(r.text));
    return r;
}

std::vector<std::string> ScriptedClient::prompts() const {
    std::lock_guard lock(log_mutex_);
    return log_;
}

CompletionResponse FunctionClient::complete(const CompletionRequest& request) {
    request.validate();
    ++calls_;
    CompletionResponse r;
    r.text = fn_(request);
    r.input_tokens = static_cast<std::int64_t>(estimate_tokens(request.prompt.text));
    r.output_tokens = static_cast<std::int64_t>(estimate_tokens(r.text));
    return r;
}

// ---------------------------------------------------------------------------
// Cache

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create cache directory " + dir_.string() + ": " + ec.message());
}

std::optional<CompletionResponse> ResponseCache::get(const std::string& key) const {
    const auto path = dir_ / (key + ".json");
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    try {
        const auto j = nlohmann::json::parse(in);
        CompletionResponse r;
        r.text = j.at("text").get<std::string>();
        r.input_tokens = j.at("input_tokens").get<std::int64_t>();
        r.output_tokens = j.at("output_tokens").get<std::int64_t>();
        r.cached = true;
        return r;
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
}

void ResponseCache::put(const std::string& key, const CompletionRequest& request, const CompletionResponse& response) {
    std::lock_guard lock(write_mutex_);
    const auto path = dir_ / (key + ".json");
    if (std::filesystem::exists(path)) return;
    const nlohmann::json j{{"key", key},
                           {"model", request.model_name},
                           {"temperature", request.temperature},
                           {"role", std::string(to_string(request.role))},
                           {"text", response.text},
                           {"input_tokens", response.input_tokens},
                           {"output_tokens", response.output_tokens}};
    const auto tmp = dir_ / (key + ".json.tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write cache record " + tmp.string());
        out << j.dump() << '\n';
    }
    std::filesystem::rename(tmp, path);
}

CompletionResponse CachingClient::complete(const CompletionRequest& request) {
    const auto key = cache_key(request);
    if (auto hit = cache_->get(key)) return *hit;
    auto response = inner_->complete(request);
    response.cached = false;
    cache_->put(key, request, response);
    return response;
}

// ---------------------------------------------------------------------------
// Usage

PriceTable parse_price_table(const nlohmann::json& j) {
    PriceTable table;
    try {
        for (const auto& [model, entry] : j.items())
            table[model] = Price{entry.at("input").get<double>(), entry.at("output").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed price table: ") + e.what());
    }
    return table;
}

PriceTable load_price_table(const std::filesystem::path& path) {
    try {
        return parse_price_table(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("price table " + path.string() + " is not valid JSON: " + e.what());
    }
}

nlohmann::json UsageLedger::to_json() const {
    const auto role = [](const RoleUsage& u) {
        return nlohmann::json{{"requests", u.requests},
                              {"cache_hits", u.cache_hits},
                              {"input_tokens", u.input_tokens},
                              {"output_tokens", u.output_tokens},
                              {"cost_usd", u.cost_usd}};
    };
    return {{"summarizer", role(summarizer)}, {"predictor", role(predictor)}, {"total_cost_usd", total_cost()}};
}

UsageLedger tally(UsageLedger ledger, const CompletionRequest& request, const CompletionResponse& response,
                  const PriceTable& prices) {
    const auto it = prices.find(request.model_name);
    if (it == prices.end()) throw ConfigError("model '" + request.model_name + "' missing from price table");
    auto& u = ledger.for_role(request.role);
    ++u.requests;
    if (response.cached) {
        ++u.cache_hits;
        return ledger;
    }
    u.input_tokens += response.input_tokens;
    u.output_tokens += response.output_tokens;
    u.cost_usd += static_cast<double>(response.input_tokens) * it->second.input_per_token +
                  static_cast<double>(response.output_tokens) * it->second.output_per_token;
    return ledger;
}

void UsageTracker::record(const CompletionRequest& request, const CompletionResponse& response) {
    std::lock_guard lock(mutex_);
    if (prices_) {
        ledger_ = tally(std::move(ledger_), request, response, *prices_);
        return;
    }
    PriceTable table{{request.model_name, Price{}}};
    ledger_ = tally(std::move(ledger_), request, response, table);
}

UsageLedger UsageTracker::snapshot() const {
    std::lock_guard lock(mutex_);
    return ledger_;
}

// ---------------------------------------------------------------------------
// Gateway

Gateway::Gateway(std::shared_ptr<LlmClient> client, GatewaySettings settings, std::shared_ptr<UsageTracker> usage)
    : client_(std::move(client)), settings_(std::move(settings)), usage_(std::move(usage)) {
    if (!client_) throw ArgumentError("gateway needs a client");
    if (!usage_) usage_ = std::make_shared<UsageTracker>();
    if (settings_.max_in_flight < 1) settings_.max_in_flight = 1;
}

CompletionRequest Gateway::request_for(const PromptText& prompt) const {
    CompletionRequest r;
    r.prompt = prompt;
    r.model_name = settings_.model;
    r.temperature = settings_.temperature;
    r.max_output_tokens = settings_.max_output_tokens;
    r.role = settings_.role;
    r.validate();
    return r;
}

CompletionOutcome Gateway::run_one(const PromptText& prompt) const {
    CompletionOutcome out;
    const auto start = std::chrono::steady_clock::now();
    try {
        const auto req = request_for(prompt);
        out.key = cache_key(req);
        out.response = client_->complete(req);
    } catch (const std::exception& e) {
        out.error = e.what();
    }
    out.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return out;
}

CompletionResponse Gateway::complete(const PromptText& prompt) {
    const auto req = request_for(prompt);
    CompletionResponse response;
    try {
        response = client_->complete(req);
    } catch (const GatewayError&) {
        throw;
    } catch (const ScriptError&) {
        throw;
    } catch (const std::exception& e) {
        throw GatewayError(e.what());
    }
    usage_->record(req, response);
    return response;
}

std::vector<CompletionOutcome> Gateway::complete_all(std::span<const PromptText> prompts) {
    std::vector<CompletionOutcome> out(prompts.size());
    const auto workers = std::min(settings_.max_in_flight, prompts.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < prompts.size(); ++i) out[i] = run_one(prompts[i]);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (auto i = next++; i < prompts.size(); i = next++) out[i] = run_one(prompts[i]);
            });
        }
        for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < prompts.size(); ++i)
        if (out[i].response) usage_->record(request_for(prompts[i]), *out[i].response);
    return out;
}

}  // namespace insighttab
