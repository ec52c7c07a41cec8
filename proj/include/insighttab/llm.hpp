#pragma once

#include "insighttab/dataset.hpp"
#include "insighttab/serializer.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace insighttab {

enum class Role { summarizer, predictor };

std::string_view to_string(Role role);

struct CompletionRequest {
    PromptText prompt;
    std::string model_name;
    double temperature = 0.0;
    int max_output_tokens = 1024;
    Role role = Role::predictor;

    void validate() const;
};

struct CompletionResponse {
    std::string text;
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 0;
    bool cached = false;
};

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual CompletionResponse complete(const CompletionRequest& request) = 0;
};

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);

// Digest of (model name, temperature, prompt bytes). Stable across runs and
// platforms: the temperature is hashed as its shortest decimal form.
std::string cache_key(const CompletionRequest& request);

// Index into task.answer_choices, or nullopt for "no answer".
using ParsedAnswer = std::optional<std::size_t>;

// Case-insensitive whole-word scan. Longer choices claim their span first,
// then the earliest surviving match wins.
ParsedAnswer parse_answer(std::string_view text, const TaskSpec& task);

// parse_answer mapped through the schema's verbalizer to a class index.
ParsedAnswer parse_class(std::string_view text, const TaskSpec& task, const Schema& schema);

// ---------------------------------------------------------------------------
// Scripted client

enum class ScriptMode { fixed_text, echo, keyed_by_prompt_hash, rule_on_features };

struct FeatureCondition {
    std::string feature;
    // One of < <= > >= == !=
    std::string op;
    std::variant<double, std::string> value;

    bool matches(std::string_view rendered_value) const;
};

struct FeatureRule {
    std::vector<FeatureCondition> when;  // conjunction
    std::string answer;
};

struct ScriptedPolicy {
    ScriptMode mode = ScriptMode::fixed_text;
    // fixed_text
    std::string text;
    // keyed_by_prompt_hash: explicit responses keyed by SHA-256 of the prompt,
    // otherwise choices[digest mod |choices|].
    std::map<std::string, std::string> by_hash;
    std::vector<std::string> choices;
    // rule_on_features: first matching rule wins, else `fallback`.
    std::vector<FeatureRule> rules;
    std::optional<std::string> fallback;

    static ScriptedPolicy fixed(std::string text);
    static ScriptedPolicy echo();
    static ScriptedPolicy hashed(std::vector<std::string> choices);
    static ScriptedPolicy on_features(std::vector<FeatureRule> rules, std::string fallback);

    static ScriptedPolicy from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    void validate() const;
    // Every referenced feature exists and every answer is a valid choice.
    void validate_against(const TaskSpec& task, const Schema& schema) const;
};

// Pure function of the request. Thread-safe; keeps a call log for tests.
class ScriptedClient : public LlmClient {
public:
    explicit ScriptedClient(ScriptedPolicy policy);

    CompletionResponse complete(const CompletionRequest& request) override;

    std::size_t call_count() const noexcept { return calls_.load(); }
    std::vector<std::string> prompts() const;
    const ScriptedPolicy& policy() const noexcept { return policy_; }

    std::string respond(std::string_view prompt) const;

private:
    ScriptedPolicy policy_;
    std::atomic<std::size_t> calls_{0};
    mutable std::mutex log_mutex_;
    std::vector<std::string> log_;
};

// Adapter for tests and ad-hoc policies.
class FunctionClient : public LlmClient {
public:
    using Fn = std::function<std::string(const CompletionRequest&)>;
    explicit FunctionClient(Fn fn) : fn_(std::move(fn)) {}

    CompletionResponse complete(const CompletionRequest& request) override;
    std::size_t call_count() const noexcept { return calls_.load(); }

private:
    Fn fn_;
    std::atomic<std::size_t> calls_{0};
};

// Scripted policies for both roles, as stored in a policy file:
// {"summarizer": {...}, "predictor": {...}}.
struct ScriptedPolicies {
    ScriptedPolicy summarizer = ScriptedPolicy::echo();
    ScriptedPolicy predictor;
};

ScriptedPolicies load_scripted_policies(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Response cache

// Append-only directory of key -> response records, one JSON file per key.
// Concurrent readers; writes are serialized and never overwrite.
class ResponseCache {
public:
    explicit ResponseCache(std::filesystem::path dir);

    std::optional<CompletionResponse> get(const std::string& key) const;
    void put(const std::string& key, const CompletionRequest& request, const CompletionResponse& response);
    const std::filesystem::path& dir() const noexcept { return dir_; }

private:
    std::filesystem::path dir_;
    mutable std::mutex write_mutex_;
};

class CachingClient : public LlmClient {
public:
    CachingClient(std::shared_ptr<LlmClient> inner, std::shared_ptr<ResponseCache> cache)
        : inner_(std::move(inner)), cache_(std::move(cache)) {}

    CompletionResponse complete(const CompletionRequest& request) override;

private:
    std::shared_ptr<LlmClient> inner_;
    std::shared_ptr<ResponseCache> cache_;
};

// ---------------------------------------------------------------------------
// Usage accounting

struct Price {
    double input_per_token = 0.0;
    double output_per_token = 0.0;
};

using PriceTable = std::map<std::string, Price, std::less<>>;

PriceTable parse_price_table(const nlohmann::json& j);
PriceTable load_price_table(const std::filesystem::path& path);

struct RoleUsage {
    std::int64_t requests = 0;
    std::int64_t cache_hits = 0;
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 0;
    double cost_usd = 0.0;
};

struct UsageLedger {
    RoleUsage summarizer;
    RoleUsage predictor;

    RoleUsage& for_role(Role role) { return role == Role::summarizer ? summarizer : predictor; }
    const RoleUsage& for_role(Role role) const { return role == Role::summarizer ? summarizer : predictor; }
    double total_cost() const { return summarizer.cost_usd + predictor.cost_usd; }
    nlohmann::json to_json() const;
};

// Cached responses add no tokens and no cost, only a cache hit.
UsageLedger tally(UsageLedger ledger, const CompletionRequest& request, const CompletionResponse& response,
                  const PriceTable& prices);

// Shared, ordered sink for usage events. Without a price table every call is
// free.
class UsageTracker {
public:
    explicit UsageTracker(std::optional<PriceTable> prices = std::nullopt) : prices_(std::move(prices)) {}

    void record(const CompletionRequest& request, const CompletionResponse& response);
    UsageLedger snapshot() const;

private:
    std::optional<PriceTable> prices_;
    mutable std::mutex mutex_;
    UsageLedger ledger_;
};

// ---------------------------------------------------------------------------
// Gateway: a client bound to one role's settings.

struct GatewaySettings {
    std::string model = "scripted";
    double temperature = 0.0;
    int max_output_tokens = 1024;
    Role role = Role::predictor;
    std::size_t max_in_flight = 1;
};

struct CompletionOutcome {
    std::optional<CompletionResponse> response;
    std::string error;
    std::string key;
    double latency_ms = 0.0;
};

class Gateway {
public:
    Gateway(std::shared_ptr<LlmClient> client, GatewaySettings settings,
            std::shared_ptr<UsageTracker> usage = std::make_shared<UsageTracker>());

    CompletionRequest request_for(const PromptText& prompt) const;

    // Throws GatewayError on failure.
    CompletionResponse complete(const PromptText& prompt);

    // Issues up to max_in_flight requests at once. Failures are captured per
    // prompt; usage is recorded in input order.
    std::vector<CompletionOutcome> complete_all(std::span<const PromptText> prompts);

    const GatewaySettings& settings() const noexcept { return settings_; }
    const std::shared_ptr<UsageTracker>& usage() const noexcept { return usage_; }
    LlmClient& client() const noexcept { return *client_; }

private:
    CompletionOutcome run_one(const PromptText& prompt) const;

    std::shared_ptr<LlmClient> client_;
    GatewaySettings settings_;
    std::shared_ptr<UsageTracker> usage_;
};

}  // namespace insighttab
