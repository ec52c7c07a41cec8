#pragma once

#include "insighttab/llm.hpp"

#include <chrono>
#include <string>

namespace insighttab {

struct LiveSettings {
    // Full chat-completions URL, e.g. https://api.openai.com/v1/chat/completions
    std::string endpoint;
    std::string api_key;
    int max_retries = 3;
    std::chrono::milliseconds backoff{500};
    std::chrono::seconds timeout{60};
};

// Chat-completions client: one user message per request, text taken from the
// first choice. Transport failures, 429 and 5xx are retried with exponential
// backoff; other HTTP errors fail immediately.
class LiveClient : public LlmClient {
public:
    explicit LiveClient(LiveSettings settings);

    CompletionResponse complete(const CompletionRequest& request) override;

    static nlohmann::json request_body(const CompletionRequest& request);
    static CompletionResponse parse_response(const std::string& body);

private:
    LiveSettings settings_;
    std::string origin_;
    std::string path_;
};

}  // namespace insighttab
