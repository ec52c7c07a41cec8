#include <httplib.h>

#include "insighttab/live_client.hpp"

#include "insighttab/error.hpp"

#include <thread>

namespace insighttab {

LiveClient::LiveClient(LiveSettings settings) : settings_(std::move(settings)) {
    const auto scheme_end = settings_.endpoint.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint must be an http(s) URL: " + settings_.endpoint);
    const auto path_start = settings_.endpoint.find('/', scheme_end + 3);
    origin_ = settings_.endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : settings_.endpoint.substr(path_start);
    if (settings_.max_retries < 0) settings_.max_retries = 0;
}

nlohmann::json LiveClient::request_body(const CompletionRequest& request) {
    return {{"model", request.model_name},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt.text}}})},
            {"temperature", request.temperature},
            {"max_tokens", request.max_output_tokens},
            {"stream", false}};
}

CompletionResponse LiveClient::parse_response(const std::string& body) {
    try {
        const auto j = nlohmann::json::parse(body);
        CompletionResponse r;
        const auto& content = j.at("choices").at(0).at("message").at("content");
        r.text = content.is_null() ? std::string{} : content.get<std::string>();
        if (j.contains("usage")) {
            r.input_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
            r.output_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw GatewayError(std::string("malformed completion response: ") + e.what());
    }
}

CompletionResponse LiveClient::complete(const CompletionRequest& request) {
    request.validate();
    const auto body = request_body(request).dump();
    httplib::Headers headers;
    if (!settings_.api_key.empty()) headers.emplace("Authorization", "Bearer " + settings_.api_key);

    std::string last_error;
    auto delay = settings_.backoff;
    for (int attempt = 0; attempt <= settings_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
        httplib::Client client(origin_);
        client.set_connection_timeout(settings_.timeout);
        client.set_read_timeout(settings_.timeout);
        client.set_write_timeout(settings_.timeout);
        const auto res = client.Post(path_, headers, body, "application/json");
        if (!res) {
            last_error = "transport failure: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status < 200 || res->status >= 300)
            throw GatewayError("HTTP " + std::to_string(res->status) + ": " + res->body);
        return parse_response(res->body);
    }
    throw GatewayError("request failed after " + std::to_string(settings_.max_retries + 1) +
                       " attempts: " + last_error);
}

}  // namespace insighttab
