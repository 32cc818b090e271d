#pragma once

#include "genpi/backend.hpp"
#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>

namespace genpi {

struct RemoteBackendConfig {
    std::string backend_id = "remote";
    std::string base_url;            ///< scheme://host:port
    std::string path = "/generate";
    std::string model;
    double timeout_s = 120.0;
    /// Environment variable holding a bearer token. Credentials never live in config files.
    std::string api_key_env = "GENPI_API_KEY";
};

/// Request body: {model, messages[{role, text}], temperature, top_p, max_tokens, stop[]}.
[[nodiscard]] inline nlohmann::json remote_request_body(std::string const& model, Conversation const& conversation,
                                                        SamplingParams const& params) {
    nlohmann::json messages = nlohmann::json::array();
    for (auto const& t : conversation.turns) messages.push_back({{"role", to_string(t.role)}, {"text", t.text}});
    return {{"model", model},
            {"messages", messages},
            {"temperature", params.temperature},
            {"top_p", params.top_p},
            {"max_tokens", params.max_new_tokens},
            {"stop", params.stop_sequences}};
}

/// Chat-completion style HTTP backend. Unreachable hosts and 5xx/429 are
/// TransportError (retried by generate()); a 4xx body mentioning the context
/// length is LengthError; any other 4xx is GenerationError.
class RemoteBackend final : public Backend {
public:
    explicit RemoteBackend(RemoteBackendConfig config)
        : config_(std::move(config)), handle_{config_.backend_id, config_.model, {Capability::generate}} {
        if (config_.base_url.empty()) throw ConfigError("remote backend '" + config_.backend_id + "' needs a base_url");
        if (char const* key = std::getenv(config_.api_key_env.c_str()); key && *key) api_key_ = key;
    }

    [[nodiscard]] BackendHandle const& handle() const noexcept override { return handle_; }

    [[nodiscard]] std::string complete(Conversation const& conversation, SamplingParams const& params) override {
        httplib::Client client(config_.base_url);
        auto const timeout = std::chrono::milliseconds(static_cast<std::int64_t>(config_.timeout_s * 1000.0));
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        httplib::Headers headers;
        if (api_key_) headers.emplace("Authorization", "Bearer " + *api_key_);
        auto const body = remote_request_body(config_.model, conversation, params).dump();
        auto res = client.Post(config_.path, headers, body, "application/json");
        if (!res) {
            throw TransportError("backend '" + config_.backend_id + "' unreachable: " + httplib::to_string(res.error()));
        }
        if (res->status >= 500 || res->status == 429) {
            throw TransportError("backend '" + config_.backend_id + "' returned HTTP " + std::to_string(res->status));
        }
        if (res->status >= 400) {
            std::string const lowered = [&] {
                std::string s = res->body;
                for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
                return s;
            }();
            if (lowered.find("context") != std::string::npos && lowered.find("length") != std::string::npos) {
                throw LengthError("backend '" + config_.backend_id + "' rejected the context: " + res->body,
                                  context_limit(res->body));
            }
            throw GenerationError("backend '" + config_.backend_id + "' returned HTTP " + std::to_string(res->status) +
                                  ": " + res->body);
        }
        try {
            return nlohmann::json::parse(res->body).at("text").get<std::string>();
        } catch (nlohmann::json::exception const& e) {
            throw GenerationError("backend '" + config_.backend_id + "' sent a malformed response: " + e.what());
        }
    }

private:
    /// Servers may report {"limit": N}; 0 when absent.
    [[nodiscard]] static std::size_t context_limit(std::string const& body) {
        auto const j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_object() && j.contains("limit") && j.at("limit").is_number_unsigned()) return j.at("limit").get<std::size_t>();
        return 0;
    }

    RemoteBackendConfig config_;
    BackendHandle handle_;
    std::optional<std::string> api_key_;
};

inline void from_json(nlohmann::json const& j, RemoteBackendConfig& c) {
    c.backend_id = j.value("backend_id", c.backend_id);
    c.base_url = j.at("base_url").get<std::string>();
    c.path = j.value("path", c.path);
    c.model = j.value("model", c.model);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
}

} // namespace genpi
