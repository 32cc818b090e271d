#pragma once

#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

namespace genpi {

/// temperature == 0 means greedy decoding; top_p is ignored then.
struct SamplingParams {
    double temperature = 0.0;
    double top_p = 1.0;
    std::size_t max_new_tokens = 256;
    std::vector<std::string> stop_sequences;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(temperature >= 0.0)) throw ConfigError("temperature must be non-negative");
        if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
        if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be positive");
    }

    [[nodiscard]] bool greedy() const noexcept { return temperature == 0.0; }
};

/// Sampling defaults used by the synthesis stages.
namespace sampling {
[[nodiscard]] inline SamplingParams pseudo_input() { return {1.0, 0.9, 256, {}, 0}; }
[[nodiscard]] inline SamplingParams reason() { return {0.7, 0.9, 384, {}, 0}; }
[[nodiscard]] inline SamplingParams conversation() { return {0.0, 1.0, 512, {}, 0}; }
} // namespace sampling

enum class Capability { generate, score_logits };

struct BackendHandle {
    std::string backend_id;
    std::string model_name;
    std::set<Capability> capabilities{Capability::generate};

    [[nodiscard]] bool has(Capability c) const noexcept { return capabilities.contains(c); }
};

inline void require(BackendHandle const& handle, Capability c, std::string_view why) {
    if (!handle.has(c)) {
        throw CapabilityError("backend '" + handle.backend_id + "' cannot " +
                              (c == Capability::score_logits ? "score logits" : "generate") + ", required by " +
                              std::string(why));
    }
}

/// A text generation engine. Implementations must tolerate concurrent calls.
class Backend {
public:
    virtual ~Backend() = default;

    [[nodiscard]] virtual BackendHandle const& handle() const noexcept = 0;

    /// Raw completion text for a conversation ending in a user turn. May
    /// contain stop sequences; generate() strips them.
    [[nodiscard]] virtual std::string complete(Conversation const& conversation, SamplingParams const& params) = 0;
};

struct RetryPolicy {
    int max_attempts = 5;
    std::chrono::milliseconds initial_delay{200};
    double multiplier = 2.0;
    std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
        std::this_thread::sleep_for(d);
    };
};

/// Cuts `text` at the earliest occurrence of any stop sequence.
[[nodiscard]] inline std::string apply_stop_sequences(std::string text, std::vector<std::string> const& stops) {
    std::size_t cut = std::string::npos;
    for (auto const& s : stops) {
        if (s.empty()) continue;
        cut = std::min(cut, text.find(s));
    }
    if (cut != std::string::npos) text.resize(cut);
    return text;
}

/// Generates the next assistant turn. Transport errors are retried with
/// exponential backoff; every other error propagates immediately.
[[nodiscard]] inline Turn generate(Backend& backend, Conversation const& conversation, SamplingParams const& params,
                                   RetryPolicy const& retry = {}) {
    params.validate();
    if (conversation.empty() || conversation.back().role != Role::user) {
        throw PreconditionError("generation context must end with a user turn");
    }
    auto delay = retry.initial_delay;
    for (int attempt = 1;; ++attempt) {
        try {
            auto text = apply_stop_sequences(backend.complete(conversation, params), params.stop_sequences);
            if (trim(text).empty()) {
                throw GenerationError("backend '" + backend.handle().backend_id + "' returned an empty turn");
            }
            return assistant_turn(std::move(text));
        } catch (TransportError const&) {
            if (attempt >= retry.max_attempts) throw;
            retry.sleep(delay);
            delay = std::chrono::milliseconds(static_cast<std::int64_t>(static_cast<double>(delay.count()) * retry.multiplier));
        }
    }
}

/// The prompted model: sees prompt + history.
[[nodiscard]] inline Turn teacher_generate(Backend& backend, PromptSpec const& prompt, Conversation const& history,
                                           SamplingParams const& params, RetryPolicy const& retry = {}) {
    return generate(backend, render_for_generation(prompt.prompt, history), params, retry);
}

/// The promptless model: sees history only.
[[nodiscard]] inline Turn student_generate(Backend& backend, Conversation const& history, SamplingParams const& params,
                                           RetryPolicy const& retry = {}) {
    return generate(backend, render_for_generation(std::nullopt, history), params, retry);
}

/// Deterministic backend for tests and scripted pipelines.
///
/// Responses come from keyed rules first (first match in declaration order),
/// then from a FIFO queue. Rules are stateless, so keyed scripts stay
/// deterministic under concurrent callers; the queue is only deterministic
/// with a single caller. An exhausted queue is an error.
class ScriptedBackend final : public Backend {
public:
    struct TransportFailure {};
    using Entry = std::variant<std::string, TransportFailure>;

    struct Rule {
        std::optional<std::string> last;       ///< exact text of the final turn
        std::vector<std::string> contains;     ///< substrings required anywhere in the context
        std::optional<std::string> system_contains;  ///< substring of the system turn
        std::string response;
    };

    explicit ScriptedBackend(std::string backend_id = "scripted", std::vector<Entry> queue = {}, std::vector<Rule> rules = {})
        : handle_{std::move(backend_id), "scripted", {Capability::generate}},
          queue_(queue.begin(), queue.end()),
          rules_(std::move(rules)) {}

    [[nodiscard]] BackendHandle const& handle() const noexcept override { return handle_; }

    void push(std::string response) {
        std::scoped_lock lock(mutex_);
        queue_.emplace_back(std::move(response));
    }

    void push_failure() {
        std::scoped_lock lock(mutex_);
        queue_.emplace_back(TransportFailure{});
    }

    void add_rule(Rule rule) {
        std::scoped_lock lock(mutex_);
        rules_.push_back(std::move(rule));
    }

    [[nodiscard]] std::size_t remaining() const {
        std::scoped_lock lock(mutex_);
        return queue_.size();
    }

    [[nodiscard]] std::size_t call_count() const {
        std::scoped_lock lock(mutex_);
        return calls_.size();
    }

    [[nodiscard]] std::vector<Conversation> calls() const {
        std::scoped_lock lock(mutex_);
        return calls_;
    }

    [[nodiscard]] std::string complete(Conversation const& conversation, SamplingParams const&) override {
        std::scoped_lock lock(mutex_);
        calls_.push_back(conversation);
        for (auto const& rule : rules_) {
            if (matches(rule, conversation)) return rule.response;
        }
        if (queue_.empty()) throw GenerationError("scripted backend '" + handle_.backend_id + "' exhausted");
        Entry next = std::move(queue_.front());
        queue_.pop_front();
        if (std::holds_alternative<TransportFailure>(next)) {
            throw TransportError("scripted transport failure");
        }
        return std::get<std::string>(std::move(next));
    }

private:
    [[nodiscard]] static bool matches(Rule const& rule, Conversation const& c) {
        if (rule.last && (c.empty() || c.back().text != *rule.last)) return false;
        if (rule.system_contains) {
            if (!c.has_system() || c.turns.front().text.find(*rule.system_contains) == std::string::npos) return false;
        }
        for (auto const& needle : rule.contains) {
            bool found = false;
            for (auto const& t : c.turns) {
                if (t.text.find(needle) != std::string::npos) {
                    found = true;
                    break;
                }
            }
            if (!found) return false;
        }
        return true;
    }

    BackendHandle handle_;
    mutable std::mutex mutex_;
    std::deque<Entry> queue_;
    std::vector<Rule> rules_;
    std::vector<Conversation> calls_;
};

/// Wraps a callable; handy for generators in tests.
class CallbackBackend final : public Backend {
public:
    using Fn = std::function<std::string(Conversation const&, SamplingParams const&)>;

    CallbackBackend(std::string backend_id, Fn fn)
        : handle_{std::move(backend_id), "callback", {Capability::generate}}, fn_(std::move(fn)) {}

    [[nodiscard]] BackendHandle const& handle() const noexcept override { return handle_; }

    [[nodiscard]] std::string complete(Conversation const& conversation, SamplingParams const& params) override {
        return fn_(conversation, params);
    }

private:
    BackendHandle handle_;
    Fn fn_;
};

} // namespace genpi
