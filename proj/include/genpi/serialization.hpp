#pragma once

#include "genpi/backend.hpp"
#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"
#include "genpi/task.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

namespace genpi {

using nlohmann::json;

inline void to_json(json& j, Turn const& t) {
    j = json{{"role", to_string(t.role)}, {"text", t.text}, {"origin", to_string(t.origin)}};
}

inline void from_json(json const& j, Turn& t) {
    t.role = role_from_string(j.at("role").get<std::string>());
    t.text = j.at("text").get<std::string>();
    t.origin = j.contains("origin") ? origin_from_string(j.at("origin").get<std::string>()) : Origin::human;
}

inline void to_json(json& j, Conversation const& c) { j = c.turns; }

inline void from_json(json const& j, Conversation& c) {
    c.turns = j.get<std::vector<Turn>>();
}

/// Prompts are either a list of turns or a flat string (wrapped as a system turn).
inline void from_json(json const& j, PromptSpec& p) {
    p.name = j.at("name").get<std::string>();
    auto const& body = j.at("prompt");
    if (body.is_string()) {
        p.prompt = Conversation{{system_turn(body.get<std::string>())}};
    } else {
        p.prompt = body.get<Conversation>();
        for (auto& t : p.prompt.turns) t.origin = Origin::prompt;
    }
    p.token_length_estimate = j.value("token_length_estimate", std::size_t{0});
    validate(p.prompt);
}

inline void to_json(json& j, PromptSpec const& p) {
    j = json{{"name", p.name}, {"prompt", p.prompt}, {"token_length_estimate", p.token_length_estimate}};
}

inline void to_json(json& j, ActionRule const& r) {
    j = json{{"pattern", r.pattern},
             {"literal_name", r.literal_name},
             {"name_group", r.name_group},
             {"argument_group", r.argument_group},
             {"element_group", r.element_group},
             {"ignore_case", r.ignore_case}};
}

inline void from_json(json const& j, ActionRule& r) {
    r.pattern = j.at("pattern").get<std::string>();
    r.literal_name = j.value("literal_name", std::string{});
    r.name_group = j.value("name_group", 0);
    r.argument_group = j.value("argument_group", 0);
    r.element_group = j.value("element_group", 0);
    r.ignore_case = j.value("ignore_case", false);
}

inline void to_json(json& j, TaskSpec const& t) {
    j = json{{"task_id", t.task_id},
             {"max_turns", t.max_turns},
             {"termination_token", t.termination_token},
             {"final_action_vocabulary", t.final_action_vocabulary},
             {"action_vocabulary", t.action_vocabulary},
             {"action_rules", t.action_rules},
             {"environment_system_prompt", t.environment_system_prompt},
             {"max_new_tokens", t.max_new_tokens}};
}

/// Fields absent from the config fall back to the built-in task named by
/// "base" (or by task_id when it names a built-in).
inline void from_json(json const& j, TaskSpec& t) {
    auto const id = j.at("task_id").get<std::string>();
    std::string const base = j.value("base", id);
    if (base == "os" || base == "wb" || base == "ws") {
        t = builtin_task(base);
    } else {
        t = TaskSpec{};
    }
    t.task_id = id;
    if (j.contains("max_turns")) t.max_turns = j.at("max_turns").get<std::size_t>();
    if (j.contains("termination_token")) t.termination_token = j.at("termination_token").get<std::string>();
    if (j.contains("final_action_vocabulary")) {
        t.final_action_vocabulary = j.at("final_action_vocabulary").get<std::set<std::string>>();
    }
    if (j.contains("action_vocabulary")) t.action_vocabulary = j.at("action_vocabulary").get<std::set<std::string>>();
    if (j.contains("action_rules")) t.action_rules = j.at("action_rules").get<std::vector<ActionRule>>();
    if (j.contains("environment_system_prompt")) {
        t.environment_system_prompt = j.at("environment_system_prompt").get<std::string>();
    }
    if (j.contains("max_new_tokens")) t.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
    t.validate();
}

inline void to_json(json& j, SamplingParams const& p) {
    j = json{{"temperature", p.temperature},
             {"top_p", p.top_p},
             {"max_new_tokens", p.max_new_tokens},
             {"stop", p.stop_sequences},
             {"seed", p.seed}};
}

inline void from_json(json const& j, SamplingParams& p) {
    p.temperature = j.value("temperature", p.temperature);
    p.top_p = j.value("top_p", p.top_p);
    p.max_new_tokens = j.value("max_new_tokens", p.max_new_tokens);
    p.stop_sequences = j.value("stop", p.stop_sequences);
    p.seed = j.value("seed", p.seed);
    p.validate();
}

[[nodiscard]] inline std::string read_text_file(std::filesystem::path const& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

[[nodiscard]] inline json read_json_file(std::filesystem::path const& path) {
    try {
        return json::parse(read_text_file(path));
    } catch (json::parse_error const& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Writes via a temporary file and rename.
inline void write_text_file_atomic(std::filesystem::path const& path, std::string const& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out << content;
        if (!out.flush()) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

[[nodiscard]] inline std::string dump_json(json const& j, int indent = 2) {
    return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

[[nodiscard]] inline PromptSpec load_prompt(std::filesystem::path const& path) {
    return read_json_file(path).get<PromptSpec>();
}

[[nodiscard]] inline TaskSpec load_task(std::filesystem::path const& path) {
    return read_json_file(path).get<TaskSpec>();
}

/// Scripted-backend fixture: {"responses": [...], "rules": [{last, contains, system_contains, response}]}.
[[nodiscard]] inline std::unique_ptr<ScriptedBackend> load_scripted_backend(std::filesystem::path const& path, std::string backend_id) {
    auto const j = read_json_file(path);
    std::vector<ScriptedBackend::Entry> queue;
    for (auto const& r : j.value("responses", json::array())) queue.emplace_back(r.get<std::string>());
    std::vector<ScriptedBackend::Rule> rules;
    for (auto const& r : j.value("rules", json::array())) {
        ScriptedBackend::Rule rule;
        if (r.contains("last")) rule.last = r.at("last").get<std::string>();
        if (r.contains("system_contains")) rule.system_contains = r.at("system_contains").get<std::string>();
        rule.contains = r.value("contains", std::vector<std::string>{});
        rule.response = r.at("response").get<std::string>();
        rules.push_back(std::move(rule));
    }
    return std::make_unique<ScriptedBackend>(std::move(backend_id), std::move(queue), std::move(rules));
}

} // namespace genpi
