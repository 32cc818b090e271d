#pragma once

#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace genpi {

inline constexpr std::string_view unknown_action = "unknown";

/// One declarative action-parsing rule. A rule either captures the action
/// name from a regex group or assigns a literal name to every match.
struct ActionRule {
    std::string pattern;
    std::string literal_name;  ///< used when name_group == 0
    int name_group = 0;
    int argument_group = 0;    ///< 0: no argument
    int element_group = 0;     ///< 0: no element
    bool ignore_case = false;

    friend bool operator==(ActionRule const&, ActionRule const&) = default;
};

struct ParsedAction {
    std::string action_name{unknown_action};
    std::optional<std::string> argument;
    std::optional<std::string> element;
    std::string raw_text;

    [[nodiscard]] bool is_unknown() const noexcept { return action_name == unknown_action; }

    friend bool operator==(ParsedAction const&, ParsedAction const&) = default;
};

struct TaskSpec {
    std::string task_id;
    std::size_t max_turns = 1;
    std::string termination_token = "<<<DONE>>>";
    /// Actions that may end a conversation and are scored.
    std::set<std::string> final_action_vocabulary;
    /// Every recognised action; a superset of the final vocabulary.
    std::set<std::string> action_vocabulary;
    std::vector<ActionRule> action_rules;
    /// May contain "{termination_token}".
    std::string environment_system_prompt;
    std::size_t max_new_tokens = 512;

    void validate() const {
        if (task_id.empty()) throw ConfigError("task_id must be non-empty");
        if (max_turns < 1) throw ConfigError("task " + task_id + ": max_turns must be >= 1");
        if (final_action_vocabulary.empty()) throw ConfigError("task " + task_id + ": empty final action vocabulary");
        if (trim(termination_token).empty()) throw ConfigError("task " + task_id + ": empty termination token");
        for (auto const& a : final_action_vocabulary) {
            if (!action_vocabulary.contains(a)) {
                throw ConfigError("task " + task_id + ": final action '" + a + "' missing from action vocabulary");
            }
        }
        for (auto const& rule : action_rules) {
            try {
                std::regex const re(rule.pattern, std::regex::ECMAScript);
                auto const groups = static_cast<int>(re.mark_count());
                if (rule.name_group > groups || rule.argument_group > groups || rule.element_group > groups) {
                    throw ConfigError("task " + task_id + ": rule group index out of range in '" + rule.pattern + "'");
                }
            } catch (std::regex_error const& e) {
                throw ConfigError("task " + task_id + ": bad action pattern '" + rule.pattern + "': " + e.what());
            }
            if (rule.name_group == 0 && rule.literal_name.empty()) {
                throw ConfigError("task " + task_id + ": rule needs a name group or a literal name");
            }
        }
    }

    /// Environment persona system prompt with the termination token filled in.
    [[nodiscard]] std::string environment_prompt() const {
        std::string out = environment_system_prompt;
        std::string const key = "{termination_token}";
        for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + termination_token.size())) {
            out.replace(pos, key.size(), termination_token);
        }
        return out;
    }
};

namespace detail {

[[nodiscard]] inline std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

} // namespace detail

/// Last action in `text` matched by any of the task's rules. Matches are
/// ordered by position; at equal position the earlier rule wins. Names
/// outside the task's action vocabulary come back as "unknown".
[[nodiscard]] inline ParsedAction parse_action(std::string_view text, TaskSpec const& task) {
    ParsedAction best;
    best.raw_text = std::string(text);
    std::ptrdiff_t best_pos = -1;
    std::string const subject(text);
    for (auto const& rule : task.action_rules) {
        auto flags = std::regex::ECMAScript;
        if (rule.ignore_case) flags |= std::regex::icase;
        std::regex const re(rule.pattern, flags);
        for (auto it = std::sregex_iterator(subject.begin(), subject.end(), re); it != std::sregex_iterator(); ++it) {
            auto const& m = *it;
            if (m.position(0) <= best_pos) continue;
            best_pos = m.position(0);
            std::string name = rule.name_group > 0 ? m.str(static_cast<std::size_t>(rule.name_group)) : rule.literal_name;
            best.action_name = detail::lower(trim(name));
            best.argument.reset();
            best.element.reset();
            if (rule.argument_group > 0 && m[static_cast<std::size_t>(rule.argument_group)].matched) {
                best.argument = std::string(trim(m.str(static_cast<std::size_t>(rule.argument_group))));
            }
            if (rule.element_group > 0 && m[static_cast<std::size_t>(rule.element_group)].matched) {
                best.element = std::string(trim(m.str(static_cast<std::size_t>(rule.element_group))));
            }
        }
    }
    if (!task.action_vocabulary.contains(best.action_name)) {
        best.action_name = std::string(unknown_action);
        best.argument.reset();
        best.element.reset();
    }
    return best;
}

/// Like parse_action, restricted to the final-action vocabulary.
[[nodiscard]] inline ParsedAction parse_final_action(std::string_view text, TaskSpec const& task) {
    auto parsed = parse_action(text, task);
    if (!task.final_action_vocabulary.contains(parsed.action_name)) {
        parsed.action_name = std::string(unknown_action);
        parsed.argument.reset();
        parsed.element.reset();
    }
    return parsed;
}

// Shipped defaults. Patterns follow the prompt conventions of each task and
// are meant to be overridden from the task config when formats drift.

[[nodiscard]] inline TaskSpec os_task() {
    TaskSpec t;
    t.task_id = "os";
    t.max_turns = 10;
    t.final_action_vocabulary = {"answer", "finish"};
    t.action_vocabulary = {"bash", "answer", "finish"};
    t.action_rules = {
        {R"(Act:\s*bash\s*```(?:bash|sh)?\s*([\s\S]*?)```)", "bash", 0, 1, 0, false},
        {R"(Act:\s*([A-Za-z_]+)(?:\(([\s\S]*?)\))?)", "", 1, 2, 0, false},
    };
    t.environment_system_prompt =
        "You are simulating an Ubuntu operating system. The user is an agent that issues bash commands. "
        "Reply only with the output the command would print, prefixed by \"The output of the OS:\". "
        "When the agent commits an answer with \"Act: answer(...)\" or says \"Act: finish\", reply with "
        "exactly {termination_token}.";
    t.max_new_tokens = 512;
    return t;
}

[[nodiscard]] inline TaskSpec wb_task() {
    TaskSpec t;
    t.task_id = "wb";
    t.max_turns = 2;
    t.final_action_vocabulary = {"click", "type", "select", "none"};
    t.action_vocabulary = t.final_action_vocabulary;
    t.action_rules = {
        {R"(ELEMENT:[ \t]*([^\s]+)[ \t]*\r?\n[ \t]*ACTION:[ \t]*([^\r\n]*?)[ \t]*\r?\n[ \t]*VALUE:[ \t]*([^\r\n]*))", "", 2, 3, 1, true},
    };
    t.environment_system_prompt =
        "You are simulating a web page for a browsing agent. The user is the agent. Describe the page "
        "as HTML elements with lettered choices. When the agent answers with ELEMENT/ACTION/VALUE, "
        "reply with exactly {termination_token}.";
    t.max_new_tokens = 256;
    return t;
}

[[nodiscard]] inline TaskSpec ws_task() {
    TaskSpec t;
    t.task_id = "ws";
    t.max_turns = 5;
    t.final_action_vocabulary = {"search", "click"};
    t.action_vocabulary = t.final_action_vocabulary;
    t.action_rules = {
        {R"((search|click)\[([^\]]*)\])", "", 1, 2, 0, true},
    };
    t.environment_system_prompt =
        "You are simulating a shopping website. The user is a shopping agent that issues search[...] "
        "and click[...] actions. Reply with the text of the resulting page, listing clickable items in "
        "[brackets]. When the agent clicks [Buy Now], reply with exactly {termination_token}.";
    t.max_new_tokens = 256;
    return t;
}

[[nodiscard]] inline TaskSpec builtin_task(std::string_view id) {
    if (id == "os") return os_task();
    if (id == "wb") return wb_task();
    if (id == "ws") return ws_task();
    throw LookupError("no built-in task '" + std::string(id) + "'");
}

} // namespace genpi
