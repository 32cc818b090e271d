#pragma once

#include "genpi/errors.hpp"

#include <algorithm>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace genpi {

enum class Role { system, user, assistant };

/// Where a turn came from. Provenance only; never affects rendering.
enum class Origin { prompt, pseudo_input, agent, environment, human };

[[nodiscard]] inline std::string_view to_string(Role role) noexcept {
    switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    }
    return "user";
}

[[nodiscard]] inline std::string_view to_string(Origin origin) noexcept {
    switch (origin) {
    case Origin::prompt: return "prompt";
    case Origin::pseudo_input: return "pseudo_input";
    case Origin::agent: return "agent";
    case Origin::environment: return "environment";
    case Origin::human: return "human";
    }
    return "human";
}

[[nodiscard]] inline Role role_from_string(std::string_view s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    throw FormatError("unknown role '" + std::string(s) + "'");
}

[[nodiscard]] inline Origin origin_from_string(std::string_view s) {
    if (s == "prompt") return Origin::prompt;
    if (s == "pseudo_input") return Origin::pseudo_input;
    if (s == "agent") return Origin::agent;
    if (s == "environment") return Origin::environment;
    if (s == "human") return Origin::human;
    throw FormatError("unknown origin '" + std::string(s) + "'");
}

[[nodiscard]] inline std::string_view trim(std::string_view s) noexcept {
    auto const is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

struct Turn {
    Role role = Role::user;
    std::string text;
    Origin origin = Origin::human;

    friend bool operator==(Turn const&, Turn const&) = default;
};

[[nodiscard]] inline Turn user_turn(std::string text, Origin origin = Origin::human) {
    return Turn{Role::user, std::move(text), origin};
}

[[nodiscard]] inline Turn assistant_turn(std::string text, Origin origin = Origin::agent) {
    return Turn{Role::assistant, std::move(text), origin};
}

[[nodiscard]] inline Turn system_turn(std::string text, Origin origin = Origin::prompt) {
    return Turn{Role::system, std::move(text), origin};
}

struct Conversation {
    std::vector<Turn> turns;

    [[nodiscard]] std::size_t size() const noexcept { return turns.size(); }
    [[nodiscard]] bool empty() const noexcept { return turns.empty(); }
    [[nodiscard]] bool has_system() const noexcept {
        return !turns.empty() && turns.front().role == Role::system;
    }
    [[nodiscard]] Turn const& back() const { return turns.back(); }

    /// Turns after the optional leading system turn.
    [[nodiscard]] std::vector<Turn> body() const {
        return {turns.begin() + (has_system() ? 1 : 0), turns.end()};
    }

    [[nodiscard]] std::size_t count(Role role) const noexcept {
        return static_cast<std::size_t>(std::count_if(
            turns.begin(), turns.end(), [role](Turn const& t) { return t.role == role; }));
    }

    friend bool operator==(Conversation const&, Conversation const&) = default;
};

/// Which role may open the body of a conversation. Agent-view conversations
/// open with the user; role-swapped environment views open with the assistant.
enum class Opening { user_first, either };

/// Throws StructuralError naming the first offending turn.
inline void validate(Conversation const& c, Opening opening = Opening::user_first) {
    for (std::size_t i = 0; i < c.turns.size(); ++i) {
        auto const& t = c.turns[i];
        if (trim(t.text).empty()) throw StructuralError("empty turn text", i);
        if (t.role == Role::system && i != 0) throw StructuralError("system turn not at position 0", i);
        if (t.origin == Origin::environment && t.role == Role::assistant && opening == Opening::user_first) {
            throw StructuralError("environment turn in assistant slot", i);
        }
    }
    std::size_t const start = c.has_system() ? 1 : 0;
    if (start >= c.turns.size()) return;
    Role expected = c.turns[start].role;
    if (opening == Opening::user_first && expected != Role::user) {
        throw StructuralError("conversation body must open with a user turn", start);
    }
    for (std::size_t i = start; i < c.turns.size(); ++i) {
        if (c.turns[i].role != expected) throw StructuralError("roles do not alternate", i);
        expected = expected == Role::user ? Role::assistant : Role::user;
    }
}

[[nodiscard]] inline bool is_valid(Conversation const& c, Opening opening = Opening::user_first) noexcept {
    try {
        validate(c, opening);
        return true;
    } catch (StructuralError const&) {
        return false;
    }
}

/// Flat strings become a single system turn.
struct PromptSpec {
    Conversation prompt;
    std::string name;
    std::size_t token_length_estimate = 0;

    [[nodiscard]] static PromptSpec from_text(std::string name, std::string text) {
        PromptSpec p;
        p.name = std::move(name);
        p.prompt.turns.push_back(system_turn(std::move(text)));
        return p;
    }
};

/// Swaps user and assistant roles. A leading system turn is dropped: the
/// caller supplies the environment's own system turn.
[[nodiscard]] inline Conversation role_swap(Conversation const& conversation) {
    validate(conversation, Opening::either);
    Conversation out;
    out.turns.reserve(conversation.size());
    for (auto const& t : conversation.turns) {
        if (t.role == Role::system) continue;
        Turn swapped = t;
        swapped.role = t.role == Role::user ? Role::assistant : Role::user;
        out.turns.push_back(std::move(swapped));
    }
    return out;
}

/// Prompt turns followed by history turns. With no prompt the history is
/// returned unchanged (the student's view).
[[nodiscard]] inline Conversation render_for_generation(std::optional<Conversation> const& prompt,
                                                        Conversation const& history,
                                                        Opening opening = Opening::user_first) {
    if (!prompt) {
        validate(history, opening);
        return history;
    }
    if (history.has_system()) throw StructuralError("history may not carry a system turn", 0);
    Conversation merged = *prompt;
    merged.turns.insert(merged.turns.end(), history.turns.begin(), history.turns.end());
    validate(merged, opening);
    return merged;
}

/// Canonical flat text of a multi-turn prompt with explicit role markers.
[[nodiscard]] inline std::string flatten(Conversation const& c) {
    std::string out;
    for (auto const& t : c.turns) {
        if (!out.empty()) out += "\n";
        switch (t.role) {
        case Role::system: out += "<SYSTEM>\n"; break;
        case Role::user: out += "<USER>\n"; break;
        case Role::assistant: out += "<AGENT>\n"; break;
        }
        out += t.text;
    }
    return out;
}

} // namespace genpi
