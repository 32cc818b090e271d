#pragma once

#include "genpi/backend.hpp"
#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"
#include "genpi/parallel.hpp"
#include "genpi/records.hpp"
#include "genpi/serialization.hpp"
#include "genpi/task.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace genpi {

struct QualityFlags {
    bool hit_turn_limit = false;
    bool abnormal_termination = false;
    bool missing_final_action = false;
    std::size_t turn_count = 0;
    bool student_failed = false;
    bool reason_over_budget = false;
    std::string error;

    friend bool operator==(QualityFlags const&, QualityFlags const&) = default;
};

/// One training unit: pseudo input x, teacher conversation {x_i, y_i},
/// the student's unprompted first answer, and the reason it must change.
struct SynthesisRecord {
    std::string record_id;
    Turn pseudo_input;
    Conversation teacher_conversation;
    std::optional<Turn> student_first_output;
    std::string reason;
    QualityFlags flags;

    [[nodiscard]] bool has_conversation() const noexcept { return !teacher_conversation.empty(); }

    /// First teacher answer; the TO-BE side of the prompt-generation target.
    [[nodiscard]] Turn const& teacher_first_output() const {
        if (teacher_conversation.size() < 2) throw PreconditionError("record " + record_id + " has no teacher output");
        return teacher_conversation.turns[1];
    }

    void validate() const {
        if (pseudo_input.role != Role::user) throw PreconditionError("record " + record_id + ": pseudo input must be a user turn");
        if (has_conversation()) {
            genpi::validate(teacher_conversation);
            if (teacher_conversation.turns.front() != pseudo_input) {
                throw PreconditionError("record " + record_id + ": conversation must begin with the pseudo input");
            }
            if (teacher_conversation.back().role != Role::assistant) {
                throw PreconditionError("record " + record_id + ": conversation must end with an assistant turn");
            }
        }
    }

    friend bool operator==(SynthesisRecord const&, SynthesisRecord const&) = default;
};

template <>
struct RecordKind<SynthesisRecord> {
    static constexpr std::string_view value = "synthesis_record";
};

inline void to_json(json& j, QualityFlags const& f) {
    j = json{{"hit_turn_limit", f.hit_turn_limit},
             {"abnormal_termination", f.abnormal_termination},
             {"missing_final_action", f.missing_final_action},
             {"turn_count", f.turn_count},
             {"student_failed", f.student_failed},
             {"reason_over_budget", f.reason_over_budget},
             {"error", f.error}};
}

inline void from_json(json const& j, QualityFlags& f) {
    f.hit_turn_limit = j.value("hit_turn_limit", false);
    f.abnormal_termination = j.value("abnormal_termination", false);
    f.missing_final_action = j.value("missing_final_action", false);
    f.turn_count = j.value("turn_count", std::size_t{0});
    f.student_failed = j.value("student_failed", false);
    f.reason_over_budget = j.value("reason_over_budget", false);
    f.error = j.value("error", std::string{});
}

inline void to_json(json& j, SynthesisRecord const& r) {
    j = json{{"record_id", r.record_id},
             {"pseudo_input", r.pseudo_input},
             {"teacher_conversation", r.teacher_conversation},
             {"student_first_output", r.student_first_output ? json(*r.student_first_output) : json(nullptr)},
             {"reason", r.reason},
             {"flags", r.flags}};
}

inline void from_json(json const& j, SynthesisRecord& r) {
    r.record_id = j.at("record_id").get<std::string>();
    r.pseudo_input = j.at("pseudo_input").get<Turn>();
    r.teacher_conversation = j.value("teacher_conversation", Conversation{});
    if (j.contains("student_first_output") && !j.at("student_first_output").is_null()) {
        r.student_first_output = j.at("student_first_output").get<Turn>();
    } else {
        r.student_first_output.reset();
    }
    r.reason = j.value("reason", std::string{});
    r.flags = j.value("flags", QualityFlags{});
}

/// Generator prompts. Placeholders: {prompt} {demonstrations} {input} {as_is} {to_be}.
struct SynthesisTemplates {
    std::string pseudo_input_system;
    std::string pseudo_input_user;
    std::string reason_system;
    std::string reason_user;

    [[nodiscard]] static SynthesisTemplates defaults() {
        return {
            "You write realistic user requests for an AI application. You are shown the application's full "
            "prompt and a few example requests. Write one new request that a real user could send to this "
            "application. Vary topic and difficulty. Output only the request text.",
            "Application prompt:\n{prompt}\n\nExample requests:\n{demonstrations}\n\nWrite one new request.",
            "You explain how an assistant must change its behaviour. You are shown an application prompt, a "
            "user input, the assistant's current answer without the prompt (AS-IS) and the desired answer "
            "with the prompt (TO-BE). In about 5 sentences, explain why the AS-IS answer must change into "
            "the TO-BE answer, citing the format and action requirements the prompt imposes.",
            "Application prompt:\n{prompt}\n\nUser input:\n{input}\n\nAS-IS:\n{as_is}\n\nTO-BE:\n{to_be}\n\n"
            "Reason:",
        };
    }

    /// Loads the four template files from a directory; missing files keep defaults.
    [[nodiscard]] static SynthesisTemplates load(std::filesystem::path const& dir) {
        auto t = defaults();
        auto read_if = [&](char const* name, std::string& slot) {
            auto const p = dir / name;
            if (std::filesystem::exists(p)) slot = read_text_file(p);
        };
        read_if("pseudo_input_system.txt", t.pseudo_input_system);
        read_if("pseudo_input_user.txt", t.pseudo_input_user);
        read_if("reason_system.txt", t.reason_system);
        read_if("reason_user.txt", t.reason_user);
        return t;
    }
};

namespace detail {

[[nodiscard]] inline std::string fill(std::string text, std::vector<std::pair<std::string, std::string>> const& vars) {
    for (auto const& [key, value] : vars) {
        std::string const needle = "{" + key + "}";
        for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + value.size())) {
            text.replace(pos, needle.size(), value);
        }
    }
    return text;
}

} // namespace detail

/// Thrown when fewer than the requested number of distinct items could be
/// produced; carries what was produced.
class PartialResultError : public Error {
public:
    PartialResultError(std::string const& what, std::vector<Turn> partial)
        : Error(what), partial_(std::move(partial)) {}

    [[nodiscard]] std::vector<Turn> const& partial() const noexcept { return partial_; }

private:
    std::vector<Turn> partial_;
};

struct PseudoInputOptions {
    std::size_t demonstrations_per_call = 5;
    /// Extra generations allowed for replacing exact duplicates.
    std::size_t retry_budget = 100;
    std::uint64_t seed = 0;
};

/// Generates `n` distinct pseudo user inputs for a prompt.
[[nodiscard]] inline std::vector<Turn> generate_pseudo_inputs(PromptSpec const& prompt, std::vector<Turn> const& demonstrations,
                                                              std::size_t n, Backend& backend,
                                                              SamplingParams const& params = sampling::pseudo_input(),
                                                              SynthesisTemplates const& templates = SynthesisTemplates::defaults(),
                                                              PseudoInputOptions const& options = {}) {
    if (n < 1) throw PreconditionError("generate_pseudo_inputs: n must be >= 1");
    std::string const flat_prompt = flatten(prompt.prompt);
    std::vector<Turn> out;
    std::set<std::string> seen;
    std::size_t retries_left = options.retry_budget;
    for (std::uint64_t call = 0; out.size() < n; ++call) {
        std::mt19937_64 rng(options.seed * 1'000'003ULL + call);
        std::vector<Turn> pool = demonstrations;
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(std::min(pool.size(), options.demonstrations_per_call));
        std::string demos;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            demos += std::to_string(i + 1) + ". " + pool[i].text + "\n";
        }
        if (demos.empty()) demos = "(none)\n";

        Conversation request{{system_turn(templates.pseudo_input_system, Origin::human),
                              user_turn(detail::fill(templates.pseudo_input_user,
                                                     {{"prompt", flat_prompt}, {"demonstrations", demos}}))}};
        SamplingParams p = params;
        p.seed = params.seed + call;
        auto generated = generate(backend, request, p);
        std::string text(trim(generated.text));
        if (!seen.insert(text).second) {
            if (retries_left == 0) {
                throw PartialResultError("duplicate pseudo inputs exhausted the retry budget after " +
                                             std::to_string(out.size()) + " of " + std::to_string(n),
                                         std::move(out));
            }
            --retries_left;
            continue;
        }
        out.push_back(user_turn(std::move(text), Origin::pseudo_input));
    }
    return out;
}

struct RolePlayOutcome {
    Conversation conversation;
    bool hit_turn_limit = false;
    bool terminated_by_token = false;
    bool abnormal_termination = false;
};

/// Failure part-way through a role-play; carries the conversation so far.
class RolePlayError : public Error {
public:
    RolePlayError(std::string const& what, Conversation partial) : Error(what), partial_(std::move(partial)) {}

    [[nodiscard]] Conversation const& partial() const noexcept { return partial_; }

private:
    Conversation partial_;
};

/// Context seen by the environment persona: its own system prompt, the
/// prompt's examples with roles swapped, then the swapped history.
[[nodiscard]] inline Conversation environment_view(PromptSpec const& prompt, TaskSpec const& task,
                                                   Conversation const& agent_history) {
    Conversation view{{system_turn(task.environment_prompt(), Origin::environment)}};
    auto const shots = role_swap(Conversation{prompt.prompt.body()});
    auto const history = role_swap(agent_history);
    view.turns.insert(view.turns.end(), shots.turns.begin(), shots.turns.end());
    view.turns.insert(view.turns.end(), history.turns.begin(), history.turns.end());
    validate(view, Opening::either);
    return view;
}

/// One model plays agent and environment in turn until the environment
/// emits the termination token or the agent reaches the task's turn limit.
/// `environment` may be the same backend as `agent`.
[[nodiscard]] inline RolePlayOutcome self_role_play(PromptSpec const& prompt, TaskSpec const& task, Turn const& pseudo_input,
                                                    Backend& agent, Backend& environment,
                                                    SamplingParams params = sampling::conversation()) {
    if (pseudo_input.role != Role::user) throw PreconditionError("self_role_play: pseudo input must be a user turn");
    task.validate();
    params.max_new_tokens = std::min(params.max_new_tokens, task.max_new_tokens);
    RolePlayOutcome out;
    out.conversation.turns.push_back(pseudo_input);
    auto const strip_token = [&](std::string text) {
        auto const pos = text.find(task.termination_token);
        if (pos != std::string::npos) text.resize(pos);
        return text;
    };
    for (std::size_t agent_turns = 0;;) {
        Turn reply;
        try {
            reply = teacher_generate(agent, prompt, out.conversation, params);
        } catch (Error const& e) {
            throw RolePlayError(std::string("agent generation failed: ") + e.what(), out.conversation);
        }
        reply.origin = Origin::agent;
        if (reply.text.find(task.termination_token) != std::string::npos) {
            // The agent spoke the environment's token; keep what preceded it.
            reply.text = strip_token(reply.text);
            if (!trim(reply.text).empty()) {
                out.conversation.turns.push_back(reply);
            } else if (out.conversation.size() > 1) {
                out.conversation.turns.pop_back();  // dangling environment observation
            }
            out.abnormal_termination = true;
            break;
        }
        out.conversation.turns.push_back(reply);
        ++agent_turns;

        Turn observation;
        try {
            observation = generate(environment, environment_view(prompt, task, out.conversation), params);
        } catch (Error const& e) {
            throw RolePlayError(std::string("environment generation failed: ") + e.what(), out.conversation);
        }
        if (observation.text.find(task.termination_token) != std::string::npos) {
            out.terminated_by_token = true;
            break;
        }
        if (agent_turns >= task.max_turns) {
            out.hit_turn_limit = true;
            break;
        }
        out.conversation.turns.push_back(user_turn(std::move(observation.text), Origin::environment));
    }
    if (out.conversation.empty() || out.conversation.back().role != Role::assistant) {
        throw RolePlayError("role-play produced no agent turn", out.conversation);
    }
    return out;
}

struct StageOptions {
    std::size_t workers = 1;
};

/// Fills the teacher conversation of every record that lacks one.
inline void run_role_play(std::vector<SynthesisRecord>& records, PromptSpec const& prompt, TaskSpec const& task,
                          Backend& agent, Backend& environment, SamplingParams const& params = sampling::conversation(),
                          StageOptions const& options = {}) {
    auto errors = parallel_for(records.size(), options.workers, [&](std::size_t i) {
        auto& r = records[i];
        if (r.has_conversation()) return;
        auto outcome = self_role_play(prompt, task, r.pseudo_input, agent, environment, params);
        r.teacher_conversation = std::move(outcome.conversation);
        r.flags.hit_turn_limit = outcome.hit_turn_limit;
        r.flags.abnormal_termination = outcome.abnormal_termination;
        r.flags.turn_count = r.teacher_conversation.count(Role::assistant);
    });
    rethrow_first(errors);
}

/// Fills y_0^S by asking the unprompted model. Failures are flagged on the
/// record, never dropped; filled records are left untouched.
inline void collect_student_outputs(std::vector<SynthesisRecord>& records, Backend& student,
                                    SamplingParams const& params = sampling::conversation(), StageOptions const& options = {}) {
    auto errors = parallel_for(records.size(), options.workers, [&](std::size_t i) {
        auto& r = records[i];
        if (r.student_first_output) return;
        try {
            auto turn = student_generate(student, Conversation{{r.pseudo_input}}, params);
            turn.origin = Origin::agent;
            r.student_first_output = std::move(turn);
            r.flags.student_failed = false;
            r.flags.error.clear();
        } catch (Error const& e) {
            r.flags.student_failed = true;
            r.flags.error = e.what();
        }
    });
    rethrow_first(errors);
}

/// Sentences as runs ending in '.', '!' or '?' followed by whitespace or end.
[[nodiscard]] inline std::size_t count_sentences(std::string_view text) {
    text = trim(text);
    if (text.empty()) return 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        char const c = text[i];
        if (c != '.' && c != '!' && c != '?') continue;
        while (i + 1 < text.size() && (text[i + 1] == '.' || text[i + 1] == '!' || text[i + 1] == '?')) ++i;
        if (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]))) ++n;
    }
    char const last = text.back();
    if (last != '.' && last != '!' && last != '?') ++n;
    return n;
}

struct ReasonOptions {
    std::size_t sentence_budget = 8;
    std::size_t workers = 1;
};

/// Fills the reason r explaining why AS-IS must become TO-BE. Over-budget
/// reasons are regenerated once, then kept and flagged.
inline void generate_reasons(std::vector<SynthesisRecord>& records, PromptSpec const& prompt, Backend& generator,
                             SamplingParams const& params = sampling::reason(),
                             SynthesisTemplates const& templates = SynthesisTemplates::defaults(),
                             ReasonOptions const& options = {}) {
    for (auto const& r : records) {
        if (!r.reason.empty()) continue;
        if (!r.has_conversation()) throw PreconditionError("record " + r.record_id + " has no teacher conversation");
        if (!r.student_first_output || trim(r.student_first_output->text).empty()) {
            throw PreconditionError("record " + r.record_id + " has an empty student output");
        }
    }
    std::string const flat_prompt = flatten(prompt.prompt);
    auto errors = parallel_for(records.size(), options.workers, [&](std::size_t i) {
        auto& r = records[i];
        if (!r.reason.empty()) return;
        Conversation request{{system_turn(templates.reason_system, Origin::human),
                              user_turn(detail::fill(templates.reason_user, {{"prompt", flat_prompt},
                                                                             {"input", r.pseudo_input.text},
                                                                             {"as_is", r.student_first_output->text},
                                                                             {"to_be", r.teacher_first_output().text}}))}};
        SamplingParams p = params;
        p.seed = params.seed + i;
        std::string reason(trim(generate(generator, request, p).text));
        if (count_sentences(reason) > options.sentence_budget) {
            p.seed += 7919;
            reason = std::string(trim(generate(generator, request, p).text));
            r.flags.reason_over_budget = count_sentences(reason) > options.sentence_budget;
        }
        r.reason = std::move(reason);
    });
    rethrow_first(errors);
}

struct QualityReport {
    struct Entry {
        std::string record_id;
        QualityFlags flags;
    };
    std::vector<Entry> records;
    std::size_t n = 0;
    double average_turns = 0.0;
    double turn_limit_rate = 0.0;
    double abnormal_termination_rate = 0.0;
    double missing_final_action_rate = 0.0;
    /// Turn counts strictly above the task limit; zero after truncation.
    std::size_t over_limit = 0;
};

/// Per-record flags and corpus-level rates over a finished corpus.
[[nodiscard]] inline QualityReport validate_corpus(std::vector<SynthesisRecord> const& records, TaskSpec const& task) {
    QualityReport report;
    report.n = records.size();
    std::size_t turns = 0;
    std::size_t limit = 0;
    std::size_t abnormal = 0;
    std::size_t missing = 0;
    for (auto const& r : records) {
        QualityFlags f = r.flags;
        f.turn_count = r.teacher_conversation.count(Role::assistant);
        if (f.turn_count == 0) {
            f.missing_final_action = true;
        } else {
            f.missing_final_action = parse_final_action(r.teacher_conversation.back().text, task).is_unknown();
        }
        turns += f.turn_count;
        limit += f.hit_turn_limit ? 1 : 0;
        abnormal += f.abnormal_termination ? 1 : 0;
        missing += f.missing_final_action ? 1 : 0;
        report.over_limit += f.turn_count > task.max_turns ? 1 : 0;
        report.records.push_back({r.record_id, f});
    }
    if (report.n > 0) {
        auto const n = static_cast<double>(report.n);
        report.average_turns = static_cast<double>(turns) / n;
        report.turn_limit_rate = static_cast<double>(limit) / n;
        report.abnormal_termination_rate = static_cast<double>(abnormal) / n;
        report.missing_final_action_rate = static_cast<double>(missing) / n;
    }
    return report;
}

inline void to_json(json& j, QualityReport const& q) {
    json recs = json::array();
    for (auto const& e : q.records) recs.push_back({{"record_id", e.record_id}, {"flags", e.flags}});
    j = json{{"n", q.n},
             {"average_turns", q.average_turns},
             {"turn_limit_rate", q.turn_limit_rate},
             {"abnormal_termination_rate", q.abnormal_termination_rate},
             {"missing_final_action_rate", q.missing_final_action_rate},
             {"over_limit", q.over_limit},
             {"records", recs}};
}

inline void from_json(json const& j, QualityReport& q) {
    q.n = j.at("n").get<std::size_t>();
    q.average_turns = j.at("average_turns").get<double>();
    q.turn_limit_rate = j.at("turn_limit_rate").get<double>();
    q.abnormal_termination_rate = j.at("abnormal_termination_rate").get<double>();
    q.missing_final_action_rate = j.at("missing_final_action_rate").get<double>();
    q.over_limit = j.value("over_limit", std::size_t{0});
    q.records.clear();
    for (auto const& e : j.value("records", json::array())) {
        q.records.push_back({e.at("record_id").get<std::string>(), e.at("flags").get<QualityFlags>()});
    }
}

[[nodiscard]] inline std::string format_percent(double fraction) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(1) << 100.0 * fraction << "%";
    return ss.str();
}

/// Human-readable table with the rows of the synthesis quality table.
[[nodiscard]] inline std::string quality_table(QualityReport const& q, std::string const& task_id) {
    std::ostringstream ss;
    ss << "| " << std::left << std::setw(22) << "Metric" << " | " << std::setw(8) << task_id << " |\n";
    ss << "|------------------------|----------|\n";
    auto row = [&](std::string const& name, std::string const& value) {
        ss << "| " << std::left << std::setw(22) << name << " | " << std::setw(8) << value << " |\n";
    };
    std::ostringstream avg;
    avg << std::fixed << std::setprecision(2) << q.average_turns;
    row("Samples", std::to_string(q.n));
    row("Avg. Turns", avg.str());
    row("Max Turns Limit", format_percent(q.turn_limit_rate));
    row("Abnormal Termination", format_percent(q.abnormal_termination_rate));
    row("Abnormal Final Action", format_percent(q.missing_final_action_rate));
    return ss.str();
}

} // namespace genpi
