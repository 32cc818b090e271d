#pragma once

#include "genpi/backend.hpp"
#include "genpi/conversation.hpp"
#include "genpi/parallel.hpp"
#include "genpi/records.hpp"
#include "genpi/serialization.hpp"
#include "genpi/task.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace genpi {

enum class Terminal { success, failure, reward, turn_limit, parse_failure, error };

[[nodiscard]] inline std::string_view to_string(Terminal t) noexcept {
    switch (t) {
    case Terminal::success: return "success";
    case Terminal::failure: return "failure";
    case Terminal::reward: return "reward";
    case Terminal::turn_limit: return "turn_limit";
    case Terminal::parse_failure: return "parse_failure";
    case Terminal::error: return "error";
    }
    return "error";
}

[[nodiscard]] inline Terminal terminal_from_string(std::string_view s) {
    for (auto t : {Terminal::success, Terminal::failure, Terminal::reward, Terminal::turn_limit, Terminal::parse_failure,
                   Terminal::error}) {
        if (to_string(t) == s) return t;
    }
    throw FormatError("unknown terminal '" + std::string(s) + "'");
}

/// Scored end of an episode, produced by the environment.
struct Outcome {
    Terminal terminal = Terminal::failure;
    std::optional<double> reward;  ///< in [0, 1] when present
    bool step_correct = false;     ///< web-browsing step correctness
};

/// An environment answers each parsed agent action with an observation or
/// a terminal outcome.
class Environment {
public:
    using Transition = std::variant<Turn, Outcome>;

    virtual ~Environment() = default;
    [[nodiscard]] virtual TaskSpec const& task() const = 0;
    [[nodiscard]] virtual Turn reset() = 0;
    [[nodiscard]] virtual Transition step(ParsedAction const& action, Turn const& agent_turn) = 0;
};

struct EpisodeResult {
    std::string episode_id;
    std::string task_id;
    Conversation conversation;
    Terminal terminal = Terminal::failure;
    std::optional<double> reward;
    bool step_correct = false;
    std::size_t steps = 0;
    std::string note;

    /// Per-episode score in [0, 1]: reward when present, else 1 for success.
    [[nodiscard]] double score() const noexcept {
        if (reward) return *reward;
        return terminal == Terminal::success ? 1.0 : 0.0;
    }
};

template <>
struct RecordKind<EpisodeResult> {
    static constexpr std::string_view value = "episode_result";
};

inline void to_json(json& j, EpisodeResult const& e) {
    j = json{{"episode_id", e.episode_id}, {"task_id", e.task_id},         {"conversation", e.conversation},
             {"terminal", to_string(e.terminal)}, {"step_correct", e.step_correct}, {"steps", e.steps},
             {"note", e.note}};
    j["reward"] = e.reward ? json(*e.reward) : json(nullptr);
}

inline void from_json(json const& j, EpisodeResult& e) {
    e.episode_id = j.at("episode_id").get<std::string>();
    e.task_id = j.at("task_id").get<std::string>();
    e.conversation = j.at("conversation").get<Conversation>();
    e.terminal = terminal_from_string(j.at("terminal").get<std::string>());
    e.reward = j.contains("reward") && !j.at("reward").is_null() ? std::optional<double>(j.at("reward").get<double>())
                                                                   : std::nullopt;
    e.step_correct = j.value("step_correct", false);
    e.steps = j.value("steps", std::size_t{0});
    e.note = j.value("note", std::string{});
}

/// The agent under evaluation: a backend, with the prompt in context
/// (prompted / upper bound) or without it (internalized or plain student).
struct ModelView {
    Backend* backend = nullptr;
    std::optional<PromptSpec> prompt;
    SamplingParams params = sampling::conversation();
};

/// One episode. Agent-side failures score as failures; environment faults
/// mark the episode as errored so aggregation can exclude it.
[[nodiscard]] inline EpisodeResult run_episode(ModelView const& view, Environment& env, std::size_t max_turns,
                                               std::string episode_id = {}) {
    if (!view.backend) throw PreconditionError("run_episode: no backend");
    if (max_turns < 1) throw PreconditionError("run_episode: max_turns must be >= 1");
    auto const& task = env.task();
    EpisodeResult res;
    res.episode_id = std::move(episode_id);
    res.task_id = task.task_id;
    try {
        res.conversation.turns.push_back(env.reset());
    } catch (std::exception const& e) {
        res.terminal = Terminal::error;
        res.note = std::string("environment reset failed: ") + e.what();
        return res;
    }
    SamplingParams params = view.params;
    params.max_new_tokens = std::min(params.max_new_tokens, task.max_new_tokens);
    while (res.steps < max_turns) {
        Turn reply;
        try {
            reply = view.prompt ? teacher_generate(*view.backend, *view.prompt, res.conversation, params)
                                : student_generate(*view.backend, res.conversation, params);
        } catch (Error const& e) {
            res.terminal = Terminal::failure;
            res.note = std::string("agent generation failed: ") + e.what();
            return res;
        }
        reply.origin = Origin::agent;
        res.conversation.turns.push_back(reply);
        ++res.steps;
        auto const action = parse_action(reply.text, task);
        if (action.is_unknown()) {
            res.terminal = Terminal::parse_failure;
            return res;
        }
        Environment::Transition next;
        try {
            next = env.step(action, reply);
        } catch (std::exception const& e) {
            res.terminal = Terminal::error;
            res.note = std::string("environment step failed: ") + e.what();
            return res;
        }
        if (auto const* out = std::get_if<Outcome>(&next)) {
            res.terminal = out->terminal;
            res.reward = out->reward;
            res.step_correct = out->step_correct;
            return res;
        }
        Turn obs = std::get<Turn>(std::move(next));
        obs.role = Role::user;
        obs.origin = Origin::environment;
        if (res.steps < max_turns) res.conversation.turns.push_back(std::move(obs));
    }
    res.terminal = Terminal::turn_limit;
    return res;
}

// ---------------------------------------------------------------------------
// Web-shopping reward

struct ShoppingGoal {
    std::set<std::string> attributes;
    std::set<std::string> options;
    double price_cap = 0.0;
    std::string title;
    std::vector<std::string> category_path;
};

struct ShoppingChoice {
    std::set<std::string> attributes;
    std::set<std::string> options;
    double price = 0.0;
    std::string title;
    std::vector<std::string> category_path;
};

struct RewardOptions {
    /// As printed, r_type is 0.5 when TM > 0.2 and the category matches.
    /// Set to apply that branch on a category mismatch instead.
    bool invert_category_branch = false;
};

/// Type multiplier, branches tested top to bottom.
[[nodiscard]] inline double reward_type_multiplier(double text_match, bool category_match, RewardOptions const& opt = {}) {
    bool const c = opt.invert_category_branch ? !category_match : category_match;
    if (text_match == 0.0) return 0.0;
    if (text_match < 0.1) return 0.1;
    if (text_match > 0.2 && c) return 0.5;
    return 1.0;
}

[[nodiscard]] inline double webshop_reward(ShoppingGoal const& goal, ShoppingChoice const& choice, double text_match,
                                           bool category_match, RewardOptions const& opt = {}) {
    if (!(text_match >= 0.0 && text_match <= 1.0)) throw PreconditionError("text match must lie in [0, 1]");
    auto overlap = [](std::set<std::string> const& a, std::set<std::string> const& b) {
        std::size_t n = 0;
        for (auto const& x : a) n += b.contains(x) ? 1 : 0;
        return n;
    };
    double const hits = static_cast<double>(overlap(goal.attributes, choice.attributes) + overlap(goal.options, choice.options) +
                                            (choice.price <= goal.price_cap ? 1 : 0));
    double const total = static_cast<double>(goal.attributes.size() + goal.options.size() + 1);
    return hits / total * reward_type_multiplier(text_match, category_match, opt);
}

namespace detail {

inline std::set<std::string> const& stop_words() {
    static std::set<std::string> const words{"a",    "an",   "and",  "are",   "as",    "at",   "be",  "by",  "for",
                                             "from", "has",  "in",   "is",    "it",    "its",  "of",  "on",  "or",
                                             "that", "the",  "to",   "was",   "were",  "will", "with", "this", "these",
                                             "those", "your", "you", "our",  "we",    "i",    "me",  "my"};
    return words;
}

inline std::vector<std::string> content_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty() && !stop_words().contains(cur)) out.push_back(cur);
        cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isalnum(c) != 0 || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

} // namespace detail

/// |content tokens shared| / |goal content tokens|, after lowercasing and
/// stop-word removal.
[[nodiscard]] inline double default_text_match(std::string_view goal_title, std::string_view choice_title) {
    if (trim(goal_title).empty() || trim(choice_title).empty()) throw PreconditionError("titles must be non-empty");
    auto const g = detail::content_tokens(goal_title);
    auto const y = detail::content_tokens(choice_title);
    std::set<std::string> const goal(g.begin(), g.end());
    std::set<std::string> const choice(y.begin(), y.end());
    if (goal.empty()) return 0.0;
    std::size_t shared = 0;
    for (auto const& t : goal) shared += choice.contains(t) ? 1 : 0;
    return static_cast<double>(shared) / static_cast<double>(goal.size());
}

using TextMatcher = std::function<double(std::string_view, std::string_view)>;

// ---------------------------------------------------------------------------
// Aggregation

struct MetricReport {
    std::string task_id;
    std::string label;
    std::size_t n_samples = 0;
    std::size_t n_errored = 0;
    std::optional<double> success_rate;       ///< os, percent
    std::optional<double> step_success_rate;  ///< wb, percent
    std::optional<double> mean_reward;        ///< ws, percent
    double score = 0.0;                       ///< the task's headline metric, percent
    std::optional<double> upper_bound;
    std::optional<double> normalized;
    std::vector<std::string> warnings;
};

/// 100 * score / upper_bound; nullopt when the bound is not positive.
[[nodiscard]] inline std::optional<double> normalize(double score, double upper_bound) {
    if (!(upper_bound > 0.0)) return std::nullopt;
    return 100.0 * score / upper_bound;
}

[[nodiscard]] inline MetricReport aggregate(std::vector<EpisodeResult> const& episodes, std::string const& task_id,
                                            std::optional<double> upper_bound = std::nullopt, std::string label = {}) {
    MetricReport r;
    r.task_id = task_id;
    r.label = std::move(label);
    double total = 0.0;
    for (auto const& e : episodes) {
        if (e.task_id != task_id) throw PreconditionError("episode " + e.episode_id + " belongs to task " + e.task_id);
        if (e.terminal == Terminal::error) {
            ++r.n_errored;
            continue;
        }
        ++r.n_samples;
        if (task_id == "wb") {
            total += e.step_correct ? 1.0 : 0.0;
        } else {
            total += e.score();
        }
    }
    if (r.n_errored > 0) r.warnings.push_back(std::to_string(r.n_errored) + " errored episode(s) excluded");
    double const score = r.n_samples > 0 ? 100.0 * total / static_cast<double>(r.n_samples) : 0.0;
    r.score = score;
    if (task_id == "os") r.success_rate = score;
    else if (task_id == "wb") r.step_success_rate = score;
    else r.mean_reward = score;
    if (upper_bound) {
        r.upper_bound = upper_bound;
        r.normalized = normalize(score, *upper_bound);
        if (!r.normalized) r.warnings.push_back("upper bound is not positive; normalization skipped");
    }
    return r;
}

inline void to_json(json& j, MetricReport const& r) {
    auto opt = [](std::optional<double> const& v) { return v ? json(*v) : json(nullptr); };
    j = json{{"task_id", r.task_id},
             {"label", r.label},
             {"n_samples", r.n_samples},
             {"n_errored", r.n_errored},
             {"success_rate", opt(r.success_rate)},
             {"step_success_rate", opt(r.step_success_rate)},
             {"mean_reward", opt(r.mean_reward)},
             {"score", r.score},
             {"upper_bound", opt(r.upper_bound)},
             {"normalized", opt(r.normalized)},
             {"warnings", r.warnings}};
}

inline void from_json(json const& j, MetricReport& r) {
    auto opt = [&](char const* key) {
        return j.contains(key) && !j.at(key).is_null() ? std::optional<double>(j.at(key).get<double>()) : std::nullopt;
    };
    r.task_id = j.at("task_id").get<std::string>();
    r.label = j.value("label", std::string{});
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.n_errored = j.value("n_errored", std::size_t{0});
    r.success_rate = opt("success_rate");
    r.step_success_rate = opt("step_success_rate");
    r.mean_reward = opt("mean_reward");
    r.score = j.at("score").get<double>();
    r.upper_bound = opt("upper_bound");
    r.normalized = opt("normalized");
    r.warnings = j.value("warnings", std::vector<std::string>{});
}

[[nodiscard]] inline std::string format_fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

/// Markdown table: one row per report, score and normalized score.
[[nodiscard]] inline std::string metric_table(std::vector<MetricReport> const& reports) {
    std::string out = "| Method | Task | n | Score | Norm. |\n|---|---|---|---|---|\n";
    for (auto const& r : reports) {
        out += "| " + (r.label.empty() ? std::string("-") : r.label) + " | " + r.task_id + " | " +
               std::to_string(r.n_samples) + " | " + format_fixed(r.score) + " | " +
               (r.normalized ? format_fixed(*r.normalized) : std::string("-")) + " |\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scripted environments

/// Fixture-driven environment. Transitions are keyed by parsed action name
/// and (optionally) argument, compared case-insensitively after trimming.
class ScriptedEnvironment final : public Environment {
public:
    struct TransitionRule {
        std::string action;
        std::optional<std::string> argument;
        std::string observation;
        std::optional<std::string> select_product;  ///< shopping: product now on screen
    };

    struct AnswerSpec {
        std::string expected;
    };
    struct StepSpec {
        std::string element;
        std::string operation;
        std::string value;
    };
    struct ShopSpec {
        ShoppingGoal goal;
        std::map<std::string, ShoppingChoice> products;
        std::string buy_argument = "buy now";
    };
    using Scoring = std::variant<AnswerSpec, StepSpec, ShopSpec>;

    ScriptedEnvironment(TaskSpec task, std::string initial_observation, std::vector<TransitionRule> transitions,
                        std::string default_observation, Scoring scoring, RewardOptions reward_options = {},
                        TextMatcher matcher = default_text_match)
        : task_(std::move(task)),
          initial_(std::move(initial_observation)),
          transitions_(std::move(transitions)),
          default_observation_(std::move(default_observation)),
          scoring_(std::move(scoring)),
          reward_options_(reward_options),
          matcher_(std::move(matcher)) {}

    [[nodiscard]] TaskSpec const& task() const override { return task_; }

    [[nodiscard]] Turn reset() override {
        selected_.reset();
        return user_turn(initial_, Origin::environment);
    }

    [[nodiscard]] Transition step(ParsedAction const& action, Turn const&) override {
        auto const name = detail::lower(action.action_name);
        auto const arg = detail::lower(trim(action.argument.value_or("")));
        if (auto const* a = std::get_if<AnswerSpec>(&scoring_)) {
            if (task_.final_action_vocabulary.contains(name)) {
                bool const ok = name == "answer" && arg == detail::lower(trim(a->expected));
                return Outcome{ok ? Terminal::success : Terminal::failure, std::nullopt, ok};
            }
        } else if (auto const* s = std::get_if<StepSpec>(&scoring_)) {
            bool const element_ok = detail::lower(trim(action.element.value_or(""))) == detail::lower(trim(s->element));
            bool const op_ok = name == detail::lower(trim(s->operation));
            bool const needs_value = op_ok && (name == "type" || name == "select");
            bool const value_ok = !needs_value || arg == detail::lower(trim(s->value));
            bool const ok = element_ok && op_ok && value_ok;
            return Outcome{ok ? Terminal::success : Terminal::failure, std::nullopt, ok};
        } else if (auto const* shop = std::get_if<ShopSpec>(&scoring_)) {
            if (name == "click" && arg == detail::lower(shop->buy_argument)) {
                double reward = 0.0;
                if (selected_) {
                    auto const& choice = shop->products.at(*selected_);
                    double const tm = matcher_(shop->goal.title, choice.title);
                    bool const category = choice.category_path == shop->goal.category_path;
                    reward = webshop_reward(shop->goal, choice, tm, category, reward_options_);
                }
                return Outcome{Terminal::reward, reward, reward > 0.0};
            }
        }
        for (auto const& t : transitions_) {
            if (detail::lower(t.action) != name) continue;
            if (t.argument && detail::lower(trim(*t.argument)) != arg) continue;
            if (t.select_product) selected_ = t.select_product;
            return user_turn(t.observation, Origin::environment);
        }
        return user_turn(default_observation_, Origin::environment);
    }

private:
    TaskSpec task_;
    std::string initial_;
    std::vector<TransitionRule> transitions_;
    std::string default_observation_;
    Scoring scoring_;
    RewardOptions reward_options_;
    TextMatcher matcher_;
    std::optional<std::string> selected_;
};

/// An environment fixture as stored on disk.
struct EnvironmentFixture {
    std::string episode_id;
    json spec;

    [[nodiscard]] std::unique_ptr<Environment> instantiate(TaskSpec const& task, RewardOptions const& opt = {}) const;
};

inline void from_json(json const& j, ShoppingGoal& g) {
    g.attributes = j.value("attributes", std::set<std::string>{});
    g.options = j.value("options", std::set<std::string>{});
    g.price_cap = j.at("price_cap").get<double>();
    g.title = j.at("title").get<std::string>();
    g.category_path = j.value("category_path", std::vector<std::string>{});
}

inline void from_json(json const& j, ShoppingChoice& c) {
    c.attributes = j.value("attributes", std::set<std::string>{});
    c.options = j.value("options", std::set<std::string>{});
    c.price = j.at("price").get<double>();
    c.title = j.at("title").get<std::string>();
    c.category_path = j.value("category_path", std::vector<std::string>{});
}

inline std::unique_ptr<Environment> EnvironmentFixture::instantiate(TaskSpec const& task, RewardOptions const& opt) const {
    std::vector<ScriptedEnvironment::TransitionRule> rules;
    for (auto const& t : spec.value("transitions", json::array())) {
        ScriptedEnvironment::TransitionRule r;
        r.action = t.at("action").get<std::string>();
        if (t.contains("argument")) r.argument = t.at("argument").get<std::string>();
        r.observation = t.at("observation").get<std::string>();
        if (t.contains("select_product")) r.select_product = t.at("select_product").get<std::string>();
        rules.push_back(std::move(r));
    }
    auto const& term = spec.at("terminal");
    auto const kind = term.at("kind").get<std::string>();
    ScriptedEnvironment::Scoring scoring;
    if (kind == "answer") {
        scoring = ScriptedEnvironment::AnswerSpec{term.at("expected").get<std::string>()};
    } else if (kind == "step") {
        scoring = ScriptedEnvironment::StepSpec{term.at("element").get<std::string>(), term.at("operation").get<std::string>(),
                                                term.value("value", std::string{})};
    } else if (kind == "shop") {
        ScriptedEnvironment::ShopSpec shop;
        shop.goal = term.at("goal").get<ShoppingGoal>();
        for (auto const& [id, p] : term.at("products").items()) shop.products[id] = p.get<ShoppingChoice>();
        shop.buy_argument = term.value("buy_argument", shop.buy_argument);
        for (auto const& r : rules) {
            if (r.select_product && !shop.products.contains(*r.select_product)) {
                throw FormatError("fixture " + episode_id + " selects unknown product " + *r.select_product);
            }
        }
        scoring = std::move(shop);
    } else {
        throw FormatError("fixture " + episode_id + ": unknown terminal kind '" + kind + "'");
    }
    return std::make_unique<ScriptedEnvironment>(task, spec.at("initial_observation").get<std::string>(), std::move(rules),
                                                 spec.value("default_observation", std::string("Nothing happens.")),
                                                 std::move(scoring), opt);
}

/// Evaluation suite file: {"task": <task json>, "episodes": [{"episode_id", ...fixture}]}.
struct EvalSuite {
    TaskSpec task;
    std::vector<EnvironmentFixture> episodes;
    RewardOptions reward_options;
};

[[nodiscard]] inline EvalSuite load_eval_suite(std::filesystem::path const& path) {
    auto const j = read_json_file(path);
    EvalSuite s;
    s.task = j.at("task").get<TaskSpec>();
    s.reward_options.invert_category_branch = j.value("invert_category_branch", false);
    for (auto const& e : j.at("episodes")) s.episodes.push_back({e.at("episode_id").get<std::string>(), e});
    for (auto const& e : s.episodes) (void)e.instantiate(s.task, s.reward_options);  // validate eagerly
    return s;
}

/// Runs every episode of a suite. Each worker gets its own environment.
[[nodiscard]] inline std::vector<EpisodeResult> run_suite(ModelView const& view, EvalSuite const& suite,
                                                          std::size_t workers = 1) {
    std::vector<EpisodeResult> results(suite.episodes.size());
    rethrow_first(parallel_for(suite.episodes.size(), workers, [&](std::size_t i) {
        auto env = suite.episodes[i].instantiate(suite.task, suite.reward_options);
        results[i] = run_episode(view, *env, suite.task.max_turns, suite.episodes[i].episode_id);
    }));
    return results;
}

} // namespace genpi
