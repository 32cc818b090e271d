#include "genpi/evaluator.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace genpi;

namespace {

ScriptedEnvironment os_env(std::string expected = "220") {
    return ScriptedEnvironment(os_task(), "How many files are in /etc?",
                               {{"bash", "ls /etc | wc -l", "220", std::nullopt}}, "bash: command not found",
                               ScriptedEnvironment::AnswerSpec{std::move(expected)});
}

ModelView view_of(Backend& b) { return ModelView{&b, std::nullopt, sampling::conversation()}; }

std::set<std::string> subset(std::vector<std::string> const& universe, unsigned mask) {
    std::set<std::string> out;
    for (std::size_t i = 0; i < universe.size(); ++i) {
        if (mask & (1u << i)) out.insert(universe[i]);
    }
    return out;
}

} // namespace

TEST(Episode, ImmediateCorrectAnswer) {
    auto env = os_env();
    ScriptedBackend agent("a", {std::string("Act: answer(220)")});
    auto const r = run_episode(view_of(agent), env, 5);
    EXPECT_EQ(r.terminal, Terminal::success);
    EXPECT_EQ(r.steps, 1u);
    EXPECT_DOUBLE_EQ(r.score(), 1.0);
}

TEST(Episode, ToolUseThenAnswer) {
    auto env = os_env();
    ScriptedBackend agent("a", {std::string("Act: bash\n```bash\nls /etc | wc -l\n```"), std::string("Act: answer(220)")});
    auto const r = run_episode(view_of(agent), env, 5);
    EXPECT_EQ(r.terminal, Terminal::success);
    EXPECT_EQ(r.steps, 2u);
    EXPECT_EQ(r.conversation.turns[2].text, "220");
    EXPECT_EQ(r.conversation.turns[2].origin, Origin::environment);
    EXPECT_TRUE(is_valid(r.conversation));
}

TEST(Episode, WrongAnswerFails) {
    auto env = os_env();
    ScriptedBackend agent("a", {std::string("Act: answer(12)")});
    EXPECT_EQ(run_episode(view_of(agent), env, 5).terminal, Terminal::failure);
}

TEST(Episode, TurnLimit) {
    auto env = os_env();
    CallbackBackend agent("a", [](Conversation const&, SamplingParams const&) { return std::string("Act: bash\n```bash\nls\n```"); });
    auto const r = run_episode(view_of(agent), env, 5);
    EXPECT_EQ(r.terminal, Terminal::turn_limit);
    EXPECT_EQ(r.steps, 5u);
    EXPECT_EQ(r.conversation.count(Role::assistant), 5u);
    EXPECT_TRUE(is_valid(r.conversation));
}

TEST(Episode, UndefinedActionIsParseFailure) {
    ScriptedEnvironment env(wb_task(), "Choose an element.", {}, "",
                            ScriptedEnvironment::StepSpec{"B", "click", ""});
    ScriptedBackend agent("a", {std::string("ELEMENT: B\nACTION: COMPARE\nVALUE: None")});
    auto const r = run_episode(view_of(agent), env, 2);
    EXPECT_EQ(r.terminal, Terminal::parse_failure);
    EXPECT_DOUBLE_EQ(r.score(), 0.0);
}

TEST(Episode, WebStepCorrectness) {
    auto const run = [](std::string reply) {
        ScriptedEnvironment env(wb_task(), "Choose.", {}, "", ScriptedEnvironment::StepSpec{"C", "type", "New York"});
        ScriptedBackend agent("a", {std::move(reply)});
        return run_episode(view_of(agent), env, 2);
    };
    EXPECT_TRUE(run("ELEMENT: C\nACTION: TYPE\nVALUE: new york").step_correct);
    EXPECT_FALSE(run("ELEMENT: C\nACTION: TYPE\nVALUE: boston").step_correct);
    EXPECT_FALSE(run("ELEMENT: B\nACTION: TYPE\nVALUE: new york").step_correct);
    EXPECT_FALSE(run("ELEMENT: C\nACTION: CLICK\nVALUE: None").step_correct);
}

TEST(Episode, EnvironmentFaultIsErrored) {
    class Broken final : public Environment {
    public:
        TaskSpec const& task() const override { return task_; }
        Turn reset() override { return user_turn("start"); }
        Transition step(ParsedAction const&, Turn const&) override { throw std::runtime_error("crash"); }

    private:
        TaskSpec task_ = os_task();
    } env;
    ScriptedBackend agent("a", {std::string("Act: answer(1)")});
    auto const r = run_episode(view_of(agent), env, 3);
    EXPECT_EQ(r.terminal, Terminal::error);
    auto const report = aggregate({r}, "os");
    EXPECT_EQ(report.n_errored, 1u);
    EXPECT_EQ(report.n_samples, 0u);
    EXPECT_FALSE(report.warnings.empty());
}

TEST(Episode, PromptIsVisibleOnlyWhenGiven) {
    auto env = os_env();
    ScriptedBackend agent("a", {std::string("Act: answer(220)")});
    ModelView v{&agent, PromptSpec::from_text("os", "SYSTEM"), sampling::conversation()};
    (void)run_episode(v, env, 3);
    EXPECT_TRUE(agent.calls().at(0).has_system());
}

TEST(Shopping, PrintedExamples) {
    ShoppingGoal g{{"a", "b"}, {"o"}, 10.0, "t", {}};
    ShoppingChoice exact{{"a", "b"}, {"o"}, 9.0, "t", {}};
    EXPECT_DOUBLE_EQ(webshop_reward(g, exact, 1.0, true), 0.5);
    EXPECT_DOUBLE_EQ(webshop_reward(g, exact, 0.0, true), 0.0);
    ShoppingChoice partial{{"a"}, {}, 11.0, "t", {}};
    EXPECT_DOUBLE_EQ(webshop_reward(g, partial, 0.15, false), 0.25);
}

TEST(Shopping, InvertedCategoryBranch) {
    RewardOptions inv{true};
    EXPECT_DOUBLE_EQ(reward_type_multiplier(1.0, true, inv), 1.0);
    EXPECT_DOUBLE_EQ(reward_type_multiplier(1.0, false, inv), 0.5);
    EXPECT_DOUBLE_EQ(reward_type_multiplier(0.05, false, inv), 0.1);
}

TEST(Shopping, RewardBoundedAndMonotone) {
    std::vector<std::string> const attrs{"a1", "a2", "a3"}, opts{"o1", "o2"};
    for (unsigned ga = 0; ga < 8; ++ga) {
        for (unsigned go = 0; go < 4; ++go) {
            ShoppingGoal g{subset(attrs, ga), subset(opts, go), 10.0, "t", {}};
            for (unsigned ya = 0; ya < 8; ++ya) {
                for (unsigned yo = 0; yo < 4; ++yo) {
                    for (double tm : {0.0, 0.05, 0.15, 0.5, 1.0}) {
                        for (bool c : {false, true}) {
                            ShoppingChoice y{subset(attrs, ya), subset(opts, yo), 5.0, "t", {}};
                            double const r = webshop_reward(g, y, tm, c);
                            EXPECT_GE(r, 0.0);
                            EXPECT_LE(r, 1.0);
                            // adding a goal attribute to the choice never lowers the reward
                            for (auto const& a : g.attributes) {
                                auto more = y;
                                more.attributes.insert(a);
                                EXPECT_GE(webshop_reward(g, more, tm, c), r);
                            }
                        }
                    }
                }
            }
        }
    }
}

TEST(Shopping, TextMatch) {
    EXPECT_DOUBLE_EQ(default_text_match("Red Cotton Shirt", "red cotton shirt"), 1.0);
    EXPECT_DOUBLE_EQ(default_text_match("red shirt", "blue hat"), 0.0);
    EXPECT_DOUBLE_EQ(default_text_match("red cotton shirt", "blue cotton shirt"), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(default_text_match("the shirt for men", "a shirt"), 0.5);
    EXPECT_THROW((void)default_text_match("", "x"), PreconditionError);
}

TEST(Shopping, EpisodeBuysSelectedProduct) {
    ScriptedEnvironment::ShopSpec shop;
    shop.goal = {{"cotton"}, {"large"}, 30.0, "red cotton shirt", {"clothing", "shirts"}};
    shop.products["p1"] = {{"cotton"}, {"large"}, 25.0, "red cotton shirt", {"clothing", "shirts"}};
    ScriptedEnvironment env(ws_task(), "Find a red cotton shirt under $30.",
                            {{"search", std::nullopt, "[p1] Red Cotton Shirt $25", std::nullopt},
                             {"click", "p1", "Red Cotton Shirt. [Buy Now]", std::string("p1")}},
                            "Nothing.", shop);
    ScriptedBackend agent("a", {std::string("search[red cotton shirt]"), std::string("click[p1]"),
                                std::string("click[Buy Now]")});
    auto const r = run_episode(view_of(agent), env, 5);
    EXPECT_EQ(r.terminal, Terminal::reward);
    ASSERT_TRUE(r.reward);
    EXPECT_DOUBLE_EQ(*r.reward, 0.5);  // perfect match, category equal: printed branch gives 0.5
}

TEST(Aggregate, NormalizationFromPrintedScores) {
    EXPECT_NEAR(*normalize(17.36, 17.36), 100.00, 1e-9);
    EXPECT_NEAR(*normalize(14, 17), 82.35, 0.01);
    EXPECT_NEAR(*normalize(44.46, 54.16), 82.09, 0.01);
    EXPECT_EQ(*normalize(0.0, 10.0), 0.0);
    EXPECT_FALSE(normalize(5.0, 0.0));
}

TEST(Aggregate, RatesAndDuplicationInvariance) {
    std::vector<EpisodeResult> eps(4);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        eps[i].episode_id = "e" + std::to_string(i);
        eps[i].task_id = "os";
        eps[i].terminal = i == 0 ? Terminal::success : Terminal::failure;
    }
    auto const r = aggregate(eps, "os", 50.0, "genpi");
    EXPECT_DOUBLE_EQ(*r.success_rate, 25.0);
    EXPECT_DOUBLE_EQ(*r.normalized, 50.0);
    auto doubled = eps;
    doubled.insert(doubled.end(), eps.begin(), eps.end());
    EXPECT_DOUBLE_EQ(aggregate(doubled, "os", 50.0).score, r.score);
    auto const skipped = aggregate(eps, "os", 0.0);
    EXPECT_FALSE(skipped.normalized);
    EXPECT_FALSE(skipped.warnings.empty());
    EXPECT_NE(metric_table({r}).find("| genpi | os | 4 | 25.00 | 50.00 |"), std::string::npos);
}

TEST(Aggregate, ReportJsonRoundTrip) {
    EpisodeResult e;
    e.episode_id = "w1";
    e.task_id = "ws";
    e.terminal = Terminal::reward;
    e.reward = 0.75;
    e.conversation = Conversation{{user_turn("go"), assistant_turn("click[Buy Now]")}};
    json je = e;
    auto const back = je.get<EpisodeResult>();
    EXPECT_EQ(back.reward, e.reward);
    EXPECT_EQ(back.conversation, e.conversation);
    auto const r = aggregate({e}, "ws", 100.0);
    json jr = r;
    EXPECT_EQ(json(jr.get<MetricReport>()), jr);
    EXPECT_DOUBLE_EQ(*r.mean_reward, 75.0);
}

TEST(Suite, LoadsFixtureFile) {
    test_support::TempDir dir;
    write_text_file_atomic(dir / "suite.json", R"({
      "task": {"task_id": "os", "max_turns": 4},
      "episodes": [
        {"episode_id": "e1", "initial_observation": "count", "transitions": [{"action": "bash", "observation": "3"}],
         "terminal": {"kind": "answer", "expected": "3"}},
        {"episode_id": "e2", "initial_observation": "count", "terminal": {"kind": "answer", "expected": "4"}}
      ]})");
    auto const suite = load_eval_suite(dir / "suite.json");
    CallbackBackend agent("a", [](Conversation const& c, SamplingParams const&) {
        return c.size() == 1 ? std::string("Act: bash\n```bash\nls\n```") : std::string("Act: answer(3)");
    });
    auto const results = run_suite(view_of(agent), suite);
    ASSERT_EQ(results.size(), 2u);
    EXPECT_EQ(results[0].terminal, Terminal::success);
    EXPECT_EQ(results[1].terminal, Terminal::failure);
    EXPECT_DOUBLE_EQ(aggregate(results, "os").score, 50.0);
}
