#include "genpi/records.hpp"
#include "genpi/synthesis.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace genpi;

namespace {

PromptSpec os_prompt() {
    PromptSpec p;
    p.name = "os";
    p.prompt = Conversation{{system_turn("You are an OS agent. Use Act: bash or Act: answer(...)."),
                             user_turn("How many files are in /etc?", Origin::prompt),
                             assistant_turn("Act: bash\n```bash\nls /etc | wc -l\n```", Origin::prompt),
                             user_turn("The output of the OS:\n220", Origin::prompt),
                             assistant_turn("Act: answer(220)", Origin::prompt)}};
    return p;
}

/// Agent that issues `commands` bash calls and then answers.
CallbackBackend counting_agent(std::size_t commands) {
    return CallbackBackend("agent", [commands](Conversation const& c, SamplingParams const&) {
        auto const done = c.count(Role::assistant) - 2;  // prompt shots hold two assistant turns
        if (done < commands) return "Act: bash\n```bash\nstep " + std::to_string(done) + "\n```";
        return std::string("Act: answer(7)");
    });
}

/// Environment that replies to commands and ends on an answer.
CallbackBackend os_environment(TaskSpec const& task) {
    return CallbackBackend("env", [task](Conversation const& c, SamplingParams const&) {
        auto const& last = c.back().text;
        if (last.find("Act: answer") != std::string::npos) return task.termination_token;
        return "The output of the OS:\n" + std::to_string(last.size());
    });
}

SynthesisRecord record_with(std::string id, Conversation c) {
    SynthesisRecord r;
    r.record_id = std::move(id);
    r.pseudo_input = c.turns.front();
    r.teacher_conversation = std::move(c);
    return r;
}

} // namespace

TEST(PseudoInputs, DistinctAndCounted) {
    int k = 0;
    CallbackBackend gen("g", [&](Conversation const&, SamplingParams const&) { return "request " + std::to_string(k++ / 2); });
    auto const out = generate_pseudo_inputs(os_prompt(), {user_turn("demo one"), user_turn("demo two")}, 5, gen);
    ASSERT_EQ(out.size(), 5u);
    std::set<std::string> texts;
    for (auto const& t : out) {
        EXPECT_EQ(t.role, Role::user);
        EXPECT_EQ(t.origin, Origin::pseudo_input);
        texts.insert(t.text);
    }
    EXPECT_EQ(texts.size(), 5u);
}

TEST(PseudoInputs, RequestCarriesPromptAndDemonstrations) {
    ScriptedBackend gen("g", {std::string("new request")});
    (void)generate_pseudo_inputs(os_prompt(), {user_turn("demo alpha")}, 1, gen);
    auto const call = gen.calls().at(0);
    EXPECT_NE(call.back().text.find("demo alpha"), std::string::npos);
    EXPECT_NE(call.back().text.find("You are an OS agent."), std::string::npos);
}

TEST(PseudoInputs, DuplicatesExhaustBudget) {
    CallbackBackend gen("g", [](Conversation const&, SamplingParams const&) { return std::string("same"); });
    PseudoInputOptions opt;
    opt.retry_budget = 3;
    try {
        (void)generate_pseudo_inputs(os_prompt(), {}, 2, gen, sampling::pseudo_input(), SynthesisTemplates::defaults(), opt);
        FAIL();
    } catch (PartialResultError const& e) {
        EXPECT_EQ(e.partial().size(), 1u);
    }
    EXPECT_THROW((void)generate_pseudo_inputs(os_prompt(), {}, 0, gen), PreconditionError);
}

TEST(RolePlay, EnvironmentViewSwapsShotsAndHistory) {
    auto const task = os_task();
    Conversation history{{user_turn("count files"), assistant_turn("Act: bash\n```bash\nls\n```")}};
    auto const view = environment_view(os_prompt(), task, history);
    EXPECT_EQ(view.turns[0].role, Role::system);
    EXPECT_NE(view.turns[0].text.find(task.termination_token), std::string::npos);
    EXPECT_EQ(view.turns[1].role, Role::assistant);  // the prompt's user shot
    EXPECT_EQ(view.back().role, Role::user);         // the agent's command
    EXPECT_EQ(view.back().text, history.back().text);
}

TEST(RolePlay, StopsOnTerminationToken) {
    auto const task = os_task();
    auto agent = counting_agent(2);
    auto env = os_environment(task);
    auto const out = self_role_play(os_prompt(), task, user_turn("q", Origin::pseudo_input), agent, env);
    EXPECT_TRUE(out.terminated_by_token);
    EXPECT_FALSE(out.hit_turn_limit);
    EXPECT_EQ(out.conversation.count(Role::assistant), 3u);
    EXPECT_EQ(out.conversation.back().text, "Act: answer(7)");
    EXPECT_TRUE(is_valid(out.conversation));
    for (auto const& t : out.conversation.turns) EXPECT_EQ(t.text.find(task.termination_token), std::string::npos);
}

TEST(RolePlay, TurnLimitCutsAfterAgentTurn) {
    auto task = os_task();
    task.max_turns = 3;
    auto agent = counting_agent(100);
    auto env = os_environment(task);
    auto const out = self_role_play(os_prompt(), task, user_turn("q"), agent, env);
    EXPECT_TRUE(out.hit_turn_limit);
    EXPECT_EQ(out.conversation.count(Role::assistant), 3u);
    EXPECT_EQ(out.conversation.back().role, Role::assistant);
}

TEST(RolePlay, AgentEmittingTokenIsAbnormal) {
    auto const task = os_task();
    ScriptedBackend agent("a", {std::string("Act: bash\n```bash\nls\n```"), std::string("<<<DONE>>>")});
    auto env = os_environment(task);
    auto const out = self_role_play(os_prompt(), task, user_turn("q"), agent, env);
    EXPECT_TRUE(out.abnormal_termination);
    EXPECT_EQ(out.conversation.back().role, Role::assistant);
    EXPECT_TRUE(is_valid(out.conversation));
}

TEST(RolePlay, FailureCarriesPartialConversation) {
    auto const task = os_task();
    ScriptedBackend agent("a", {std::string("Act: bash\n```bash\nls\n```")});
    auto env = os_environment(task);
    try {
        (void)self_role_play(os_prompt(), task, user_turn("q"), agent, env);
        FAIL();
    } catch (RolePlayError const& e) {
        EXPECT_EQ(e.partial().size(), 3u);
    }
}

TEST(RolePlay, PropertyNeverExceedsMaxTurnsAndIsDeterministic) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 60; ++trial) {
        auto task = os_task();
        task.max_turns = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
        auto const commands = std::uniform_int_distribution<std::size_t>(0, 9)(rng);
        auto run = [&] {
            auto agent = counting_agent(commands);
            auto env = os_environment(task);
            return self_role_play(os_prompt(), task, user_turn("q" + std::to_string(trial)), agent, env);
        };
        auto const a = run();
        auto const b = run();
        EXPECT_LE(a.conversation.count(Role::assistant), task.max_turns);
        EXPECT_EQ(json(a.conversation).dump(), json(b.conversation).dump());
        EXPECT_EQ(a.hit_turn_limit, commands + 1 > task.max_turns);
    }
}

TEST(Stages, StudentFailuresAreFlaggedNotDropped) {
    std::vector<SynthesisRecord> records(2);
    records[0].record_id = "r0";
    records[0].pseudo_input = user_turn("a");
    records[1].record_id = "r1";
    records[1].pseudo_input = user_turn("b");
    ScriptedBackend student("s", {std::string("fine")});
    collect_student_outputs(records, student);
    EXPECT_EQ(records[0].student_first_output->text, "fine");
    EXPECT_TRUE(records[1].flags.student_failed);
    EXPECT_FALSE(records[1].flags.error.empty());
}

TEST(Stages, ReasonsRequireStudentOutput) {
    auto r = record_with("r0", Conversation{{user_turn("q"), assistant_turn("Act: answer(1)")}});
    std::vector<SynthesisRecord> records{r};
    ScriptedBackend gen("g", {std::string("Because.")});
    EXPECT_THROW(generate_reasons(records, os_prompt(), gen), PreconditionError);
}

TEST(Stages, OverBudgetReasonRegeneratedOnce) {
    auto r = record_with("r0", Conversation{{user_turn("q"), assistant_turn("Act: answer(1)")}});
    r.student_first_output = assistant_turn("one");
    std::vector<SynthesisRecord> records{r};
    ScriptedBackend gen("g", {std::string("A. B. C. D."), std::string("Short. Enough.")});
    ReasonOptions opt;
    opt.sentence_budget = 3;
    generate_reasons(records, os_prompt(), gen, sampling::reason(), SynthesisTemplates::defaults(), opt);
    EXPECT_EQ(records[0].reason, "Short. Enough.");
    EXPECT_FALSE(records[0].flags.reason_over_budget);
    auto const request = gen.calls().at(0).back().text;
    EXPECT_NE(request.find("AS-IS:\none"), std::string::npos);
    EXPECT_NE(request.find("TO-BE:\nAct: answer(1)"), std::string::npos);
}

TEST(Stages, CountSentences) {
    EXPECT_EQ(count_sentences(""), 0u);
    EXPECT_EQ(count_sentences("One. Two! Three?"), 3u);
    EXPECT_EQ(count_sentences("Version 1.5 is out. Really"), 2u);
    EXPECT_EQ(count_sentences("Wait... what?!"), 2u);
}

TEST(Quality, MissingFinalActionRate) {
    std::vector<SynthesisRecord> records;
    for (int i = 0; i < 1000; ++i) {
        std::string const last = i < 52 ? "I am not sure what to do." : "Act: answer(" + std::to_string(i) + ")";
        records.push_back(record_with("r" + std::to_string(i), Conversation{{user_turn("q"), assistant_turn(last)}}));
    }
    auto const q = validate_corpus(records, os_task());
    EXPECT_EQ(q.n, 1000u);
    EXPECT_DOUBLE_EQ(q.missing_final_action_rate, 0.052);
    EXPECT_EQ(format_percent(q.missing_final_action_rate), "5.2%");
    EXPECT_DOUBLE_EQ(q.average_turns, 1.0);
    EXPECT_NE(quality_table(q, "os").find("5.2%"), std::string::npos);
}

TEST(Quality, RecordRoundTripsThroughJsonl) {
    test_support::TempDir dir;
    auto r = record_with("r0", Conversation{{user_turn("q"), assistant_turn("Act: answer(1)")}});
    r.student_first_output = assistant_turn("as is");
    r.reason = "Because.";
    r.flags.turn_count = 1;
    write_records(std::vector{r}, dir / "c.jsonl");
    auto const back = read_records<SynthesisRecord>(dir / "c.jsonl");
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(json(back[0]).dump(), json(r).dump());
}
