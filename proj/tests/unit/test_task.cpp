#include "genpi/serialization.hpp"
#include "genpi/task.hpp"

#include <gtest/gtest.h>

using namespace genpi;

TEST(Task, BuiltinsValidate) {
    for (auto id : {"os", "wb", "ws"}) EXPECT_NO_THROW(builtin_task(id).validate()) << id;
    EXPECT_THROW((void)builtin_task("nope"), LookupError);
}

TEST(Task, OsBashBlock) {
    auto const a = parse_action("Think: look around.\nAct: bash\n```bash\nls -la /home\n```", os_task());
    EXPECT_EQ(a.action_name, "bash");
    ASSERT_TRUE(a.argument);
    EXPECT_EQ(*a.argument, "ls -la /home");
}

TEST(Task, OsAnswerIsFinal) {
    auto const a = parse_final_action("Think: I know it.\nAct: answer(42)", os_task());
    EXPECT_EQ(a.action_name, "answer");
    EXPECT_EQ(a.argument.value_or(""), "42");
    EXPECT_EQ(parse_final_action("Act: finish", os_task()).action_name, "finish");
}

TEST(Task, BashIsNotAFinalAction) {
    auto const text = "Act: bash\n```bash\necho hi\n```";
    EXPECT_EQ(parse_action(text, os_task()).action_name, "bash");
    EXPECT_TRUE(parse_final_action(text, os_task()).is_unknown());
}

TEST(Task, LastActionWins) {
    auto const a = parse_action("Act: bash\n```bash\nls\n```\nthen\nAct: answer(3)", os_task());
    EXPECT_EQ(a.action_name, "answer");
}

TEST(Task, UnparseableIsUnknownNeverThrows) {
    for (auto text : {"", "hello", "Act:", "Act: dance(1)", "```bash\nls\n```"}) {
        auto const a = parse_action(text, os_task());
        EXPECT_TRUE(a.is_unknown()) << text;
        EXPECT_EQ(a.raw_text, text);
    }
}

TEST(Task, WebBrowsingTriplet) {
    auto const a = parse_final_action("Answer: B.\nELEMENT: B\nACTION: TYPE\nVALUE: new york", wb_task());
    EXPECT_EQ(a.action_name, "type");
    EXPECT_EQ(a.element.value_or(""), "B");
    EXPECT_EQ(a.argument.value_or(""), "new york");
}

TEST(Task, WebShopActions) {
    EXPECT_EQ(parse_final_action("Action:\nsearch[red shoes size 9]", ws_task()).argument.value_or(""), "red shoes size 9");
    auto const click = parse_final_action("Thought: buy it\nAction: click[Buy Now]", ws_task());
    EXPECT_EQ(click.action_name, "click");
    EXPECT_EQ(click.argument.value_or(""), "Buy Now");
}

TEST(Task, EnvironmentPromptSubstitutesToken) {
    auto t = os_task();
    t.termination_token = "<END>";
    t.environment_system_prompt = "Say {termination_token} when done. Again: {termination_token}";
    EXPECT_EQ(t.environment_prompt(), "Say <END> when done. Again: <END>");
}

TEST(Task, ValidateRejectsBadConfigs) {
    auto t = os_task();
    t.max_turns = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = os_task();
    t.action_rules.push_back({"(unclosed", "x"});
    EXPECT_THROW(t.validate(), ConfigError);
    t = os_task();
    t.final_action_vocabulary.insert("teleport");
    EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Task, JsonOverridesBuiltin) {
    auto const t = json::parse(R"({"task_id":"os","max_turns":3,"termination_token":"<X>"})").get<TaskSpec>();
    EXPECT_EQ(t.max_turns, 3u);
    EXPECT_EQ(t.termination_token, "<X>");
    EXPECT_EQ(t.action_rules, os_task().action_rules);
    json j = t;
    auto const back = j.get<TaskSpec>();
    EXPECT_EQ(back.max_turns, 3u);
    EXPECT_EQ(back.action_rules, t.action_rules);
}
