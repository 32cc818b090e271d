#include "genpi/backend.hpp"
#include "genpi/serialization.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace genpi;

namespace {

RetryPolicy no_sleep(int attempts = 5) {
    RetryPolicy r;
    r.max_attempts = attempts;
    r.sleep = [](std::chrono::milliseconds) {};
    return r;
}

Conversation ask(std::string text) { return Conversation{{user_turn(std::move(text))}}; }

} // namespace

TEST(Backend, ScriptedQueueInOrder) {
    ScriptedBackend b("s", {std::string("one"), std::string("two")});
    EXPECT_EQ(generate(b, ask("q"), {}).text, "one");
    EXPECT_EQ(generate(b, ask("q"), {}).text, "two");
    EXPECT_EQ(b.remaining(), 0u);
    EXPECT_THROW((void)generate(b, ask("q"), {}), GenerationError);
}

TEST(Backend, RulesTakePrecedence) {
    ScriptedBackend b("s", {std::string("queued")});
    b.add_rule({std::string("ping"), {}, std::nullopt, "pong"});
    EXPECT_EQ(generate(b, ask("ping"), {}).text, "pong");
    EXPECT_EQ(generate(b, ask("other"), {}).text, "queued");
}

TEST(Backend, TransportErrorsAreRetriedWithBackoff) {
    ScriptedBackend b;
    b.push_failure();
    b.push_failure();
    b.push("ok");
    std::vector<long> delays;
    auto policy = no_sleep();
    policy.sleep = [&](std::chrono::milliseconds d) { delays.push_back(static_cast<long>(d.count())); };
    EXPECT_EQ(generate(b, ask("q"), {}, policy).text, "ok");
    EXPECT_EQ(delays, (std::vector<long>{200, 400}));
}

TEST(Backend, RetriesAreBounded) {
    ScriptedBackend b;
    for (int i = 0; i < 5; ++i) b.push_failure();
    EXPECT_THROW((void)generate(b, ask("q"), {}, no_sleep(3)), TransportError);
    EXPECT_EQ(b.remaining(), 2u);
}

TEST(Backend, EmptyOutputIsGenerationError) {
    ScriptedBackend b("s", {std::string("  \n ")});
    EXPECT_THROW((void)generate(b, ask("q"), {}), GenerationError);
}

TEST(Backend, ContextMustEndWithUser) {
    ScriptedBackend b("s", {std::string("x")});
    EXPECT_THROW((void)generate(b, Conversation{{user_turn("q"), assistant_turn("a")}}, {}), PreconditionError);
}

TEST(Backend, StopSequencesTruncateAtEarliest) {
    EXPECT_EQ(apply_stop_sequences("abc STOP def END", {"END", "STOP"}), "abc ");
    EXPECT_EQ(apply_stop_sequences("abc", {"zzz"}), "abc");
    ScriptedBackend b("s", {std::string("answer\nObservation: junk")});
    SamplingParams p;
    p.stop_sequences = {"\nObservation:"};
    EXPECT_EQ(generate(b, ask("q"), p).text, "answer");
}

TEST(Backend, TeacherSeesPromptStudentDoesNot) {
    ScriptedBackend b("s", {std::string("t"), std::string("s")});
    auto const prompt = PromptSpec::from_text("os", "SYSTEM RULES");
    (void)teacher_generate(b, prompt, ask("q"), {});
    (void)student_generate(b, ask("q"), {});
    auto const calls = b.calls();
    ASSERT_EQ(calls.size(), 2u);
    EXPECT_TRUE(calls[0].has_system());
    EXPECT_EQ(calls[0].turns[0].text, "SYSTEM RULES");
    EXPECT_EQ(calls[1], ask("q"));
}

TEST(Backend, SamplingValidation) {
    SamplingParams p;
    p.temperature = -1;
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.top_p = 0;
    EXPECT_THROW(p.validate(), ConfigError);
    EXPECT_TRUE(sampling::conversation().greedy());
    EXPECT_FALSE(sampling::pseudo_input().greedy());
}

TEST(Backend, CapabilityRequired) {
    ScriptedBackend b;
    EXPECT_NO_THROW(require(b.handle(), Capability::generate, "test"));
    EXPECT_THROW(require(b.handle(), Capability::score_logits, "training"), CapabilityError);
}

TEST(Backend, LoadScriptedFromJson) {
    test_support::TempDir dir;
    write_text_file_atomic(dir / "s.json",
                           R"({"responses":["a","b"],"rules":[{"last":"hi","response":"hello"}]})");
    auto b = load_scripted_backend(dir / "s.json", "env");
    EXPECT_EQ(generate(*b, ask("hi"), {}).text, "hello");
    EXPECT_EQ(generate(*b, ask("x"), {}).text, "a");
}
