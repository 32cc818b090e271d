#include "genpi/records.hpp"
#include "genpi/serialization.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace genpi;

namespace {

std::vector<Conversation> corpus() {
    return {Conversation{{user_turn("a"), assistant_turn("b")}},
            Conversation{{system_turn("s"), user_turn("unicode: naïve café ✓"), assistant_turn("\"quoted\"\n")}}};
}

void write_lines(std::filesystem::path const& p, std::vector<std::string> const& lines) {
    std::ofstream out(p);
    for (auto const& l : lines) out << l << "\n";
}

} // namespace

TEST(Records, RoundTrip) {
    test_support::TempDir dir;
    auto const path = dir / "c.jsonl";
    write_records(corpus(), path);
    EXPECT_EQ(read_records<Conversation>(path), corpus());
}

TEST(Records, BlankLinesSkipped) {
    test_support::TempDir dir;
    auto const path = dir / "c.jsonl";
    write_lines(path, {"", encode_record_line(corpus()[0]), "   ", encode_record_line(corpus()[1])});
    EXPECT_EQ(read_records<Conversation>(path).size(), 2u);
}

TEST(Records, MalformedLineReportsLineNumber) {
    test_support::TempDir dir;
    auto const path = dir / "c.jsonl";
    write_lines(path, {encode_record_line(corpus()[0]), "{not json"});
    try {
        (void)read_records<Conversation>(path);
        FAIL();
    } catch (FormatError const& e) {
        EXPECT_EQ(e.line(), 2u);
    }
}

TEST(Records, MissingOrWrongVersionRejected) {
    auto const payload = json(corpus()[0]);
    EXPECT_THROW((void)decode_record_line<Conversation>(json{{"kind", "conversation"}, {"payload", payload}}.dump(), 1),
                 FormatError);
    EXPECT_THROW(
        (void)decode_record_line<Conversation>(json{{"version", 99}, {"kind", "conversation"}, {"payload", payload}}.dump(), 1),
        FormatError);
    EXPECT_THROW(
        (void)decode_record_line<Conversation>(json{{"version", 1}, {"kind", "other"}, {"payload", payload}}.dump(), 1),
        FormatError);
}

TEST(Records, AppenderWritesReadableLines) {
    test_support::TempDir dir;
    auto const path = dir / "a.jsonl";
    {
        RecordAppender app(path);
        for (auto const& c : corpus()) app.append(c);
    }
    EXPECT_EQ(read_records<Conversation>(path), corpus());
}

TEST(Records, MissingFileIsFormatError) {
    EXPECT_THROW((void)read_records<Conversation>("/nonexistent/x.jsonl"), Error);
}
