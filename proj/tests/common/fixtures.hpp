#pragma once

#include "genpi/synthesis.hpp"
#include "genpi/tokenizer.hpp"

#include <string>
#include <vector>

namespace genpi::test_support {

inline PromptSpec os_prompt() {
    PromptSpec p;
    p.name = "os";
    p.prompt = Conversation{{system_turn("You are an OS agent. Think, then act with Act: bash or Act: answer(...)."),
                             user_turn("How many files are in /etc?", Origin::prompt),
                             assistant_turn("Think: count them.\nAct: bash\n```bash\nls /etc | wc -l\n```", Origin::prompt),
                             user_turn("The output of the OS:\n220", Origin::prompt),
                             assistant_turn("Think: done.\nAct: answer(220)", Origin::prompt)}};
    return p;
}

/// Complete record with `exchanges` agent turns (the last one answers).
inline SynthesisRecord os_record(std::size_t i, std::size_t exchanges = 2) {
    SynthesisRecord r;
    r.record_id = "r" + std::to_string(i);
    r.pseudo_input = user_turn("How many lines are in file" + std::to_string(i) + ".txt?", Origin::pseudo_input);
    Conversation c{{r.pseudo_input}};
    for (std::size_t k = 0; k + 1 < exchanges; ++k) {
        c.turns.push_back(assistant_turn("Think: check.\nAct: bash\n```bash\nwc -l file" + std::to_string(i) + ".txt\n```"));
        c.turns.push_back(user_turn("The output of the OS:\n" + std::to_string(10 + i), Origin::environment));
    }
    c.turns.push_back(assistant_turn("Think: done.\nAct: answer(" + std::to_string(10 + i) + ")"));
    r.teacher_conversation = std::move(c);
    r.student_first_output = assistant_turn("There are probably " + std::to_string(i) + " lines.");
    r.reason = "The prompt requires Think and Act lines. The answer must use Act: answer.";
    r.flags.turn_count = exchanges;
    return r;
}

inline std::vector<SynthesisRecord> os_records(std::size_t n, std::size_t exchanges = 2) {
    std::vector<SynthesisRecord> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(os_record(i, exchanges));
    return out;
}

/// Tokenizer trained on the fixture corpus and prompt.
inline PieceTokenizer fixture_tokenizer(std::vector<SynthesisRecord> const& records, PromptSpec const& prompt,
                                        std::size_t max_pieces = 400) {
    std::vector<std::string> texts{flatten(prompt.prompt)};
    for (auto const& r : records) {
        texts.push_back(flatten(r.teacher_conversation));
        if (r.student_first_output) texts.push_back(r.student_first_output->text);
        texts.push_back(r.reason);
    }
    return PieceTokenizer::train(texts, max_pieces);
}

} // namespace genpi::test_support
