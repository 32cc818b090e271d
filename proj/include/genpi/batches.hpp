#pragma once

#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"
#include "genpi/synthesis.hpp"
#include "genpi/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstddef>
#include <map>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace genpi {

enum class LossKind { sft, pg, kld, prepend_sft };

[[nodiscard]] inline std::string_view to_string(LossKind k) noexcept {
    switch (k) {
    case LossKind::sft: return "sft";
    case LossKind::pg: return "pg";
    case LossKind::kld: return "kld";
    case LossKind::prepend_sft: return "prepend_sft";
    }
    return "sft";
}

/// Token ids plus a per-position loss mask. mask[i] means token i is a
/// prediction target (conditioned on tokens [0, i)).
struct TokenBatch {
    std::vector<int> token_ids;
    std::vector<bool> loss_mask;
    LossKind loss_kind = LossKind::sft;
    std::string record_id;
    std::string template_id;

    [[nodiscard]] std::size_t masked_count() const noexcept {
        return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true));
    }

    void validate() const {
        if (token_ids.size() != loss_mask.size()) throw PreconditionError("batch " + record_id + ": mask length mismatch");
        if (!loss_mask.empty() && loss_mask.front()) throw PreconditionError("batch " + record_id + ": first position masked in");
        if (masked_count() == 0) throw PreconditionError("batch " + record_id + ": no masked-in positions");
    }

    friend bool operator==(TokenBatch const&, TokenBatch const&) = default;
};

namespace detail {

/// Position of the first token past `limit`, reported as the turn it belongs to.
inline void check_length(ChatTokens const& chat, std::size_t limit, std::string const& record_id) {
    if (chat.ids.size() <= limit) return;
    int const turn = chat.turn_index[limit] >= 0 ? chat.turn_index[limit] : chat.turn_index[limit - 1];
    throw LengthError("record " + record_id + " overflows the context at turn " + std::to_string(turn), limit);
}

} // namespace detail

/// L_SFT batch: the teacher conversation without the prompt, loss on the
/// assistant turns (their text and end-of-turn tokens) only.
template <ChatTokenizer Tok>
[[nodiscard]] TokenBatch assemble_sft_batch(SynthesisRecord const& record, Tok const& tok, std::size_t max_len) {
    if (!record.has_conversation()) throw PreconditionError("record " + record.record_id + " has no teacher conversation");
    record.validate();
    auto const chat = render_chat(record.teacher_conversation, tok);
    detail::check_length(chat, max_len, record.record_id);
    TokenBatch b;
    b.token_ids = chat.ids;
    b.loss_mask.resize(chat.ids.size(), false);
    for (std::size_t i = 0; i < chat.ids.size(); ++i) {
        auto const turn = chat.turn_index[i];
        b.loss_mask[i] = turn >= 0 && chat.is_content[i] &&
                         record.teacher_conversation.turns[static_cast<std::size_t>(turn)].role == Role::assistant;
    }
    b.loss_kind = LossKind::sft;
    b.record_id = record.record_id;
    b.template_id = "chat";
    b.validate();
    return b;
}

/// With probability `prepend_probability` the prompt precedes the
/// conversation. Prompt tokens are never loss targets.
template <ChatTokenizer Tok, class Rng>
[[nodiscard]] TokenBatch assemble_prepend_batch(SynthesisRecord const& record, PromptSpec const& prompt,
                                                double prepend_probability, Rng& rng, Tok const& tok, std::size_t max_len) {
    if (!(prepend_probability >= 0.0 && prepend_probability <= 1.0)) {
        throw ConfigError("prepend probability must lie in [0, 1]");
    }
    std::bernoulli_distribution coin(prepend_probability);
    bool const prepend = coin(rng);
    if (!prepend) {
        auto b = assemble_sft_batch(record, tok, max_len);
        b.loss_kind = LossKind::prepend_sft;
        return b;
    }
    record.validate();
    auto const merged = render_for_generation(prompt.prompt, record.teacher_conversation);
    auto const chat = render_chat(merged, tok);
    detail::check_length(chat, max_len, record.record_id);
    auto const prompt_turns = static_cast<int>(prompt.prompt.size());
    TokenBatch b;
    b.token_ids = chat.ids;
    b.loss_mask.resize(chat.ids.size(), false);
    for (std::size_t i = 0; i < chat.ids.size(); ++i) {
        auto const turn = chat.turn_index[i];
        b.loss_mask[i] = turn >= prompt_turns && chat.is_content[i] &&
                         merged.turns[static_cast<std::size_t>(turn)].role == Role::assistant;
    }
    b.loss_kind = LossKind::prepend_sft;
    b.record_id = record.record_id;
    b.template_id = "chat+prompt";
    b.validate();
    return b;
}

/// Symbols of the prompt-generation sequence.
enum class PgSymbol { input, as_is, to_be, prompt, reason };

[[nodiscard]] inline std::string_view to_string(PgSymbol s) noexcept {
    switch (s) {
    case PgSymbol::input: return "x";
    case PgSymbol::as_is: return "y_s";
    case PgSymbol::to_be: return "y_t";
    case PgSymbol::prompt: return "p";
    case PgSymbol::reason: return "r";
    }
    return "x";
}

[[nodiscard]] inline PgSymbol pg_symbol_from_string(std::string_view s) {
    if (s == "x") return PgSymbol::input;
    if (s == "y_s") return PgSymbol::as_is;
    if (s == "y_t") return PgSymbol::to_be;
    if (s == "p") return PgSymbol::prompt;
    if (s == "r") return PgSymbol::reason;
    throw ConfigError("unknown PG symbol '" + std::string(s) + "'");
}

/// Natural-language scaffolding around the PG segments. Shipped as data.
struct PgScaffold {
    std::string instruction =
        "The assistant answered the INPUT without the application prompt (AS-IS). With the prompt it should "
        "answer as in TO-BE.";
    std::map<PgSymbol, std::string> labels{{PgSymbol::input, "INPUT:\n"},
                                           {PgSymbol::as_is, "AS-IS:\n"},
                                           {PgSymbol::to_be, "TO-BE:\n"},
                                           {PgSymbol::prompt, "PROMPT:\n"},
                                           {PgSymbol::reason, "REASON:\n"}};
    std::string separator = "\n\n";
};

/// Conditioning symbols come first (user turn), then the targets (assistant turn).
struct PgTemplate {
    std::string template_id;
    std::vector<PgSymbol> conditioning;
    std::vector<PgSymbol> targets;

    void validate() const {
        if (targets.empty()) throw ConfigError("PG template " + template_id + ": empty target set");
        std::set<PgSymbol> seen;
        for (auto s : conditioning) {
            if (!seen.insert(s).second) throw ConfigError("PG template " + template_id + ": repeated symbol");
        }
        for (auto s : targets) {
            if (s != PgSymbol::prompt && s != PgSymbol::reason) {
                throw ConfigError("PG template " + template_id + ": targets must be p and/or r");
            }
            if (!seen.insert(s).second) throw ConfigError("PG template " + template_id + ": repeated symbol");
        }
    }

    [[nodiscard]] bool uses(PgSymbol s) const {
        return std::find(conditioning.begin(), conditioning.end(), s) != conditioning.end() ||
               std::find(targets.begin(), targets.end(), s) != targets.end();
    }

    /// P(p, r | y_s, y_t, x): the full method.
    [[nodiscard]] static PgTemplate prompt_and_reason() {
        return {"p_r|x_y", {PgSymbol::as_is, PgSymbol::to_be, PgSymbol::input}, {PgSymbol::prompt, PgSymbol::reason}};
    }
    /// P(p | x, y): reason removed.
    [[nodiscard]] static PgTemplate prompt_only() {
        return {"p|x_y", {PgSymbol::as_is, PgSymbol::to_be, PgSymbol::input}, {PgSymbol::prompt}};
    }
    /// P(r | x, y): prompt removed.
    [[nodiscard]] static PgTemplate reason_only() {
        return {"r|x_y", {PgSymbol::as_is, PgSymbol::to_be, PgSymbol::input}, {PgSymbol::reason}};
    }
    /// P(r | p, x, y)
    [[nodiscard]] static PgTemplate reason_given_prompt() {
        return {"r|p_x_y", {PgSymbol::prompt, PgSymbol::as_is, PgSymbol::to_be, PgSymbol::input}, {PgSymbol::reason}};
    }
    /// P(p | x, y, r)
    [[nodiscard]] static PgTemplate prompt_given_reason() {
        return {"p|x_y_r", {PgSymbol::as_is, PgSymbol::to_be, PgSymbol::input, PgSymbol::reason}, {PgSymbol::prompt}};
    }

    [[nodiscard]] static std::vector<PgTemplate> ablations() {
        return {prompt_and_reason(), prompt_only(), reason_only(), reason_given_prompt(), prompt_given_reason()};
    }

    [[nodiscard]] static PgTemplate by_id(std::string_view id) {
        for (auto& t : ablations()) {
            if (t.template_id == id) return t;
        }
        throw LookupError("no PG template '" + std::string(id) + "'");
    }
};

/// Text of each PG symbol for a record.
[[nodiscard]] inline std::string pg_symbol_text(PgSymbol s, SynthesisRecord const& record, PromptSpec const& prompt) {
    switch (s) {
    case PgSymbol::input: return record.pseudo_input.text;
    case PgSymbol::as_is:
        if (!record.student_first_output) throw PreconditionError("record " + record.record_id + " has no student output");
        return record.student_first_output->text;
    case PgSymbol::to_be: return record.teacher_first_output().text;
    case PgSymbol::prompt: return flatten(prompt.prompt);
    case PgSymbol::reason: return record.reason;
    }
    return {};
}

/// L_PG batch. Loss covers exactly the text tokens of the target symbols;
/// labels, separators and markers are context.
template <ChatTokenizer Tok>
[[nodiscard]] TokenBatch assemble_pg_batch(SynthesisRecord const& record, PromptSpec const& prompt, PgTemplate const& tmpl,
                                           Tok const& tok, std::size_t max_len, PgScaffold const& scaffold = {}) {
    tmpl.validate();
    if (tmpl.uses(PgSymbol::reason) && trim(record.reason).empty()) {
        throw PreconditionError("record " + record.record_id + " has no reason but template " + tmpl.template_id + " uses r");
    }
    TokenBatch b;
    auto push = [&](std::vector<int> const& ids, bool masked) {
        b.token_ids.insert(b.token_ids.end(), ids.begin(), ids.end());
        b.loss_mask.insert(b.loss_mask.end(), ids.size(), masked);
    };
    auto segment = [&](PgSymbol s, bool target, bool first) {
        if (!first) push(tok.encode(scaffold.separator), false);
        push(tok.encode(scaffold.labels.at(s)), false);
        push(tok.encode(pg_symbol_text(s, record, prompt)), target);
    };
    push({tok.bos_id(), tok.role_id(Role::user)}, false);
    push(tok.encode(scaffold.instruction), false);
    for (auto s : tmpl.conditioning) segment(s, false, false);
    push({tok.end_id(), tok.role_id(Role::assistant)}, false);
    for (std::size_t i = 0; i < tmpl.targets.size(); ++i) segment(tmpl.targets[i], true, i == 0);
    push({tok.end_id()}, false);
    if (b.token_ids.size() > max_len) {
        throw LengthError("PG sequence for record " + record.record_id + " overflows the context", max_len);
    }
    b.loss_kind = LossKind::pg;
    b.record_id = record.record_id;
    b.template_id = tmpl.template_id;
    b.validate();
    return b;
}

/// Teacher and student views of one conversation for the KLD baseline. The
/// student sequence is a suffix-aligned copy of the teacher's: student
/// position i (i >= 1) is teacher position i + offset.
struct KldPair {
    std::vector<int> teacher_tokens;
    TokenBatch student;
    std::size_t offset = 0;
};

template <ChatTokenizer Tok>
[[nodiscard]] KldPair assemble_kld_pair(SynthesisRecord const& record, PromptSpec const& prompt, Tok const& tok,
                                        std::size_t max_len) {
    KldPair pair;
    pair.student = assemble_sft_batch(record, tok, max_len);
    pair.student.loss_kind = LossKind::kld;
    auto const chat = render_chat(render_for_generation(prompt.prompt, record.teacher_conversation), tok);
    detail::check_length(chat, max_len, record.record_id);
    pair.teacher_tokens = chat.ids;
    pair.offset = pair.teacher_tokens.size() - pair.student.token_ids.size();
    for (std::size_t i = 1; i < pair.student.token_ids.size(); ++i) {
        if (pair.teacher_tokens[i + pair.offset] != pair.student.token_ids[i]) {
            throw PreconditionError("record " + record.record_id + ": teacher and student sequences do not align");
        }
    }
    return pair;
}

inline void to_json(nlohmann::json& j, PgTemplate const& t) {
    std::vector<std::string> cond, targ;
    for (auto s : t.conditioning) cond.emplace_back(to_string(s));
    for (auto s : t.targets) targ.emplace_back(to_string(s));
    j = nlohmann::json{{"template_id", t.template_id}, {"conditioning", cond}, {"targets", targ}};
}

inline void from_json(nlohmann::json const& j, PgTemplate& t) {
    t.template_id = j.at("template_id").get<std::string>();
    t.conditioning.clear();
    t.targets.clear();
    for (auto const& s : j.at("conditioning")) t.conditioning.push_back(pg_symbol_from_string(s.get<std::string>()));
    for (auto const& s : j.at("targets")) t.targets.push_back(pg_symbol_from_string(s.get<std::string>()));
    t.validate();
}

inline void from_json(nlohmann::json const& j, PgScaffold& s) {
    s = PgScaffold{};
    s.instruction = j.value("instruction", s.instruction);
    s.separator = j.value("separator", s.separator);
    if (j.contains("labels")) {
        for (auto const& [k, v] : j.at("labels").items()) s.labels[pg_symbol_from_string(k)] = v.get<std::string>();
    }
}

} // namespace genpi
