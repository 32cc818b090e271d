#pragma once

#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <concepts>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace genpi {

/// What batch assembly needs from a tokenizer.
template <class T>
concept ChatTokenizer = requires(T const& t, std::string_view text, Role role) {
    { t.encode(text) } -> std::convertible_to<std::vector<int>>;
    { t.bos_id() } -> std::convertible_to<int>;
    { t.end_id() } -> std::convertible_to<int>;
    { t.role_id(role) } -> std::convertible_to<int>;
    { t.vocab_size() } -> std::convertible_to<std::size_t>;
};

/// Lossless word-piece tokenizer with byte fallback.
///
/// Text is split into pieces (a word with its optional leading space, a
/// punctuation mark with its optional leading space, or a whitespace run).
/// Pieces seen often enough during training get their own id; everything
/// else is spelled as raw bytes, so decode(encode(s)) == s for any s.
class PieceTokenizer {
public:
    static constexpr int pad = 0;
    static constexpr int bos = 1;
    static constexpr int system_marker = 2;
    static constexpr int user_marker = 3;
    static constexpr int assistant_marker = 4;
    static constexpr int end_of_turn = 5;
    static constexpr int byte_base = 6;
    static constexpr int first_piece = byte_base + 256;

    PieceTokenizer() = default;

    /// Keeps the `max_pieces` most frequent pieces with count >= min_count
    /// (ties broken lexicographically, so training is deterministic).
    [[nodiscard]] static PieceTokenizer train(std::span<std::string const> texts, std::size_t max_pieces,
                                              std::size_t min_count = 2) {
        std::map<std::string, std::size_t> counts;
        for (auto const& text : texts) {
            for (auto piece : pretokenize(text)) {
                if (piece.size() > 1) ++counts[std::string(piece)];
            }
        }
        std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
        std::stable_sort(ranked.begin(), ranked.end(), [](auto const& a, auto const& b) { return a.second > b.second; });
        PieceTokenizer tok;
        for (auto const& [piece, count] : ranked) {
            if (tok.pieces_.size() >= max_pieces || count < min_count) break;
            tok.add_piece(piece);
        }
        return tok;
    }

    [[nodiscard]] static std::vector<std::string_view> pretokenize(std::string_view text) {
        auto const is_word = [](unsigned char c) { return std::isalnum(c) != 0 || c == '_' || c >= 0x80; };
        auto const is_space = [](unsigned char c) { return std::isspace(c) != 0; };
        std::vector<std::string_view> out;
        std::size_t i = 0;
        while (i < text.size()) {
            std::size_t const start = i;
            auto const c = static_cast<unsigned char>(text[i]);
            if (c == ' ' && i + 1 < text.size() && !is_space(static_cast<unsigned char>(text[i + 1]))) {
                ++i;  // leading space binds to the next word or mark
            }
            auto const d = static_cast<unsigned char>(text[i]);
            if (is_word(d)) {
                while (i < text.size() && is_word(static_cast<unsigned char>(text[i]))) ++i;
            } else if (is_space(d)) {
                while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
            } else {
                ++i;
            }
            out.push_back(text.substr(start, i - start));
        }
        return out;
    }

    [[nodiscard]] std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        ids.reserve(text.size() / 2 + 1);
        for (auto piece : pretokenize(text)) {
            if (auto it = index_.find(std::string(piece)); it != index_.end()) {
                ids.push_back(it->second);
            } else {
                for (unsigned char b : piece) ids.push_back(byte_base + b);
            }
        }
        return ids;
    }

    /// Special tokens are dropped; invalid UTF-8 becomes U+FFFD.
    [[nodiscard]] std::string decode(std::span<int const> ids) const {
        std::string bytes;
        for (int id : ids) {
            if (id >= byte_base && id < first_piece) {
                bytes.push_back(static_cast<char>(id - byte_base));
            } else if (id >= first_piece && static_cast<std::size_t>(id - first_piece) < pieces_.size()) {
                bytes += pieces_[static_cast<std::size_t>(id - first_piece)];
            }
        }
        return sanitize_utf8(bytes);
    }

    [[nodiscard]] int bos_id() const noexcept { return bos; }
    [[nodiscard]] int end_id() const noexcept { return end_of_turn; }
    [[nodiscard]] int role_id(Role role) const noexcept {
        switch (role) {
        case Role::system: return system_marker;
        case Role::user: return user_marker;
        case Role::assistant: return assistant_marker;
        }
        return user_marker;
    }
    [[nodiscard]] std::size_t vocab_size() const noexcept { return static_cast<std::size_t>(first_piece) + pieces_.size(); }
    [[nodiscard]] std::vector<std::string> const& pieces() const noexcept { return pieces_; }

    [[nodiscard]] nlohmann::json to_json() const { return nlohmann::json{{"kind", "piece"}, {"pieces", pieces_}}; }

    [[nodiscard]] static PieceTokenizer from_json(nlohmann::json const& j) {
        if (j.value("kind", std::string{}) != "piece") throw FormatError("not a piece tokenizer");
        PieceTokenizer tok;
        for (auto const& p : j.at("pieces")) tok.add_piece(p.get<std::string>());
        return tok;
    }

    [[nodiscard]] static std::string sanitize_utf8(std::string_view in) {
        std::string out;
        out.reserve(in.size());
        std::size_t i = 0;
        while (i < in.size()) {
            auto const c = static_cast<unsigned char>(in[i]);
            std::size_t len = 0;
            if (c < 0x80) len = 1;
            else if ((c >> 5) == 0x6) len = 2;
            else if ((c >> 4) == 0xE) len = 3;
            else if ((c >> 3) == 0x1E) len = 4;
            bool ok = len > 0 && i + len <= in.size();
            for (std::size_t k = 1; ok && k < len; ++k) {
                ok = (static_cast<unsigned char>(in[i + k]) >> 6) == 0x2;
            }
            if (ok) {
                out.append(in.substr(i, len));
                i += len;
            } else {
                out += "\xEF\xBF\xBD";
                ++i;
            }
        }
        return out;
    }

private:
    void add_piece(std::string piece) {
        if (index_.contains(piece)) return;
        index_.emplace(piece, first_piece + static_cast<int>(pieces_.size()));
        pieces_.push_back(std::move(piece));
    }

    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> index_;
};

static_assert(ChatTokenizer<PieceTokenizer>);

/// Token ids of a rendered chat with, per token, the turn it belongs to and
/// whether it is turn content (as opposed to a role marker).
struct ChatTokens {
    std::vector<int> ids;
    std::vector<int> turn_index;  ///< -1 for bos / generation marker
    std::vector<bool> is_content; ///< true for text and end-of-turn tokens of a turn
};

/// <bos> then, per turn, role marker + text + <end>. An assistant turn's
/// content includes its end-of-turn token: that is what stops generation.
template <ChatTokenizer Tok>
[[nodiscard]] ChatTokens render_chat(Conversation const& c, Tok const& tok, bool add_generation_marker = false) {
    ChatTokens out;
    auto push = [&](int id, int turn, bool content) {
        out.ids.push_back(id);
        out.turn_index.push_back(turn);
        out.is_content.push_back(content);
    };
    push(tok.bos_id(), -1, false);
    for (std::size_t i = 0; i < c.turns.size(); ++i) {
        auto const& t = c.turns[i];
        auto const turn = static_cast<int>(i);
        push(tok.role_id(t.role), turn, false);
        for (int id : tok.encode(t.text)) push(id, turn, true);
        push(tok.end_id(), turn, t.role == Role::assistant);
    }
    if (add_generation_marker) push(tok.role_id(Role::assistant), -1, false);
    return out;
}

} // namespace genpi
