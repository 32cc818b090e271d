#pragma once

#include "genpi/errors.hpp"
#include "genpi/serialization.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace genpi {

/// Schema version written to, and required from, every record line.
inline constexpr int record_schema_version = 1;

/// Specialize with `static constexpr std::string_view value` for each record type.
template <class T>
struct RecordKind;

template <>
struct RecordKind<Conversation> {
    static constexpr std::string_view value = "conversation";
};

template <class T>
[[nodiscard]] std::string encode_record_line(T const& record) {
    json line{{"version", record_schema_version}, {"kind", RecordKind<T>::value}, {"payload", record}};
    return line.dump(-1, ' ', false, json::error_handler_t::replace);
}

template <class T>
[[nodiscard]] T decode_record_line(std::string_view text, std::size_t line_no) {
    json j;
    try {
        j = json::parse(text);
    } catch (json::parse_error const& e) {
        throw FormatError(std::string("malformed record: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw FormatError("record is not an object", line_no);
    if (!j.contains("version")) throw FormatError("record missing \"version\"", line_no);
    if (!j.at("version").is_number_integer() || j.at("version").get<int>() != record_schema_version) {
        throw FormatError("record version mismatch: expected " + std::to_string(record_schema_version) + ", got " +
                              j.at("version").dump(),
                          line_no);
    }
    if (j.value("kind", std::string{}) != RecordKind<T>::value) {
        throw FormatError("expected record kind '" + std::string(RecordKind<T>::value) + "', got '" +
                              j.value("kind", std::string{}) + "'",
                          line_no);
    }
    if (!j.contains("payload")) throw FormatError("record missing \"payload\"", line_no);
    try {
        return j.at("payload").get<T>();
    } catch (json::exception const& e) {
        throw FormatError(std::string("bad payload: ") + e.what(), line_no);
    } catch (Error const& e) {
        throw FormatError(std::string("bad payload: ") + e.what(), line_no);
    }
}

/// Blank lines are skipped; line numbers in errors are 1-based.
template <class T>
[[nodiscard]] std::vector<T> read_records(std::filesystem::path const& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<T> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        out.push_back(decode_record_line<T>(line, line_no));
    }
    return out;
}

/// Replaces the file atomically.
template <class T>
void write_records(std::span<T const> records, std::filesystem::path const& path) {
    std::string content;
    for (auto const& r : records) {
        content += encode_record_line(r);
        content += '\n';
    }
    write_text_file_atomic(path, content);
}

template <class T>
void write_records(std::vector<T> const& records, std::filesystem::path const& path) {
    write_records(std::span<T const>(records), path);
}

/// Append-only record log; each record is written as one flushed line.
class RecordAppender {
public:
    explicit RecordAppender(std::filesystem::path path) : path_(std::move(path)) {
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        out_.open(path_, std::ios::binary | std::ios::app);
        if (!out_) throw FormatError("cannot open " + path_.string() + " for append");
    }

    template <class T>
    void append(T const& record) {
        auto const line = encode_record_line(record) + '\n';
        std::scoped_lock lock(mutex_);
        out_.write(line.data(), static_cast<std::streamsize>(line.size()));
        out_.flush();
        if (!out_) throw FormatError("append to " + path_.string() + " failed");
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
    std::mutex mutex_;
};

} // namespace genpi
