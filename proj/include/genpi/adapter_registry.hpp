#pragma once

#include "genpi/errors.hpp"
#include "genpi/serialization.hpp"
#include "genpi/tiny_transformer.hpp"
#include "genpi/trainer.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace genpi {

/// Exclusive advisory lock on a file, released on destruction.
class FileLock {
public:
    explicit FileLock(std::filesystem::path const& path) {
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0 || ::flock(fd_, LOCK_EX) != 0) {
            if (fd_ >= 0) ::close(fd_);
            throw Error("cannot lock " + path.string());
        }
    }
    ~FileLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    FileLock(FileLock const&) = delete;
    FileLock& operator=(FileLock const&) = delete;

private:
    int fd_ = -1;
};

/// Per-prompt adapters stored as registry.json (prompt name -> manifest
/// path) in a directory. Re-registering a prompt replaces its entry.
class AdapterRegistry {
public:
    explicit AdapterRegistry(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    /// `manifest` is the manifest.json written by train().
    void register_adapter(std::string const& prompt_name, std::filesystem::path const& manifest) {
        FileLock lock(dir_ / ".lock");
        auto entries = read_unlocked();
        entries[prompt_name] = std::filesystem::absolute(manifest).string();
        write_text_file_atomic(dir_ / "registry.json", json(entries).dump(2));
    }

    [[nodiscard]] std::map<std::string, std::string> list() const {
        FileLock lock(dir_ / ".lock");
        return read_unlocked();
    }

    [[nodiscard]] AdapterArtifact lookup(std::string const& prompt_name) const {
        auto const entries = list();
        auto const it = entries.find(prompt_name);
        if (it == entries.end()) throw LookupError("no adapter registered for prompt '" + prompt_name + "'");
        return read_json_file(it->second).get<AdapterArtifact>();
    }

    /// Loads the prompt's adapter weights into `model`; the base is untouched.
    AdapterArtifact activate(std::string const& prompt_name, TinyTransformer& model) {
        auto art = lookup(prompt_name);
        if (art.rank != model.adapter_config().rank) {
            throw ConfigError("adapter for '" + prompt_name + "' has rank " + std::to_string(art.rank) +
                              ", model expects " + std::to_string(model.adapter_config().rank));
        }
        model.load_adapter(art.checkpoint_path);
        active_ = prompt_name;
        return art;
    }

    [[nodiscard]] std::optional<std::string> const& active() const noexcept { return active_; }

private:
    [[nodiscard]] std::map<std::string, std::string> read_unlocked() const {
        auto const path = dir_ / "registry.json";
        if (!std::filesystem::exists(path)) return {};
        return read_json_file(path).get<std::map<std::string, std::string>>();
    }

    std::filesystem::path dir_;
    std::optional<std::string> active_;
};

} // namespace genpi
