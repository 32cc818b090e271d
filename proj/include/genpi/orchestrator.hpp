#pragma once

#include "genpi/adapter_registry.hpp"
#include "genpi/backend.hpp"
#include "genpi/errors.hpp"
#include "genpi/evaluator.hpp"
#include "genpi/hashing.hpp"
#include "genpi/local_backend.hpp"
#include "genpi/profiler.hpp"
#include "genpi/records.hpp"
#include "genpi/remote_backend.hpp"
#include "genpi/serialization.hpp"
#include "genpi/synthesis.hpp"
#include "genpi/tokenizer.hpp"
#include "genpi/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace genpi {

inline constexpr std::string_view tool_version = "0.1.0";

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration

struct BackendSpec {
    std::string kind;  ///< "scripted" or "remote"
    fs::path path;     ///< scripted fixture
    std::optional<RemoteBackendConfig> remote;
};

[[nodiscard]] inline std::unique_ptr<Backend> make_backend(BackendSpec const& spec, std::string id) {
    if (spec.kind == "scripted") return load_scripted_backend(spec.path, std::move(id));
    if (spec.kind == "remote") {
        auto c = *spec.remote;
        c.backend_id = std::move(id);
        return std::make_unique<RemoteBackend>(std::move(c));
    }
    throw ConfigError("unknown backend kind '" + spec.kind + "'");
}

struct SynthesisSettings {
    std::size_t n_records = 0;
    std::optional<fs::path> templates_dir;
    std::optional<fs::path> demonstrations;  ///< JSON array of strings; default: the prompt's user turns
    std::size_t demonstrations_per_call = 5;
    std::size_t retry_budget = 100;
    std::size_t sentence_budget = 8;
    std::size_t workers = 1;
    SamplingParams pseudo_input = sampling::pseudo_input();
    SamplingParams conversation = sampling::conversation();
    SamplingParams reason = sampling::reason();
};

struct ModelSettings {
    TransformerConfig transformer;  ///< vocab_size comes from the tokenizer
    std::size_t tokenizer_pieces = 400;
    std::size_t tokenizer_min_count = 2;
};

struct EvaluationSettings {
    fs::path suite;
    SamplingParams sampling{0.0, 1.0, 64, {}, 0};
    std::size_t workers = 1;
    /// label -> adapter.bin; when set, evaluate does not require train and
    /// reads tokenizer.json and base.bin from model_dir.
    std::map<std::string, fs::path> adapters;
    std::optional<fs::path> model_dir;
};

struct ProfileSettings {
    fs::path trace;
    ModelCostConfig cost;
};

/// One declarative run. Relative paths resolve against the config file's
/// directory; output_dir resolves against the working directory.
struct RunConfig {
    std::string run_id;
    std::string prompt_name;
    fs::path prompt;
    TaskSpec task;
    BackendSpec generator, agent, student;
    SynthesisSettings synthesis;
    ModelSettings model;
    TrainConfig train;
    std::optional<fs::path> pg_scaffold;
    std::vector<TrainMode> modes;
    EvaluationSettings evaluation;
    std::optional<ProfileSettings> profile;
    std::uint64_t seed = 0;
    fs::path output_dir = "runs";
    /// Config as written plus overrides, and the content hash of every referenced file.
    nlohmann::json canonical;

    [[nodiscard]] fs::path run_dir() const { return output_dir / run_id; }
    [[nodiscard]] std::string hash() const { return sha256_hex(canonical.dump()); }
    [[nodiscard]] std::string adapter_name(TrainMode m) const { return prompt_name + "/" + std::string(to_string(m)); }
};

struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> output_dir;
    /// JSON pointer -> value, applied before parsing ("/train/epochs" = 3).
    std::vector<std::pair<std::string, nlohmann::json>> set;
};

namespace detail {

[[nodiscard]] inline fs::path require_file(fs::path const& base, std::string const& rel, std::string const& what,
                                           std::map<std::string, std::string>& hashes) {
    fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : base / rel;
    if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
    if (fs::is_regular_file(p)) hashes[what] = sha256_hex(read_text_file(p));
    return p.lexically_normal();
}

[[nodiscard]] inline BackendSpec parse_backend(nlohmann::json const& j, fs::path const& base, std::string const& role,
                                               std::map<std::string, std::string>& hashes) {
    BackendSpec b;
    b.kind = j.at("kind").get<std::string>();
    if (b.kind == "scripted") {
        b.path = require_file(base, j.at("path").get<std::string>(), role + " backend fixture", hashes);
    } else if (b.kind == "remote") {
        b.remote = j.get<RemoteBackendConfig>();
    } else {
        throw ConfigError(role + " backend: unknown kind '" + b.kind + "'");
    }
    return b;
}

} // namespace detail

[[nodiscard]] inline RunConfig parse_run_config(nlohmann::json j, fs::path const& base_dir, ConfigOverrides const& o = {}) {
    for (auto const& [pointer, value] : o.set) {
        try {
            j[nlohmann::json::json_pointer(pointer)] = value;
        } catch (nlohmann::json::exception const& e) {
            throw ConfigError("cannot apply override " + pointer + ": " + e.what());
        }
    }
    if (o.seed) j["seed"] = *o.seed;
    if (o.output_dir) j["output_dir"] = o.output_dir->string();

    RunConfig c;
    std::map<std::string, std::string> hashes;
    try {
        c.run_id = j.at("run_id").get<std::string>();
        if (c.run_id.empty() || c.run_id.find('/') != std::string::npos) throw ConfigError("run_id must be a plain name");
        c.prompt_name = j.at("prompt_name").get<std::string>();
        c.prompt = detail::require_file(base_dir, j.at("prompt").get<std::string>(), "prompt", hashes);
        c.seed = j.at("seed").get<std::uint64_t>();
        c.output_dir = j.value("output_dir", std::string("runs"));

        auto const& task = j.at("task");
        if (task.is_object()) {
            c.task = task.get<TaskSpec>();
        } else if (auto const name = task.get<std::string>(); name == "os" || name == "wb" || name == "ws") {
            c.task = builtin_task(name);
        } else {
            c.task = read_json_file(detail::require_file(base_dir, name, "task", hashes)).get<TaskSpec>();
        }

        auto const& backends = j.at("backends");
        c.generator = detail::parse_backend(backends.at("generator"), base_dir, "generator", hashes);
        c.agent = detail::parse_backend(backends.at("agent"), base_dir, "agent", hashes);
        c.student = detail::parse_backend(backends.at("student"), base_dir, "student", hashes);

        auto const& s = j.at("synthesis");
        c.synthesis.n_records = s.at("n_records").get<std::size_t>();
        if (c.synthesis.n_records == 0) throw ConfigError("synthesis.n_records must be positive");
        if (s.contains("templates")) {
            c.synthesis.templates_dir = detail::require_file(base_dir, s.at("templates").get<std::string>(), "templates", hashes);
            for (auto const& entry : fs::directory_iterator(*c.synthesis.templates_dir)) {
                if (entry.is_regular_file()) hashes["templates/" + entry.path().filename().string()] = sha256_hex(read_text_file(entry.path()));
            }
        }
        if (s.contains("demonstrations")) {
            c.synthesis.demonstrations =
                detail::require_file(base_dir, s.at("demonstrations").get<std::string>(), "demonstrations", hashes);
        }
        c.synthesis.demonstrations_per_call = s.value("demonstrations_per_call", c.synthesis.demonstrations_per_call);
        c.synthesis.retry_budget = s.value("retry_budget", c.synthesis.retry_budget);
        c.synthesis.sentence_budget = s.value("sentence_budget", c.synthesis.sentence_budget);
        c.synthesis.workers = s.value("workers", c.synthesis.workers);
        if (s.contains("pseudo_input_sampling")) c.synthesis.pseudo_input = s.at("pseudo_input_sampling").get<SamplingParams>();
        if (s.contains("conversation_sampling")) c.synthesis.conversation = s.at("conversation_sampling").get<SamplingParams>();
        if (s.contains("reason_sampling")) c.synthesis.reason = s.at("reason_sampling").get<SamplingParams>();
        c.synthesis.pseudo_input.seed = c.seed;
        c.synthesis.conversation.seed = c.seed;
        c.synthesis.reason.seed = c.seed;

        auto const& m = j.at("model");
        auto& t = c.model.transformer;
        t.d_model = m.value("d_model", t.d_model);
        t.n_layers = m.value("n_layers", t.n_layers);
        t.n_heads = m.value("n_heads", t.n_heads);
        t.d_ff = m.value("d_ff", t.d_ff);
        t.max_seq_len = m.value("max_seq_len", t.max_seq_len);
        t.init_std = m.value("init_std", t.init_std);
        t.head_init_std = m.value("head_init_std", t.head_init_std);
        t.seed = m.value("seed", t.seed);
        c.model.tokenizer_pieces = m.value("tokenizer_pieces", c.model.tokenizer_pieces);
        c.model.tokenizer_min_count = m.value("tokenizer_min_count", c.model.tokenizer_min_count);

        auto train = j.at("train");
        if (train.contains("pg_scaffold")) {
            c.pg_scaffold = detail::require_file(base_dir, train.at("pg_scaffold").get<std::string>(), "pg_scaffold", hashes);
            train.erase("pg_scaffold");
        }
        train["seed"] = c.seed;
        c.train = train.get<TrainConfig>();
        for (auto const& name : j.at("modes")) {
            auto const mode = train_mode_from_string(name.get<std::string>());
            TrainConfig probe = c.train;
            probe.mode = mode;
            probe.validate();
            c.modes.push_back(mode);
        }

        if (j.contains("evaluation")) {
            auto const& e = j.at("evaluation");
            c.evaluation.suite = detail::require_file(base_dir, e.at("suite").get<std::string>(), "evaluation suite", hashes);
            if (e.contains("sampling")) c.evaluation.sampling = e.at("sampling").get<SamplingParams>();
            c.evaluation.workers = e.value("workers", c.evaluation.workers);
            auto const adapters = e.value("adapters", nlohmann::json::object());
            for (auto const& [label, path] : adapters.items()) {
                c.evaluation.adapters[label] =
                    detail::require_file(base_dir, path.get<std::string>(), "adapter " + label, hashes);
            }
            if (e.contains("model_dir")) {
                c.evaluation.model_dir = detail::require_file(base_dir, e.at("model_dir").get<std::string>(), "model_dir", hashes);
                for (char const* f : {"tokenizer.json", "base.bin"}) {
                    (void)detail::require_file(*c.evaluation.model_dir, f, std::string("model_dir/") + f, hashes);
                }
            }
            if (!c.evaluation.adapters.empty() && !c.evaluation.model_dir) {
                throw ConfigError("evaluation.adapters requires evaluation.model_dir (tokenizer.json and base.bin)");
            }
        }
        if (j.contains("profile")) {
            auto const& p = j.at("profile");
            ProfileSettings ps;
            ps.trace = detail::require_file(base_dir, p.at("trace").get<std::string>(), "profile trace", hashes);
            auto const cost_path = detail::require_file(base_dir, p.at("cost_model").get<std::string>(), "cost model", hashes);
            ps.cost = read_json_file(cost_path).get<ModelCostConfig>();
            c.profile = std::move(ps);
        }
    } catch (nlohmann::json::exception const& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    c.canonical = nlohmann::json{{"config", j}, {"files", hashes}};
    return c;
}

[[nodiscard]] inline RunConfig load_run_config(fs::path const& file, ConfigOverrides const& o = {}) {
    if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
    return parse_run_config(read_json_file(file), fs::absolute(file).parent_path(), o);
}

// ---------------------------------------------------------------------------
// Run manifest

/// Append-only event log at runs/<run_id>/manifest.jsonl. Events are "run"
/// (config hash in force) and "stage" (a completed stage with input and
/// output content hashes, paths relative to the run directory).
class RunManifest {
public:
    struct StageEntry {
        std::string stage;
        std::string config_hash;
        std::map<std::string, std::string> inputs;
        std::map<std::string, std::string> outputs;
    };

    /// Opens or creates the manifest. A different config hash is refused
    /// unless `force`, in which case the new hash is appended.
    RunManifest(fs::path run_dir, std::string config_hash, bool force) : dir_(std::move(run_dir)), hash_(std::move(config_hash)) {
        fs::create_directories(dir_);
        FileLock lock(dir_ / ".manifest.lock");
        load();
        if (!active_hash_) {
            append_unlocked({{"event", "run"}, {"config_hash", hash_}, {"tool_version", tool_version}});
        } else if (*active_hash_ != hash_) {
            if (!force) {
                throw PreconditionError("run directory " + dir_.string() + " belongs to config " + *active_hash_ +
                                        " but the current config hashes to " + hash_ + "; pass --force to continue");
            }
            append_unlocked({{"event", "run"}, {"config_hash", hash_}, {"tool_version", tool_version}, {"forced", true}});
        }
    }

    [[nodiscard]] fs::path const& dir() const noexcept { return dir_; }
    [[nodiscard]] std::string const& config_hash() const noexcept { return hash_; }

    /// Latest completion of `stage` under the current config hash.
    [[nodiscard]] std::optional<StageEntry> completed(std::string const& stage) const {
        for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
            if (it->stage == stage) return it->config_hash == hash_ ? std::optional(*it) : std::nullopt;
        }
        return std::nullopt;
    }

    /// True when every recorded output (and input, if `check_inputs`) still matches its hash.
    [[nodiscard]] bool intact(StageEntry const& e, bool check_inputs = true) const {
        auto matches = [&](std::map<std::string, std::string> const& files) {
            for (auto const& [rel, h] : files) {
                auto const p = resolve(rel);
                if (!fs::exists(p) || sha256_hex(read_text_file(p)) != h) return false;
            }
            return true;
        };
        return matches(e.outputs) && (!check_inputs || matches(e.inputs));
    }

    void record(StageEntry const& e) {
        FileLock lock(dir_ / ".manifest.lock");
        append_unlocked({{"event", "stage"},
                         {"stage", e.stage},
                         {"config_hash", e.config_hash},
                         {"inputs", e.inputs},
                         {"outputs", e.outputs},
                         {"tool_version", tool_version}});
        stages_.push_back(e);
    }

    /// Hash map for files; paths inside the run directory are stored relative to it.
    [[nodiscard]] std::map<std::string, std::string> hash_files(std::vector<fs::path> const& files) const {
        std::map<std::string, std::string> out;
        for (auto const& f : files) {
            if (!fs::exists(f)) throw PreconditionError("missing artifact " + f.string());
            out[relative_key(f)] = sha256_hex(read_text_file(f));
        }
        return out;
    }

    [[nodiscard]] std::vector<StageEntry> const& stages() const noexcept { return stages_; }

private:
    [[nodiscard]] std::string relative_key(fs::path const& p) const {
        auto const rel = fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(dir_).lexically_normal());
        if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
        return fs::absolute(p).lexically_normal().string();
    }

    [[nodiscard]] fs::path resolve(std::string const& key) const {
        fs::path p(key);
        return p.is_absolute() ? p : dir_ / p;
    }

    void load() {
        auto const path = dir_ / "manifest.jsonl";
        if (!fs::exists(path)) return;
        std::ifstream in(path);
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (trim(line).empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (nlohmann::json::parse_error const& e) {
                throw FormatError("manifest: " + std::string(e.what()), n);
            }
            if (j.at("event") == "run") {
                active_hash_ = j.at("config_hash").get<std::string>();
            } else if (j.at("event") == "stage") {
                stages_.push_back({j.at("stage").get<std::string>(), j.at("config_hash").get<std::string>(),
                                   j.at("inputs").get<std::map<std::string, std::string>>(),
                                   j.at("outputs").get<std::map<std::string, std::string>>()});
            }
        }
    }

    void append_unlocked(nlohmann::json const& event) {
        std::ofstream out(dir_ / "manifest.jsonl", std::ios::app | std::ios::binary);
        out << event.dump() << '\n';
        if (!out.flush()) throw FormatError("cannot append to manifest in " + dir_.string());
        if (event.at("event") == "run") active_hash_ = event.at("config_hash").get<std::string>();
    }

    fs::path dir_;
    std::string hash_;
    std::optional<std::string> active_hash_;
    std::vector<StageEntry> stages_;
};

// ---------------------------------------------------------------------------
// Stages

struct StageResult {
    std::string stage;
    bool skipped = false;  ///< already complete and intact
    std::vector<fs::path> outputs;
    std::string summary;
};

struct RunOptions {
    bool force = false;
};

/// Layout: runs/<run_id>/{config.json, manifest.jsonl, corpus/, adapters/, eval/, profile/, report/}.
class Pipeline {
public:
    Pipeline(RunConfig config, RunOptions options = {})
        : cfg_(std::move(config)), opt_(options), manifest_(cfg_.run_dir(), cfg_.hash(), opt_.force) {
        auto const config_path = dir() / "config.json";
        auto const text = dump_json(cfg_.canonical);
        if (!fs::exists(config_path) || read_text_file(config_path) != text) write_text_file_atomic(config_path, text);
    }

    [[nodiscard]] RunConfig const& config() const noexcept { return cfg_; }
    [[nodiscard]] RunManifest const& manifest() const noexcept { return manifest_; }
    [[nodiscard]] fs::path dir() const { return cfg_.run_dir(); }

    [[nodiscard]] fs::path corpus_path() const { return dir() / "corpus" / "records.jsonl"; }
    [[nodiscard]] fs::path validated_path() const { return dir() / "corpus" / "validated.jsonl"; }
    [[nodiscard]] fs::path adapters_dir() const { return dir() / "adapters"; }
    [[nodiscard]] fs::path metrics_path() const { return dir() / "eval" / "metrics.json"; }
    [[nodiscard]] fs::path profile_path() const { return dir() / "profile" / "comparison.json"; }
    [[nodiscard]] fs::path report_path() const { return dir() / "report" / "report.md"; }

    StageResult synthesize() {
        return run_stage("synthesize", {}, {cfg_.prompt}, [&] { return do_synthesize(); });
    }
    StageResult validate() {
        return run_stage("validate", {"synthesize"}, {corpus_path()}, [&] { return do_validate(); });
    }
    StageResult train() {
        return run_stage("train", {"validate"}, {validated_path(), cfg_.prompt}, [&] { return do_train(); });
    }
    StageResult evaluate() {
        if (cfg_.evaluation.suite.empty()) throw ConfigError("config has no evaluation section");
        std::vector<std::string> requires_stages;
        std::vector<fs::path> inputs{cfg_.evaluation.suite};
        if (!cfg_.evaluation.adapters.empty()) {
            inputs.push_back(*cfg_.evaluation.model_dir / "base.bin");
            for (auto const& [label, path] : cfg_.evaluation.adapters) inputs.push_back(path);
        } else {
            requires_stages.push_back("train");
            inputs.push_back(adapters_dir() / "base.bin");
            for (auto m : cfg_.modes) inputs.push_back(adapters_dir() / to_string(m) / "adapter.bin");
        }
        return run_stage("evaluate", requires_stages, inputs, [&] { return do_evaluate(); });
    }
    StageResult profile() {
        if (!cfg_.profile) throw ConfigError("config has no profile section");
        return run_stage("profile", {}, {cfg_.profile->trace}, [&] { return do_profile(); });
    }
    StageResult report() {
        std::vector<fs::path> inputs;
        for (auto const& p : {dir() / "corpus" / "quality.json", adapters_dir() / "summary.json", metrics_path(), profile_path()}) {
            if (fs::exists(p)) inputs.push_back(p);
        }
        return run_stage("report", {}, inputs, [&] { return do_report(); });
    }

    /// Every stage in order; profile and report run when configured.
    std::vector<StageResult> run_all() {
        std::vector<StageResult> out{synthesize(), validate(), train()};
        if (!cfg_.evaluation.suite.empty()) out.push_back(evaluate());
        if (cfg_.profile) out.push_back(profile());
        out.push_back(report());
        return out;
    }

private:
    using Body = std::function<std::pair<std::vector<fs::path>, std::string>()>;

    StageResult run_stage(std::string const& name, std::vector<std::string> const& requires_stages,
                          std::vector<fs::path> const& inputs, Body const& body) {
        for (auto const& req : requires_stages) {
            auto const done = manifest_.completed(req);
            if (!done || !manifest_.intact(*done, false)) {
                throw PreconditionError("stage '" + name + "' requires stage '" + req + "' of run " + cfg_.run_id +
                                        " (missing or stale artifacts under " + dir().string() + "); run `genpi " + req +
                                        "` first");
            }
        }
        if (auto const done = manifest_.completed(name); done && !opt_.force && manifest_.intact(*done) &&
                                                         done->inputs == manifest_.hash_files(inputs)) {
            StageResult r{name, true, {}, "up to date"};
            for (auto const& [rel, h] : done->outputs) r.outputs.push_back(dir() / rel);
            return r;
        }
        auto const input_hashes = manifest_.hash_files(inputs);
        auto [outputs, summary] = body();
        manifest_.record({name, manifest_.config_hash(), input_hashes, manifest_.hash_files(outputs)});
        return {name, false, std::move(outputs), std::move(summary)};
    }

    [[nodiscard]] PgScaffold scaffold() const {
        return cfg_.pg_scaffold ? read_json_file(*cfg_.pg_scaffold).get<PgScaffold>() : PgScaffold{};
    }

    std::pair<std::vector<fs::path>, std::string> do_synthesize() {
        auto const prompt = load_prompt(cfg_.prompt);
        auto const templates =
            cfg_.synthesis.templates_dir ? SynthesisTemplates::load(*cfg_.synthesis.templates_dir) : SynthesisTemplates::defaults();
        auto generator = make_backend(cfg_.generator, "generator");
        auto agent = make_backend(cfg_.agent, "agent");
        auto student = make_backend(cfg_.student, "student");

        std::vector<Turn> demos;
        if (cfg_.synthesis.demonstrations) {
            for (auto const& d : read_json_file(*cfg_.synthesis.demonstrations)) demos.push_back(user_turn(d.get<std::string>()));
        } else {
            for (auto const& t : prompt.prompt.turns) {
                if (t.role == Role::user) demos.push_back(user_turn(t.text));
            }
        }
        PseudoInputOptions pio{cfg_.synthesis.demonstrations_per_call, cfg_.synthesis.retry_budget, cfg_.seed};
        auto const inputs = generate_pseudo_inputs(prompt, demos, cfg_.synthesis.n_records, *generator,
                                                   cfg_.synthesis.pseudo_input, templates, pio);
        std::vector<SynthesisRecord> records;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            char id[32];
            std::snprintf(id, sizeof id, "-%05zu", i);
            records.push_back({cfg_.prompt_name + id, inputs[i], {}, std::nullopt, {}, {}});
        }
        StageOptions so{cfg_.synthesis.workers};
        run_role_play(records, prompt, cfg_.task, *agent, *agent, cfg_.synthesis.conversation, so);
        collect_student_outputs(records, *student, cfg_.synthesis.conversation, so);

        // Records whose student failed keep their flag and get no reason.
        std::vector<SynthesisRecord> reasonable;
        std::vector<std::size_t> where;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (records[i].student_first_output && !trim(records[i].student_first_output->text).empty()) {
                reasonable.push_back(records[i]);
                where.push_back(i);
            }
        }
        generate_reasons(reasonable, prompt, *generator, cfg_.synthesis.reason, templates,
                         {cfg_.synthesis.sentence_budget, cfg_.synthesis.workers});
        for (std::size_t k = 0; k < where.size(); ++k) records[where[k]] = std::move(reasonable[k]);

        write_records(records, corpus_path());
        return {{corpus_path()}, std::to_string(records.size()) + " records"};
    }

    std::pair<std::vector<fs::path>, std::string> do_validate() {
        auto records = read_records<SynthesisRecord>(corpus_path());
        auto const q = validate_corpus(records, cfg_.task);
        std::vector<SynthesisRecord> usable;
        nlohmann::json excluded = nlohmann::json::array();
        for (std::size_t i = 0; i < records.size(); ++i) {
            records[i].flags = q.records[i].flags;
            auto const& r = records[i];
            if (r.has_conversation() && r.student_first_output && !r.reason.empty()) {
                usable.push_back(r);
            } else {
                excluded.push_back(r.record_id);
            }
        }
        auto const qpath = dir() / "corpus" / "quality.json";
        auto const mdpath = dir() / "corpus" / "quality.md";
        nlohmann::json qj = q;
        qj["task_id"] = cfg_.task.task_id;
        qj["excluded_from_training"] = excluded;
        write_text_file_atomic(qpath, dump_json(qj));
        write_text_file_atomic(mdpath, quality_table(q, cfg_.task.task_id));
        write_records(usable, validated_path());
        if (usable.empty()) throw PreconditionError("no record of " + corpus_path().string() + " is usable for training");
        return {{qpath, mdpath, validated_path()},
                std::to_string(usable.size()) + "/" + std::to_string(records.size()) + " records usable; missing final action " +
                    format_percent(q.missing_final_action_rate)};
    }

    [[nodiscard]] TinyTransformer make_model(PieceTokenizer const& tok) const {
        TransformerConfig t = cfg_.model.transformer;
        t.vocab_size = tok.vocab_size();
        return TinyTransformer(t, AdapterConfig{cfg_.train.adapter_rank, cfg_.train.adapter_alpha, cfg_.seed});
    }

    std::pair<std::vector<fs::path>, std::string> do_train() {
        auto const records = read_records<SynthesisRecord>(validated_path());
        auto const prompt = load_prompt(cfg_.prompt);
        auto const sc = scaffold();

        std::vector<std::string> texts{flatten(prompt.prompt), sc.instruction};
        for (auto const& [sym, label] : sc.labels) texts.push_back(label);
        for (auto const& r : records) {
            texts.push_back(flatten(r.teacher_conversation));
            if (r.student_first_output) texts.push_back(r.student_first_output->text);
            texts.push_back(r.reason);
        }
        auto const tok = PieceTokenizer::train(texts, cfg_.model.tokenizer_pieces, cfg_.model.tokenizer_min_count);
        auto const tok_path = adapters_dir() / "tokenizer.json";
        write_text_file_atomic(tok_path, tok.to_json().dump());
        auto model = make_model(tok);
        auto const base_path = adapters_dir() / "base.bin";
        model.save_base(base_path);

        std::vector<fs::path> outputs{tok_path, base_path};
        AdapterRegistry registry(adapters_dir());
        nlohmann::json summary = nlohmann::json::object();
        PromptSpec named = prompt;
        named.name = cfg_.prompt_name;
        for (auto mode : cfg_.modes) {
            TrainConfig tc = cfg_.train;
            tc.mode = mode;
            auto const out = adapters_dir() / to_string(mode);
            auto const art = genpi::train(records, named, tc, model, tok, TrainOptions{out, sc});
            registry.register_adapter(cfg_.adapter_name(mode), out / "manifest.json");
            summary[std::string(to_string(mode))] = nlohmann::json{{"epoch_loss", art.metrics.epoch_loss},
                                                     {"trainable_param_count", art.trainable_param_count},
                                                     {"base_param_count", art.base_param_count},
                                                     {"config_hash", art.config_hash}};
            outputs.push_back(out / "adapter.bin");
            outputs.push_back(out / "metrics.jsonl");
        }
        auto const summary_path = adapters_dir() / "summary.json";
        write_text_file_atomic(summary_path, dump_json(summary));
        outputs.push_back(summary_path);
        return {outputs, std::to_string(cfg_.modes.size()) + " adapters on " + std::to_string(records.size()) + " records"};
    }

    std::pair<std::vector<fs::path>, std::string> do_evaluate() {
        auto const suite = load_eval_suite(cfg_.evaluation.suite);
        auto const prompt = load_prompt(cfg_.prompt);
        auto const model_dir = cfg_.evaluation.model_dir.value_or(adapters_dir());
        auto const tok = PieceTokenizer::from_json(read_json_file(model_dir / "tokenizer.json"));
        auto model = make_model(tok);
        model.load_base(model_dir / "base.bin");

        std::vector<fs::path> outputs;
        std::vector<MetricReport> reports;
        auto run = [&](std::string const& label, bool use_adapter, std::optional<PromptSpec> p,
                       std::optional<double> upper) {
            LocalModelBackend backend(label, model, tok, use_adapter);
            ModelView view{&backend, std::move(p), cfg_.evaluation.sampling};
            auto const results = run_suite(view, suite, cfg_.evaluation.workers);
            auto const path = dir() / "eval" / (label + ".jsonl");
            write_records(results, path);
            outputs.push_back(path);
            reports.push_back(aggregate(results, suite.task.task_id, upper, label));
            return reports.back().score;
        };
        // The prompted base model is the upper bound for normalization.
        double const upper = run("prompted", false, prompt, std::nullopt);
        run("no_prompt", false, std::nullopt, upper);
        if (!cfg_.evaluation.adapters.empty()) {
            for (auto const& [label, path] : cfg_.evaluation.adapters) {
                model.load_adapter(path);
                run(label, true, std::nullopt, upper);
            }
        } else {
            AdapterRegistry registry(adapters_dir());
            for (auto mode : cfg_.modes) {
                (void)registry.activate(cfg_.adapter_name(mode), model);
                run(std::string(to_string(mode)), true, std::nullopt, upper);
            }
        }
        write_text_file_atomic(metrics_path(), dump_json(nlohmann::json(reports)));
        outputs.push_back(metrics_path());
        return {outputs, std::to_string(reports.size()) + " systems on " + std::to_string(suite.episodes.size()) + " episodes"};
    }

    std::pair<std::vector<fs::path>, std::string> do_profile() {
        auto const trace = read_json_file(cfg_.profile->trace).get<TurnTrace>();
        auto const& cost = cfg_.profile->cost;
        nlohmann::json out{{"trace", trace.name}, {"prompt_tokens", trace.prompt_tokens}, {"turns", trace.turns.size()}};
        std::vector<fs::path> outputs;
        std::string summary;
        for (auto mode : {CacheMode::no_cache, CacheMode::kv_cache}) {
            auto const p = conversation_cost(cost, trace, mode, Variant::prompted);
            auto const i = conversation_cost(cost, trace, mode, Variant::internalized);
            auto const cmp = compare(p, i, "prompted", "internalized");
            auto const csv = dir() / "profile" / (std::string(to_string(mode)) + ".csv");
            write_text_file_atomic(csv, to_csv(cmp));
            outputs.push_back(csv);
            out[std::string(to_string(mode))] = {{"prompted", p}, {"internalized", i}, {"comparison", cmp}};
            summary += std::string(to_string(mode)) + " " + format_fixed(cmp.cumulative_flops_reduction_percent) + "% ";
        }
        write_text_file_atomic(profile_path(), dump_json(out));
        outputs.push_back(profile_path());
        return {outputs, "cumulative FLOP reduction: " + summary};
    }

    std::pair<std::vector<fs::path>, std::string> do_report() {
        std::ostringstream md;
        nlohmann::json doc{{"run_id", cfg_.run_id}, {"prompt_name", cfg_.prompt_name}, {"config_hash", cfg_.hash()}};
        md << "# Run " << cfg_.run_id << "\n\nPrompt `" << cfg_.prompt_name << "`, task `" << cfg_.task.task_id
           << "`, seed " << cfg_.seed << ".\n\n";

        md << "## Synthesis quality\n\n";
        if (auto const p = dir() / "corpus" / "quality.json"; fs::exists(p)) {
            auto const qj = read_json_file(p);
            md << quality_table(qj.get<QualityReport>(), cfg_.task.task_id) << "\n";
            doc["quality"] = qj;
        } else {
            md << "_validate has not run._\n\n";
        }

        md << "## Scores\n\n";
        if (fs::exists(metrics_path())) {
            auto const reports = read_json_file(metrics_path()).get<std::vector<MetricReport>>();
            md << metric_table(reports) << "\nNormalization divides by the prompted base model's score.\n\n";
            doc["metrics"] = reports;
        } else {
            md << "_evaluate has not run._\n\n";
        }

        md << "## Training\n\n";
        if (auto const p = adapters_dir() / "summary.json"; fs::exists(p)) {
            auto const s = read_json_file(p);
            md << "| Mode | Epoch losses | Trainable params |\n|---|---|---|\n";
            for (auto const& [mode, v] : s.items()) {
                std::string losses;
                for (auto const& l : v.at("epoch_loss")) losses += (losses.empty() ? "" : ", ") + format_fixed(l.get<double>(), 4);
                md << "| " << mode << " | " << losses << " | " << v.at("trainable_param_count").get<std::size_t>() << " |\n";
            }
            md << "\n";
            doc["training"] = s;
        } else {
            md << "_train has not run._\n\n";
        }

        md << "## Inference cost\n\n";
        if (fs::exists(profile_path())) {
            auto const pj = read_json_file(profile_path());
            md << "Trace `" << pj.at("trace").get<std::string>() << "`: prompt " << pj.at("prompt_tokens").get<std::uint64_t>()
               << " tokens, " << pj.at("turns").get<std::size_t>() << " turns.\n\n";
            md << "| Cache | Cumulative MAC reduction | Cumulative FLOP reduction |\n|---|---|---|\n";
            for (char const* mode : {"no_cache", "kv_cache"}) {
                auto const& c = pj.at(mode).at("comparison");
                md << "| " << mode << " | " << format_fixed(c.at("cumulative_macs_reduction_percent").get<double>()) << "% | "
                   << format_fixed(c.at("cumulative_flops_reduction_percent").get<double>()) << "% |\n";
            }
            md << "\nkv_cache totals exclude the one-off prompt caching cost.\n";
            doc["profile"] = pj;
        } else {
            md << "_profile has not run._\n";
        }

        auto const json_path = dir() / "report" / "report.json";
        write_text_file_atomic(report_path(), md.str());
        write_text_file_atomic(json_path, dump_json(doc));
        return {{report_path(), json_path}, report_path().string()};
    }

    RunConfig cfg_;
    RunOptions opt_;
    RunManifest manifest_;
};

} // namespace genpi
