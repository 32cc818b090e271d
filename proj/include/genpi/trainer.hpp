#pragma once

#include "genpi/batches.hpp"
#include "genpi/hashing.hpp"
#include "genpi/losses.hpp"
#include "genpi/parallel.hpp"
#include "genpi/serialization.hpp"
#include "genpi/tiny_transformer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace genpi {

/// seqkd trains on the same batches as sft_only; it is kept as a separate
/// name so run reports say which baseline they are.
enum class TrainMode { genpi, sft_only, seqkd, kld, seqkd_kld, prepend };

[[nodiscard]] inline std::string_view to_string(TrainMode m) noexcept {
    switch (m) {
    case TrainMode::genpi: return "genpi";
    case TrainMode::sft_only: return "sft_only";
    case TrainMode::seqkd: return "seqkd";
    case TrainMode::kld: return "kld";
    case TrainMode::seqkd_kld: return "seqkd_kld";
    case TrainMode::prepend: return "prepend";
    }
    return "genpi";
}

[[nodiscard]] inline TrainMode train_mode_from_string(std::string_view s) {
    for (auto m : {TrainMode::genpi, TrainMode::sft_only, TrainMode::seqkd, TrainMode::kld, TrainMode::seqkd_kld,
                   TrainMode::prepend}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown training mode '" + std::string(s) + "'");
}

struct TrainConfig {
    TrainMode mode = TrainMode::genpi;
    std::optional<double> lambda = 0.7;
    std::string pg_template = "p_r|x_y";
    std::optional<double> prepend_probability;
    std::size_t adapter_rank = 8;
    double adapter_alpha = 8.0;
    double learning_rate = 1e-3;
    std::size_t batch_size = 4;
    std::size_t epochs = 2;
    double warmup_fraction = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double max_grad_norm = 1.0;  ///< 0 disables clipping
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    void validate() const {
        if (mode == TrainMode::genpi && !lambda) throw ConfigError("mode genpi requires lambda");
        if (lambda && !(*lambda >= 0.0 && *lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
        if (mode == TrainMode::prepend && !prepend_probability) throw ConfigError("mode prepend requires prepend_probability");
        if (prepend_probability && !(*prepend_probability >= 0.0 && *prepend_probability <= 1.0)) {
            throw ConfigError("prepend_probability must lie in [0, 1]");
        }
        if (adapter_rank == 0) throw ConfigError("adapter_rank must be positive");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, TrainConfig const& c) {
    j = nlohmann::json{{"mode", to_string(c.mode)},
                       {"pg_template", c.pg_template},
                       {"adapter_rank", c.adapter_rank},
                       {"adapter_alpha", c.adapter_alpha},
                       {"learning_rate", c.learning_rate},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"warmup_fraction", c.warmup_fraction},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"epsilon", c.epsilon},
                       {"max_grad_norm", c.max_grad_norm},
                       {"seed", c.seed},
                       {"workers", c.workers}};
    j["lambda"] = c.lambda ? nlohmann::json(*c.lambda) : nlohmann::json(nullptr);
    j["prepend_probability"] = c.prepend_probability ? nlohmann::json(*c.prepend_probability) : nlohmann::json(nullptr);
}

inline void from_json(nlohmann::json const& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("mode")) c.mode = train_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("lambda")) {
        c.lambda = j.at("lambda").is_null() ? std::nullopt : std::optional<double>(j.at("lambda").get<double>());
    }
    if (j.contains("prepend_probability") && !j.at("prepend_probability").is_null()) {
        c.prepend_probability = j.at("prepend_probability").get<double>();
    }
    c.pg_template = j.value("pg_template", c.pg_template);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.adapter_alpha = j.value("adapter_alpha", c.adapter_alpha);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.validate();
}

struct TrainMetrics {
    std::vector<double> step_loss;
    std::vector<double> step_sft;  ///< NaN when the mode has no SFT term
    std::vector<double> step_pg;   ///< NaN when the mode has no PG term
    std::vector<double> learning_rate;
    std::vector<double> epoch_loss;
};

struct AdapterArtifact {
    std::string prompt_name;
    std::string mode;
    std::string pg_template;
    std::size_t rank = 0;
    double alpha = 0.0;
    std::size_t trainable_param_count = 0;
    std::size_t base_param_count = 0;
    std::filesystem::path checkpoint_path;
    std::uint64_t seed = 0;
    std::string config_hash;
    TrainMetrics metrics;
};

inline void to_json(nlohmann::json& j, AdapterArtifact const& a) {
    j = nlohmann::json{{"prompt_name", a.prompt_name},
                       {"mode", a.mode},
                       {"pg_template", a.pg_template},
                       {"rank", a.rank},
                       {"alpha", a.alpha},
                       {"trainable_param_count", a.trainable_param_count},
                       {"base_param_count", a.base_param_count},
                       {"checkpoint_path", a.checkpoint_path.string()},
                       {"seed", a.seed},
                       {"config_hash", a.config_hash},
                       {"epoch_loss", a.metrics.epoch_loss}};
}

inline void from_json(nlohmann::json const& j, AdapterArtifact& a) {
    a.prompt_name = j.at("prompt_name").get<std::string>();
    a.mode = j.at("mode").get<std::string>();
    a.pg_template = j.value("pg_template", std::string{});
    a.rank = j.at("rank").get<std::size_t>();
    a.alpha = j.value("alpha", static_cast<double>(a.rank));
    a.trainable_param_count = j.at("trainable_param_count").get<std::size_t>();
    a.base_param_count = j.at("base_param_count").get<std::size_t>();
    a.checkpoint_path = j.at("checkpoint_path").get<std::string>();
    a.seed = j.value("seed", std::uint64_t{0});
    a.config_hash = j.value("config_hash", std::string{});
    a.metrics.epoch_loss = j.value("epoch_loss", std::vector<double>{});
}

/// Adam over the adapter vector only; the base is never written.
class AdamState {
public:
    explicit AdamState(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& params, std::vector<double> const& grad, double lr, TrainConfig const& c) {
        ++t_;
        double const bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
        double const bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = c.beta1 * m_[i] + (1.0 - c.beta1) * grad[i];
            v_[i] = c.beta2 * v_[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            params[i] -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + c.epsilon);
        }
    }

private:
    std::vector<double> m_;
    std::vector<double> v_;
    std::uint64_t t_ = 0;
};

/// Linear warmup over the first ceil(fraction * total) steps, then constant.
[[nodiscard]] inline double scheduled_lr(TrainConfig const& c, std::size_t step, std::size_t total_steps) {
    auto const warmup = static_cast<std::size_t>(std::ceil(c.warmup_fraction * static_cast<double>(total_steps)));
    if (warmup == 0 || step >= warmup) return c.learning_rate;
    return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

[[nodiscard]] inline std::string config_hash(TrainConfig const& c) { return sha256_hex(nlohmann::json(c).dump()); }

struct TrainOptions {
    /// Output directory for manifest.json, adapter.bin and metrics.jsonl.
    std::optional<std::filesystem::path> output_dir;
    PgScaffold scaffold;
};

namespace detail {

inline void axpy(std::vector<double>& acc, double a, std::vector<double> const& x) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += a * x[i];
}

struct PreparedRecord {
    std::optional<TokenBatch> sft;
    std::optional<TokenBatch> pg;
    std::optional<KldPair> kld;
};

} // namespace detail

/// Trains a fresh adapter on `model` (its base stays untouched) and returns
/// the artifact. On a non-finite loss the adapter is rolled back to the last
/// good step, saved as last_good_adapter.bin when an output directory is
/// set, and NumericError is thrown.
template <ChatTokenizer Tok>
AdapterArtifact train(std::vector<SynthesisRecord> const& records, PromptSpec const& prompt, TrainConfig const& config,
                      TinyTransformer& model, Tok const& tok, TrainOptions const& options = {}) {
    config.validate();
    if (records.empty()) throw ConfigError("training corpus is empty");
    if (model.adapter_config().rank != config.adapter_rank) {
        throw ConfigError("model adapter rank " + std::to_string(model.adapter_config().rank) +
                          " differs from the configured rank " + std::to_string(config.adapter_rank));
    }
    model.reset_adapter();
    std::size_t const max_len = model.config().max_seq_len;
    auto const mode = config.mode;
    bool const uses_sft = mode == TrainMode::genpi || mode == TrainMode::sft_only || mode == TrainMode::seqkd ||
                          mode == TrainMode::seqkd_kld;
    bool const uses_pg = mode == TrainMode::genpi;
    bool const uses_kld = mode == TrainMode::kld || mode == TrainMode::seqkd_kld;
    auto const tmpl = PgTemplate::by_id(config.pg_template);

    std::vector<detail::PreparedRecord> prepared(records.size());
    rethrow_first(parallel_for(records.size(), config.workers, [&](std::size_t i) {
        auto& p = prepared[i];
        if (uses_sft) p.sft = assemble_sft_batch(records[i], tok, max_len);
        if (uses_pg) p.pg = assemble_pg_batch(records[i], prompt, tmpl, tok, max_len, options.scaffold);
        if (uses_kld) p.kld = assemble_kld_pair(records[i], prompt, tok, max_len);
    }));

    std::size_t const n = records.size();
    std::size_t const steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    std::size_t const total_steps = steps_per_epoch * config.epochs;
    AdamState adam(model.adapter().size());
    std::mt19937_64 prepend_rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
    std::vector<double> last_good = model.adapter();
    std::optional<std::ofstream> metrics_out;
    if (options.output_dir) {
        std::filesystem::create_directories(*options.output_dir);
        metrics_out.emplace(*options.output_dir / "metrics.jsonl", std::ios::trunc);
    }

    AdapterArtifact art;
    art.prompt_name = prompt.name;
    art.mode = std::string(to_string(mode));
    art.pg_template = uses_pg ? config.pg_template : std::string{};
    art.rank = config.adapter_rank;
    art.alpha = model.adapter_config().alpha;
    art.trainable_param_count = model.adapter_parameter_count();
    art.base_param_count = model.base_parameter_count();
    art.seed = config.seed;
    art.config_hash = config_hash(config);

    auto const diverged = [&](std::string const& what, std::size_t at) {
        model.adapter() = last_good;
        std::string where;
        if (options.output_dir) {
            auto const path = *options.output_dir / "last_good_adapter.bin";
            model.save_adapter(path);
            where = "; last good adapter saved to " + path.string();
        }
        throw NumericError(what + " at step " + std::to_string(at) + where);
    };
    auto const nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::size_t> order(n);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 shuffle_rng(config.seed * 1'000'003ULL + epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_total = 0.0;
        for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
            std::size_t const end = std::min(n, start + config.batch_size);
            double const inv = 1.0 / static_cast<double>(end - start);
            std::vector<double> grad(model.adapter().size(), 0.0);
            double sft = 0.0, pg = 0.0, kld = 0.0;
            try {
                for (std::size_t k = start; k < end; ++k) {
                    auto const& p = prepared[order[k]];
                    switch (mode) {
                    case TrainMode::genpi: {
                        double const lambda = *config.lambda;
                        auto s = loss_masked_nll_with_grad(*p.sft, model);
                        auto g = loss_masked_nll_with_grad(*p.pg, model);
                        sft += inv * s.value;
                        pg += inv * g.value;
                        detail::axpy(grad, lambda * inv, s.grads.adapter);
                        detail::axpy(grad, (1.0 - lambda) * inv, g.grads.adapter);
                        break;
                    }
                    case TrainMode::sft_only:
                    case TrainMode::seqkd: {
                        auto s = loss_masked_nll_with_grad(*p.sft, model);
                        sft += inv * s.value;
                        detail::axpy(grad, inv, s.grads.adapter);
                        break;
                    }
                    case TrainMode::kld: {
                        auto d = loss_kld(*p.kld, model);
                        kld += inv * d.value;
                        detail::axpy(grad, inv, d.grads.adapter);
                        break;
                    }
                    case TrainMode::seqkd_kld: {
                        auto s = loss_masked_nll_with_grad(*p.sft, model);
                        auto d = loss_kld(*p.kld, model);
                        sft += inv * s.value;
                        kld += inv * d.value;
                        detail::axpy(grad, inv, s.grads.adapter);
                        detail::axpy(grad, inv, d.grads.adapter);
                        break;
                    }
                    case TrainMode::prepend: {
                        auto const b = assemble_prepend_batch(records[order[k]], prompt, *config.prepend_probability,
                                                              prepend_rng, tok, max_len);
                        auto s = loss_masked_nll_with_grad(b, model);
                        sft += inv * s.value;
                        detail::axpy(grad, inv, s.grads.adapter);
                        break;
                    }
                    }
                }
            } catch (NumericError const& e) {
                diverged(e.what(), step);
            }
            double loss = 0.0;
            switch (mode) {
            case TrainMode::genpi: loss = joint_loss(pg, sft, *config.lambda); break;
            case TrainMode::kld: loss = kld; break;
            case TrainMode::seqkd_kld: loss = sft + kld; break;
            default: loss = sft; break;
            }
            double const norm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));
            if (!std::isfinite(loss) || !std::isfinite(norm)) diverged("non-finite loss or gradient", step);
            if (config.max_grad_norm > 0.0) {
                if (norm > config.max_grad_norm) {
                    for (double& g : grad) g *= config.max_grad_norm / norm;
                }
            }
            double const lr = scheduled_lr(config, step, total_steps);
            last_good = model.adapter();
            adam.step(model.adapter(), grad, lr, config);
            epoch_total += loss;
            art.metrics.step_loss.push_back(loss);
            art.metrics.step_sft.push_back(uses_sft || mode == TrainMode::prepend ? sft : nan);
            art.metrics.step_pg.push_back(uses_pg ? pg : nan);
            art.metrics.learning_rate.push_back(lr);
            if (metrics_out) {
                nlohmann::json line{{"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", lr}};
                if (uses_sft || mode == TrainMode::prepend) line["sft"] = sft;
                if (uses_pg) line["pg"] = pg;
                if (uses_kld) line["kld"] = kld;
                *metrics_out << line.dump() << "\n";
            }
        }
        art.metrics.epoch_loss.push_back(epoch_total / static_cast<double>(steps_per_epoch));
    }

    if (options.output_dir) {
        art.checkpoint_path = *options.output_dir / "adapter.bin";
        model.save_adapter(art.checkpoint_path);
        nlohmann::json manifest = art;
        manifest["train_config"] = config;
        manifest["model_config"] = model.config();
        manifest["adapter_config"] = model.adapter_config();
        write_text_file_atomic(*options.output_dir / "manifest.json", manifest.dump(2));
    }
    return art;
}

} // namespace genpi
