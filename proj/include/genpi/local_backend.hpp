#pragma once

#include "genpi/backend.hpp"
#include "genpi/tiny_transformer.hpp"
#include "genpi/tokenizer.hpp"

#include <memory>
#include <random>
#include <vector>

namespace genpi {

/// Generation from an in-process TinyTransformer. The backend borrows the
/// model; swapping adapters on it (see AdapterRegistry) changes what this
/// backend generates. Calls only read the model.
class LocalModelBackend final : public Backend {
public:
    LocalModelBackend(std::string backend_id, TinyTransformer const& model, PieceTokenizer const& tok, bool use_adapter)
        : handle_{std::move(backend_id), use_adapter ? "tiny+adapter" : "tiny", {Capability::generate, Capability::score_logits}},
          model_(&model),
          tok_(&tok),
          use_adapter_(use_adapter) {}

    [[nodiscard]] BackendHandle const& handle() const noexcept override { return handle_; }

    [[nodiscard]] std::string complete(Conversation const& conversation, SamplingParams const& params) override {
        params.validate();
        auto const chat = render_chat(conversation, *tok_, true);
        auto const limit = model_->config().max_seq_len;
        if (chat.ids.size() >= limit) {
            throw LengthError("context of " + std::to_string(chat.ids.size()) + " tokens leaves no room to generate", limit);
        }
        auto dec = model_->decoder(use_adapter_);
        Vector log_probs;
        for (int id : chat.ids) log_probs = dec.step(id);
        std::mt19937_64 rng(params.seed);
        std::vector<int> out;
        while (out.size() < params.max_new_tokens && dec.length() < limit) {
            int const next = pick(log_probs, params, rng);
            if (next < PieceTokenizer::byte_base) break;  // end of turn or any other special token
            out.push_back(next);
            log_probs = dec.step(next);
        }
        return tok_->decode(out);
    }

private:
    [[nodiscard]] static int pick(Vector const& log_probs, SamplingParams const& params, std::mt19937_64& rng) {
        Eigen::Index best = 0;
        if (params.greedy()) {
            log_probs.maxCoeff(&best);
            return static_cast<int>(best);
        }
        Vector p = (log_probs / params.temperature).array().exp();
        p /= p.sum();
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(p.size()));
        for (Eigen::Index i = 0; i < p.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
        double mass = 0.0;
        std::vector<double> weights;
        for (auto i : idx) {
            weights.push_back(p[i]);
            mass += p[i];
            if (mass >= params.top_p) break;
        }
        std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
        return static_cast<int>(idx[dist(rng)]);
    }

    BackendHandle handle_;
    TinyTransformer const* model_;
    PieceTokenizer const* tok_;
    bool use_adapter_;
};

} // namespace genpi
