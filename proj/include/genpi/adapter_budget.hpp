#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace genpi {

/// Shape of a grouped-query-attention decoder with a gated MLP.
struct DecoderShape {
    std::uint64_t vocab_size = 0;
    std::uint64_t hidden = 0;
    std::uint64_t layers = 0;
    std::uint64_t intermediate = 0;
    std::uint64_t heads = 0;
    std::uint64_t kv_heads = 0;
    bool tied_embeddings = false;

    [[nodiscard]] std::uint64_t head_dim() const noexcept { return hidden / heads; }
    [[nodiscard]] std::uint64_t kv_dim() const noexcept { return kv_heads * head_dim(); }
};

/// 8B-class configuration: hidden 4096, 32 layers, MLP 14336, 8 KV heads.
[[nodiscard]] inline DecoderShape eight_b_shape() { return {128256, 4096, 32, 14336, 32, 8, false}; }

struct LinearShape {
    std::string name;
    std::uint64_t d_in = 0;
    std::uint64_t d_out = 0;
};

/// Every linear projection of one decoder layer.
[[nodiscard]] inline std::vector<LinearShape> layer_projections(DecoderShape const& s) {
    return {{"q", s.hidden, s.hidden},           {"k", s.hidden, s.kv_dim()},         {"v", s.hidden, s.kv_dim()},
            {"o", s.hidden, s.hidden},           {"gate", s.hidden, s.intermediate}, {"up", s.hidden, s.intermediate},
            {"down", s.intermediate, s.hidden}};
}

[[nodiscard]] inline std::uint64_t base_parameter_count(DecoderShape const& s) {
    std::uint64_t per_layer = 2 * s.hidden;  // two RMSNorm gains
    for (auto const& p : layer_projections(s)) per_layer += p.d_in * p.d_out;
    std::uint64_t const embed = s.vocab_size * s.hidden;
    return embed + s.layers * per_layer + s.hidden + (s.tied_embeddings ? 0 : embed);
}

/// Low-rank adapters on every layer projection: rank * (d_in + d_out) each.
[[nodiscard]] inline std::uint64_t adapter_parameter_count(DecoderShape const& s, std::uint64_t rank) {
    std::uint64_t per_layer = 0;
    for (auto const& p : layer_projections(s)) per_layer += rank * (p.d_in + p.d_out);
    return s.layers * per_layer;
}

} // namespace genpi
