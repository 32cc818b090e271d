#pragma once

#include "genpi/errors.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace genpi {

/// Analytic cost parameters. A token processed with c tokens before it in
/// the context costs 2*n_params + 4*n_layers*d_model*c FLOPs.
struct ModelCostConfig {
    std::uint64_t n_layers = 0;
    std::uint64_t d_model = 0;
    std::uint64_t n_params = 0;
    std::optional<double> latency_per_flop;  ///< seconds; calibration scalar
    double request_overhead_s = 0.0;         ///< fixed per-turn latency, only with latency_per_flop

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_params == 0) throw ConfigError("cost model dimensions must be positive");
        if (latency_per_flop && !(*latency_per_flop > 0.0)) throw ConfigError("latency_per_flop must be positive");
        if (request_overhead_s < 0.0) throw ConfigError("request overhead must be non-negative");
    }
};

/// 32 layers, d_model 4096, 8.0e9 parameters.
[[nodiscard]] inline ModelCostConfig eight_b_cost_config() { return {32, 4096, 8'000'000'000ULL, std::nullopt, 0.0}; }

struct Cost {
    std::uint64_t macs = 0;
    std::uint64_t flops = 0;
    double latency_s = 0.0;

    Cost& operator+=(Cost const& o) noexcept {
        macs += o.macs;
        flops += o.flops;
        latency_s += o.latency_s;
        return *this;
    }
    friend bool operator==(Cost const&, Cost const&) = default;
};

/// FLOPs of processing the tokens at positions [first, last).
[[nodiscard]] inline std::uint64_t span_flops(ModelCostConfig const& cfg, std::uint64_t first, std::uint64_t last) {
    if (last <= first) return 0;
    std::uint64_t const n = last - first;
    std::uint64_t const k = 4 * cfg.n_layers * cfg.d_model;
    // sum of positions first..last-1; (first + last - 1) * n is always even
    std::uint64_t const position_sum = (first + last - 1) * n / 2;
    return 2 * cfg.n_params * n + k * position_sum;
}

[[nodiscard]] inline Cost cost_from_flops(ModelCostConfig const& cfg, std::uint64_t flops, bool is_request) {
    Cost c{flops / 2, flops, 0.0};
    if (cfg.latency_per_flop) {
        c.latency_s = static_cast<double>(flops) * *cfg.latency_per_flop + (is_request ? cfg.request_overhead_s : 0.0);
    }
    return c;
}

/// Prefill of positions [cached_prefix_len, context_len + new_input_len)
/// followed by output_len decode steps.
[[nodiscard]] inline Cost turn_cost(ModelCostConfig const& cfg, std::uint64_t context_len, std::uint64_t new_input_len,
                                    std::uint64_t output_len, std::uint64_t cached_prefix_len) {
    cfg.validate();
    if (cached_prefix_len > context_len) throw PreconditionError("cached prefix longer than the context");
    std::uint64_t const end_prefill = context_len + new_input_len;
    std::uint64_t const flops =
        span_flops(cfg, cached_prefix_len, end_prefill) + span_flops(cfg, end_prefill, end_prefill + output_len);
    return cost_from_flops(cfg, flops, true);
}

struct TurnLengths {
    std::uint64_t input_tokens = 0;
    std::uint64_t output_tokens = 0;
};

/// A multi-turn conversation's token counts. The prompt length applies to
/// the prompted variant only.
struct TurnTrace {
    std::string name;
    std::uint64_t prompt_tokens = 0;
    std::vector<TurnLengths> turns;

    void validate() const {
        if (turns.empty()) throw ConfigError("trace " + name + " has no turns");
    }
};

enum class CacheMode { no_cache, kv_cache };
enum class Variant { prompted, internalized };

[[nodiscard]] inline std::string_view to_string(CacheMode m) noexcept { return m == CacheMode::no_cache ? "no_cache" : "kv_cache"; }
[[nodiscard]] inline std::string_view to_string(Variant v) noexcept { return v == Variant::prompted ? "prompted" : "internalized"; }

struct CostReport {
    CacheMode mode = CacheMode::no_cache;
    Variant variant = Variant::prompted;
    Cost caching;  ///< prompt prefill done once before turn 1 (kv_cache, prompted)
    std::vector<Cost> per_turn;
    std::vector<Cost> cumulative;  ///< running sum of per_turn, caching excluded

    [[nodiscard]] Cost total_excluding_caching() const { return cumulative.empty() ? Cost{} : cumulative.back(); }
    [[nodiscard]] Cost total_including_caching() const {
        Cost c = caching;
        c += total_excluding_caching();
        return c;
    }
};

/// no_cache re-prefills prompt and history every turn. kv_cache prefills
/// the prompt once (reported as `caching`) and keeps every earlier token.
[[nodiscard]] inline CostReport conversation_cost(ModelCostConfig const& cfg, TurnTrace const& trace, CacheMode mode,
                                                  Variant variant) {
    cfg.validate();
    trace.validate();
    CostReport r;
    r.mode = mode;
    r.variant = variant;
    std::uint64_t const prompt = variant == Variant::prompted ? trace.prompt_tokens : 0;
    if (mode == CacheMode::kv_cache && prompt > 0) r.caching = cost_from_flops(cfg, span_flops(cfg, 0, prompt), false);
    std::uint64_t context = prompt;
    Cost running;
    for (auto const& t : trace.turns) {
        std::uint64_t const cached = mode == CacheMode::kv_cache ? context : 0;
        auto const c = turn_cost(cfg, context, t.input_tokens, t.output_tokens, cached);
        r.per_turn.push_back(c);
        running += c;
        r.cumulative.push_back(running);
        context += t.input_tokens + t.output_tokens;
    }
    return r;
}

/// Percent reduction of b relative to a: 100 * (a - b) / a.
[[nodiscard]] inline double reduction_percent(double a, double b) noexcept { return a == 0.0 ? 0.0 : 100.0 * (a - b) / a; }

struct ComparisonRow {
    std::size_t turn = 0;  ///< 1-based
    Cost a, b;
    Cost cumulative_a, cumulative_b;
    double flops_delta = 0.0;             ///< a - b, this turn
    double flops_reduction_percent = 0.0; ///< this turn
    double cumulative_reduction_percent = 0.0;
    double latency_reduction_percent = 0.0;
};

struct ComparisonSummary {
    std::string label_a, label_b;
    std::vector<ComparisonRow> rows;
    double cumulative_macs_reduction_percent = 0.0;
    double cumulative_flops_reduction_percent = 0.0;
    double cumulative_latency_reduction_percent = 0.0;
};

[[nodiscard]] inline ComparisonSummary compare(CostReport const& a, CostReport const& b, std::string label_a = "a",
                                               std::string label_b = "b") {
    if (a.per_turn.size() != b.per_turn.size()) throw PreconditionError("reports cover different turn counts");
    ComparisonSummary s{std::move(label_a), std::move(label_b), {}, 0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < a.per_turn.size(); ++i) {
        ComparisonRow row;
        row.turn = i + 1;
        row.a = a.per_turn[i];
        row.b = b.per_turn[i];
        row.cumulative_a = a.cumulative[i];
        row.cumulative_b = b.cumulative[i];
        row.flops_delta = static_cast<double>(row.a.flops) - static_cast<double>(row.b.flops);
        row.flops_reduction_percent = reduction_percent(static_cast<double>(row.a.flops), static_cast<double>(row.b.flops));
        row.cumulative_reduction_percent =
            reduction_percent(static_cast<double>(row.cumulative_a.flops), static_cast<double>(row.cumulative_b.flops));
        row.latency_reduction_percent = reduction_percent(row.a.latency_s, row.b.latency_s);
        s.rows.push_back(row);
    }
    auto const ta = a.total_excluding_caching();
    auto const tb = b.total_excluding_caching();
    s.cumulative_macs_reduction_percent = reduction_percent(static_cast<double>(ta.macs), static_cast<double>(tb.macs));
    s.cumulative_flops_reduction_percent = reduction_percent(static_cast<double>(ta.flops), static_cast<double>(tb.flops));
    s.cumulative_latency_reduction_percent = reduction_percent(ta.latency_s, tb.latency_s);
    return s;
}

/// Plot-ready series: one line per turn and side.
[[nodiscard]] inline std::string to_csv(ComparisonSummary const& s) {
    std::ostringstream out;
    out.precision(17);
    out << "turn,series,macs,flops,latency_s,cumulative_macs,cumulative_flops,cumulative_latency_s\n";
    for (auto const& r : s.rows) {
        for (auto const& [label, c, cum] : {std::tuple{s.label_a, r.a, r.cumulative_a}, std::tuple{s.label_b, r.b, r.cumulative_b}}) {
            out << r.turn << ',' << label << ',' << c.macs << ',' << c.flops << ',' << c.latency_s << ',' << cum.macs << ','
                << cum.flops << ',' << cum.latency_s << '\n';
        }
    }
    return out.str();
}

inline void to_json(nlohmann::json& j, Cost const& c) {
    j = nlohmann::json{{"macs", c.macs}, {"flops", c.flops}, {"latency_s", c.latency_s}};
}

inline void to_json(nlohmann::json& j, CostReport const& r) {
    j = nlohmann::json{{"mode", to_string(r.mode)},
                       {"variant", to_string(r.variant)},
                       {"caching", r.caching},
                       {"per_turn", r.per_turn},
                       {"cumulative", r.cumulative}};
}

inline void to_json(nlohmann::json& j, ComparisonSummary const& s) {
    nlohmann::json rows = nlohmann::json::array();
    for (auto const& r : s.rows) {
        rows.push_back({{"turn", r.turn},
                        {"flops_reduction_percent", r.flops_reduction_percent},
                        {"cumulative_reduction_percent", r.cumulative_reduction_percent},
                        {"flops_delta", r.flops_delta}});
    }
    j = nlohmann::json{{"a", s.label_a},
                       {"b", s.label_b},
                       {"rows", rows},
                       {"cumulative_macs_reduction_percent", s.cumulative_macs_reduction_percent},
                       {"cumulative_flops_reduction_percent", s.cumulative_flops_reduction_percent},
                       {"cumulative_latency_reduction_percent", s.cumulative_latency_reduction_percent}};
}

inline void from_json(nlohmann::json const& j, ModelCostConfig& c) {
    c.n_layers = j.at("n_layers").get<std::uint64_t>();
    c.d_model = j.at("d_model").get<std::uint64_t>();
    c.n_params = j.at("n_params").get<std::uint64_t>();
    if (j.contains("latency_per_flop") && !j.at("latency_per_flop").is_null()) {
        c.latency_per_flop = j.at("latency_per_flop").get<double>();
    }
    c.request_overhead_s = j.value("request_overhead_s", 0.0);
    c.validate();
}

inline void from_json(nlohmann::json const& j, TurnTrace& t) {
    t.name = j.value("name", std::string{});
    t.prompt_tokens = j.at("prompt_tokens").get<std::uint64_t>();
    t.turns.clear();
    for (auto const& turn : j.at("turns")) {
        t.turns.push_back({turn.at("input_tokens").get<std::uint64_t>(), turn.at("output_tokens").get<std::uint64_t>()});
    }
    t.validate();
}

} // namespace genpi
