#pragma once

#include "genpi/errors.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace genpi {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<Matrix const>;

struct TransformerConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t max_seq_len = 512;
    double init_std = 0.1;
    double head_init_std = 0.3;
    std::uint64_t seed = 1;

    void validate() const {
        if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
            throw ConfigError("transformer dimensions must be positive");
        }
        if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    }

    friend bool operator==(TransformerConfig const&, TransformerConfig const&) = default;
};

struct AdapterConfig {
    std::size_t rank = 8;
    double alpha = 8.0;
    std::uint64_t seed = 2;

    [[nodiscard]] double scale() const noexcept { return alpha / static_cast<double>(rank); }

    friend bool operator==(AdapterConfig const&, AdapterConfig const&) = default;
};

inline void to_json(nlohmann::json& j, TransformerConfig const& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len},
                       {"init_std", c.init_std},     {"head_init_std", c.head_init_std}, {"seed", c.seed}};
}

inline void from_json(nlohmann::json const& j, TransformerConfig& c) {
    TransformerConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.init_std = j.value("init_std", d.init_std);
    c.head_init_std = j.value("head_init_std", d.head_init_std);
    c.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, AdapterConfig const& c) {
    j = nlohmann::json{{"rank", c.rank}, {"alpha", c.alpha}, {"seed", c.seed}};
}

inline void from_json(nlohmann::json const& j, AdapterConfig& c) {
    c.rank = j.value("rank", std::size_t{8});
    c.alpha = j.value("alpha", static_cast<double>(c.rank));
    c.seed = j.value("seed", std::uint64_t{2});
}

/// The six adapted projections of a block.
enum class Projection : std::size_t { q = 0, k, v, o, up, down };
inline constexpr std::size_t projection_count = 6;

/// Pre-norm decoder-only transformer with low-rank adapters on every
/// attention and MLP projection.
///
/// Base and adapter parameters live in two flat vectors so the optimizer,
/// finite-difference checks and checkpoints all work on plain spans. The
/// base is never touched by adapter training; the adapter can be switched
/// off per call, which turns the same object into the unadapted model.
///
/// Block: x += W_o·attn(RMSNorm(x)); x += W_down·silu(W_up·RMSNorm(x)).
/// Projections compute y = x·Wᵀ + s·(x·Aᵀ)·Bᵀ with s = alpha / rank.
class TinyTransformer {
public:
    struct Span {
        std::size_t offset = 0;
        std::size_t rows = 0;
        std::size_t cols = 0;
        [[nodiscard]] std::size_t size() const noexcept { return rows * cols; }
    };

    struct LayerSpans {
        Span norm1, norm2;
        Span w[projection_count];
    };

    struct AdapterSpans {
        Span a[projection_count];
        Span b[projection_count];
    };

    TinyTransformer(TransformerConfig config, AdapterConfig adapter)
        : config_(config), adapter_config_(adapter) {
        config_.validate();
        if (adapter_config_.rank == 0) throw ConfigError("adapter rank must be positive");
        layout();
        initialise();
    }

    [[nodiscard]] TransformerConfig const& config() const noexcept { return config_; }
    [[nodiscard]] AdapterConfig const& adapter_config() const noexcept { return adapter_config_; }

    [[nodiscard]] std::vector<double>& base() noexcept { return base_; }
    [[nodiscard]] std::vector<double> const& base() const noexcept { return base_; }
    [[nodiscard]] std::vector<double>& adapter() noexcept { return adapter_; }
    [[nodiscard]] std::vector<double> const& adapter() const noexcept { return adapter_; }

    /// Fresh adapter: A random, B zero, so the adapted model starts equal to the base.
    void reset_adapter() {
        std::mt19937_64 rng(adapter_config_.seed);
        std::fill(adapter_.begin(), adapter_.end(), 0.0);
        for (auto const& l : adapter_spans_) {
            for (std::size_t p = 0; p < projection_count; ++p) {
                double const std = 1.0 / std::sqrt(static_cast<double>(l.a[p].cols));
                std::normal_distribution<double> dist(0.0, std);
                for (std::size_t i = 0; i < l.a[p].size(); ++i) adapter_[l.a[p].offset + i] = dist(rng);
            }
        }
    }

    struct LayerCache {
        Matrix x_in, n1, h1, q, k, v, o, x_mid, n2, h2, u, z;
        Vector r1, r2;
        std::vector<Matrix> probs;  ///< per head, T x T
        Matrix xa[projection_count];
    };

    struct Forward {
        std::vector<int> tokens;
        bool use_adapter = false;
        std::vector<LayerCache> layers;
        Matrix x_final, n_final, h_final;
        Vector r_final;
        Matrix logits;
        Matrix log_probs;  ///< row i: distribution of token i+1
    };

    struct Gradients {
        std::vector<double> base;
        std::vector<double> adapter;
    };

    [[nodiscard]] Forward forward(std::span<int const> tokens, bool use_adapter) const {
        std::size_t const T = tokens.size();
        if (T == 0) throw PreconditionError("forward on an empty sequence");
        if (T > config_.max_seq_len) {
            throw LengthError("sequence of " + std::to_string(T) + " tokens exceeds the model context", config_.max_seq_len);
        }
        std::size_t const d = config_.d_model;
        Forward f;
        f.tokens.assign(tokens.begin(), tokens.end());
        f.use_adapter = use_adapter;
        Matrix x(T, d);
        auto const tok = cmap(tok_emb_);
        auto const pos = cmap(pos_emb_);
        for (std::size_t t = 0; t < T; ++t) {
            auto const id = check_token(tokens[t]);
            x.row(static_cast<Eigen::Index>(t)) = tok.row(id) + pos.row(static_cast<Eigen::Index>(t));
        }
        f.layers.resize(config_.n_layers);
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            auto& c = f.layers[l];
            auto const& s = layer_spans_[l];
            c.x_in = x;
            rms_norm(x, cvec(s.norm1), c.n1, c.r1, c.h1);
            c.q = linear(c.h1, l, Projection::q, use_adapter, c.xa[0]);
            c.k = linear(c.h1, l, Projection::k, use_adapter, c.xa[1]);
            c.v = linear(c.h1, l, Projection::v, use_adapter, c.xa[2]);
            attention(c);
            x += linear(c.o, l, Projection::o, use_adapter, c.xa[3]);
            c.x_mid = x;
            rms_norm(x, cvec(s.norm2), c.n2, c.r2, c.h2);
            c.u = linear(c.h2, l, Projection::up, use_adapter, c.xa[4]);
            c.z = c.u.unaryExpr([](double u) { return u * sigmoid(u); });
            x += linear(c.z, l, Projection::down, use_adapter, c.xa[5]);
        }
        f.x_final = x;
        rms_norm(x, cvec(final_norm_), f.n_final, f.r_final, f.h_final);
        f.logits = f.h_final * cmap(lm_head_).transpose();
        f.log_probs = log_softmax_rows(f.logits);
        return f;
    }

    /// Backpropagates d(loss)/d(logits) to every base and adapter parameter.
    [[nodiscard]] Gradients backward(Forward const& f, Matrix const& d_logits) const {
        std::size_t const T = f.tokens.size();
        Gradients g{std::vector<double>(base_.size(), 0.0), std::vector<double>(adapter_.size(), 0.0)};
        map(g.base, lm_head_) += d_logits.transpose() * f.h_final;
        Matrix dh = d_logits * cmap(lm_head_);
        Matrix dx = rms_norm_backward(dh, f.n_final, f.r_final, cvec(final_norm_), vmap(g.base, final_norm_));
        for (std::size_t li = config_.n_layers; li-- > 0;) {
            auto const& c = f.layers[li];
            auto const& s = layer_spans_[li];
            // MLP branch
            Matrix dz = linear_backward(dx, c.z, li, Projection::down, f.use_adapter, c.xa[5], g);
            Matrix du = dz.cwiseProduct(c.u.unaryExpr([](double u) {
                double const sg = sigmoid(u);
                return sg * (1.0 + u * (1.0 - sg));
            }));
            Matrix dh2 = linear_backward(du, c.h2, li, Projection::up, f.use_adapter, c.xa[4], g);
            dx += rms_norm_backward(dh2, c.n2, c.r2, cvec(s.norm2), vmap(g.base, s.norm2));
            // attention branch
            Matrix d_o = linear_backward(dx, c.o, li, Projection::o, f.use_adapter, c.xa[3], g);
            Matrix dq, dk, dv;
            attention_backward(c, d_o, dq, dk, dv);
            Matrix dh1 = linear_backward(dq, c.h1, li, Projection::q, f.use_adapter, c.xa[0], g);
            dh1 += linear_backward(dk, c.h1, li, Projection::k, f.use_adapter, c.xa[1], g);
            dh1 += linear_backward(dv, c.h1, li, Projection::v, f.use_adapter, c.xa[2], g);
            dx += rms_norm_backward(dh1, c.n1, c.r1, cvec(s.norm1), vmap(g.base, s.norm1));
        }
        auto tok = map(g.base, tok_emb_);
        auto pos = map(g.base, pos_emb_);
        for (std::size_t t = 0; t < T; ++t) {
            auto const row = static_cast<Eigen::Index>(t);
            tok.row(f.tokens[t]) += dx.row(row);
            pos.row(row) += dx.row(row);
        }
        return g;
    }

    /// Incremental decoder with a key/value cache, for generation.
    class Decoder {
    public:
        Decoder(TinyTransformer const& model, bool use_adapter) : model_(&model), use_adapter_(use_adapter) {
            auto const L = model.config_.n_layers;
            keys_.resize(L);
            values_.resize(L);
        }

        [[nodiscard]] std::size_t length() const noexcept { return length_; }

        /// Feeds one token; returns the log-distribution of the next one.
        Vector step(int token) {
            auto const& m = *model_;
            auto const& cfg = m.config_;
            if (length_ >= cfg.max_seq_len) {
                throw LengthError("decoder ran past the model context", cfg.max_seq_len);
            }
            std::size_t const d = cfg.d_model;
            std::size_t const H = cfg.n_heads;
            std::size_t const hd = d / H;
            double const inv = 1.0 / std::sqrt(static_cast<double>(hd));
            Matrix x = m.cmap(m.tok_emb_).row(m.check_token(token)) +
                       m.cmap(m.pos_emb_).row(static_cast<Eigen::Index>(length_));
            Matrix scratch;
            for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                auto const& s = m.layer_spans_[l];
                Matrix n, h;
                Vector r;
                m.rms_norm(x, m.cvec(s.norm1), n, r, h);
                Matrix q = m.linear(h, l, Projection::q, use_adapter_, scratch);
                Matrix k = m.linear(h, l, Projection::k, use_adapter_, scratch);
                Matrix v = m.linear(h, l, Projection::v, use_adapter_, scratch);
                auto& K = keys_[l];
                auto& V = values_[l];
                K.conservativeResize(static_cast<Eigen::Index>(length_ + 1), static_cast<Eigen::Index>(d));
                V.conservativeResize(static_cast<Eigen::Index>(length_ + 1), static_cast<Eigen::Index>(d));
                K.row(static_cast<Eigen::Index>(length_)) = k.row(0);
                V.row(static_cast<Eigen::Index>(length_)) = v.row(0);
                Matrix o(1, d);
                for (std::size_t hh = 0; hh < H; ++hh) {
                    auto const c0 = static_cast<Eigen::Index>(hh * hd);
                    auto const w = static_cast<Eigen::Index>(hd);
                    Eigen::RowVectorXd scores = (q.block(0, c0, 1, w) * K.middleCols(c0, w).transpose()) * inv;
                    double const mx = scores.maxCoeff();
                    Eigen::RowVectorXd p = (scores.array() - mx).exp();
                    p /= p.sum();
                    o.block(0, c0, 1, w) = p * V.middleCols(c0, w);
                }
                x += m.linear(o, l, Projection::o, use_adapter_, scratch);
                m.rms_norm(x, m.cvec(s.norm2), n, r, h);
                Matrix u = m.linear(h, l, Projection::up, use_adapter_, scratch);
                Matrix z = u.unaryExpr([](double a) { return a * sigmoid(a); });
                x += m.linear(z, l, Projection::down, use_adapter_, scratch);
            }
            Matrix n, h;
            Vector r;
            m.rms_norm(x, m.cvec(m.final_norm_), n, r, h);
            Matrix logits = h * m.cmap(m.lm_head_).transpose();
            ++length_;
            return log_softmax_rows(logits).row(0).transpose();
        }

    private:
        TinyTransformer const* model_;
        bool use_adapter_;
        std::size_t length_ = 0;
        std::vector<Matrix> keys_;
        std::vector<Matrix> values_;
    };

    [[nodiscard]] Decoder decoder(bool use_adapter) const { return Decoder(*this, use_adapter); }

    [[nodiscard]] std::size_t base_parameter_count() const noexcept { return base_.size(); }
    [[nodiscard]] std::size_t adapter_parameter_count() const noexcept { return adapter_.size(); }

    void save_base(std::filesystem::path const& path) const { save_blob(path, "GENPIBAS", base_); }
    void load_base(std::filesystem::path const& path) { load_blob(path, "GENPIBAS", base_); }
    void save_adapter(std::filesystem::path const& path) const { save_blob(path, "GENPIADP", adapter_); }
    void load_adapter(std::filesystem::path const& path) { load_blob(path, "GENPIADP", adapter_); }

    [[nodiscard]] static Matrix log_softmax_rows(Matrix const& logits) {
        Matrix out(logits.rows(), logits.cols());
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            double const mx = logits.row(i).maxCoeff();
            double const lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
            out.row(i) = logits.row(i).array() - lse;
        }
        return out;
    }

private:
    static constexpr double rms_eps = 1e-5;

    [[nodiscard]] static double sigmoid(double u) noexcept { return 1.0 / (1.0 + std::exp(-u)); }

    [[nodiscard]] Eigen::Index check_token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
            throw PreconditionError("token id " + std::to_string(id) + " outside the vocabulary");
        }
        return id;
    }

    Span take(std::size_t& cursor, std::size_t rows, std::size_t cols) {
        Span s{cursor, rows, cols};
        cursor += rows * cols;
        return s;
    }

    void layout() {
        auto const V = config_.vocab_size, d = config_.d_model, S = config_.max_seq_len, F = config_.d_ff;
        auto const r = adapter_config_.rank;
        std::size_t cur = 0;
        tok_emb_ = take(cur, V, d);
        pos_emb_ = take(cur, S, d);
        layer_spans_.resize(config_.n_layers);
        for (auto& l : layer_spans_) {
            l.norm1 = take(cur, 1, d);
            l.norm2 = take(cur, 1, d);
            for (auto p : {Projection::q, Projection::k, Projection::v, Projection::o}) {
                l.w[static_cast<std::size_t>(p)] = take(cur, d, d);
            }
            l.w[static_cast<std::size_t>(Projection::up)] = take(cur, F, d);
            l.w[static_cast<std::size_t>(Projection::down)] = take(cur, d, F);
        }
        final_norm_ = take(cur, 1, d);
        lm_head_ = take(cur, V, d);
        base_.assign(cur, 0.0);

        std::size_t acur = 0;
        adapter_spans_.resize(config_.n_layers);
        for (std::size_t li = 0; li < config_.n_layers; ++li) {
            for (std::size_t p = 0; p < projection_count; ++p) {
                auto const& w = layer_spans_[li].w[p];
                adapter_spans_[li].a[p] = take(acur, r, w.cols);
                adapter_spans_[li].b[p] = take(acur, w.rows, r);
            }
        }
        adapter_.assign(acur, 0.0);
    }

    void initialise() {
        std::mt19937_64 rng(config_.seed);
        std::normal_distribution<double> dist(0.0, config_.init_std);
        std::normal_distribution<double> head(0.0, config_.head_init_std);
        for (auto& v : base_) v = dist(rng);
        for (auto const& l : layer_spans_) {
            std::fill_n(base_.begin() + static_cast<std::ptrdiff_t>(l.norm1.offset), l.norm1.size(), 1.0);
            std::fill_n(base_.begin() + static_cast<std::ptrdiff_t>(l.norm2.offset), l.norm2.size(), 1.0);
            for (std::size_t p = 0; p < projection_count; ++p) {
                auto const& w = l.w[p];
                std::normal_distribution<double> proj(0.0, 1.0 / std::sqrt(static_cast<double>(w.cols)));
                for (std::size_t i = 0; i < w.size(); ++i) base_[w.offset + i] = proj(rng);
            }
        }
        std::fill_n(base_.begin() + static_cast<std::ptrdiff_t>(final_norm_.offset), final_norm_.size(), 1.0);
        for (std::size_t i = 0; i < lm_head_.size(); ++i) base_[lm_head_.offset + i] = head(rng);
        reset_adapter();
    }

    [[nodiscard]] ConstMatrixMap cmap(Span const& s) const {
        return {base_.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
    }
    [[nodiscard]] ConstMatrixMap amap(Span const& s) const {
        return {adapter_.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
    }
    [[nodiscard]] static MatrixMap map(std::vector<double>& v, Span const& s) {
        return {v.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
    }
    [[nodiscard]] Eigen::Map<Eigen::RowVectorXd const> cvec(Span const& s) const {
        return {base_.data() + s.offset, static_cast<Eigen::Index>(s.size())};
    }
    [[nodiscard]] static Eigen::Map<Eigen::RowVectorXd> vmap(std::vector<double>& v, Span const& s) {
        return {v.data() + s.offset, static_cast<Eigen::Index>(s.size())};
    }

    [[nodiscard]] Matrix linear(Matrix const& x, std::size_t layer, Projection p, bool use_adapter, Matrix& xa) const {
        auto const pi = static_cast<std::size_t>(p);
        Matrix y = x * cmap(layer_spans_[layer].w[pi]).transpose();
        if (use_adapter) {
            auto const& a = adapter_spans_[layer];
            xa = x * amap(a.a[pi]).transpose();
            y.noalias() += adapter_config_.scale() * (xa * amap(a.b[pi]).transpose());
        }
        return y;
    }

    /// Accumulates weight gradients into g; returns dL/dx.
    [[nodiscard]] Matrix linear_backward(Matrix const& dy, Matrix const& x, std::size_t layer, Projection p,
                                         bool use_adapter, Matrix const& xa, Gradients& g) const {
        auto const pi = static_cast<std::size_t>(p);
        auto const& ws = layer_spans_[layer].w[pi];
        map(g.base, ws).noalias() += dy.transpose() * x;
        Matrix dx = dy * cmap(ws);
        if (use_adapter) {
            auto const& a = adapter_spans_[layer];
            double const s = adapter_config_.scale();
            map(g.adapter, a.b[pi]).noalias() += s * (dy.transpose() * xa);
            Matrix dxa = s * (dy * amap(a.b[pi]));
            map(g.adapter, a.a[pi]).noalias() += dxa.transpose() * x;
            dx.noalias() += dxa * amap(a.a[pi]);
        }
        return dx;
    }

    template <class Gain>
    void rms_norm(Matrix const& x, Gain const& gain, Matrix& n, Vector& r, Matrix& h) const {
        auto const d = static_cast<double>(x.cols());
        r.resize(x.rows());
        n.resize(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            r(i) = std::sqrt(x.row(i).squaredNorm() / d + rms_eps);
            n.row(i) = x.row(i) / r(i);
        }
        h = n.array().rowwise() * gain.array();
    }

    template <class Gain, class GainGrad>
    [[nodiscard]] static Matrix rms_norm_backward(Matrix const& dh, Matrix const& n, Vector const& r, Gain const& gain,
                                                  GainGrad&& d_gain) {
        auto const d = static_cast<double>(n.cols());
        d_gain += (dh.array() * n.array()).colwise().sum().matrix();
        Matrix dx(n.rows(), n.cols());
        for (Eigen::Index i = 0; i < n.rows(); ++i) {
            Eigen::RowVectorXd dn = dh.row(i).cwiseProduct(gain);
            double const dot = dn.dot(n.row(i)) / d;
            dx.row(i) = (dn - n.row(i) * dot) / r(i);
        }
        return dx;
    }

    void attention(LayerCache& c) const {
        auto const T = c.q.rows();
        auto const H = config_.n_heads;
        auto const hd = static_cast<Eigen::Index>(config_.d_model / H);
        double const inv = 1.0 / std::sqrt(static_cast<double>(hd));
        c.o = Matrix::Zero(T, c.q.cols());
        c.probs.assign(H, Matrix());
        for (std::size_t h = 0; h < H; ++h) {
            auto const c0 = static_cast<Eigen::Index>(h) * hd;
            Matrix s = (c.q.middleCols(c0, hd) * c.k.middleCols(c0, hd).transpose()) * inv;
            for (Eigen::Index i = 0; i < T; ++i) {
                double const mx = s.row(i).head(i + 1).maxCoeff();
                double sum = 0.0;
                for (Eigen::Index j = 0; j < T; ++j) {
                    double const e = j <= i ? std::exp(s(i, j) - mx) : 0.0;
                    s(i, j) = e;
                    sum += e;
                }
                s.row(i) /= sum;
            }
            c.o.middleCols(c0, hd) = s * c.v.middleCols(c0, hd);
            c.probs[h] = std::move(s);
        }
    }

    void attention_backward(LayerCache const& c, Matrix const& d_o, Matrix& dq, Matrix& dk, Matrix& dv) const {
        auto const H = config_.n_heads;
        auto const hd = static_cast<Eigen::Index>(config_.d_model / H);
        double const inv = 1.0 / std::sqrt(static_cast<double>(hd));
        dq = Matrix::Zero(c.q.rows(), c.q.cols());
        dk = Matrix::Zero(c.k.rows(), c.k.cols());
        dv = Matrix::Zero(c.v.rows(), c.v.cols());
        for (std::size_t h = 0; h < H; ++h) {
            auto const c0 = static_cast<Eigen::Index>(h) * hd;
            auto const& p = c.probs[h];
            Matrix doh = d_o.middleCols(c0, hd);
            dv.middleCols(c0, hd) = p.transpose() * doh;
            Matrix dp = doh * c.v.middleCols(c0, hd).transpose();
            Vector row_dot = (dp.array() * p.array()).rowwise().sum();
            Matrix ds = p.array() * (dp.colwise() - row_dot).array();
            ds *= inv;
            dq.middleCols(c0, hd) = ds * c.k.middleCols(c0, hd);
            dk.middleCols(c0, hd) = ds.transpose() * c.q.middleCols(c0, hd);
        }
    }

    static void save_blob(std::filesystem::path const& path, char const (&magic)[9], std::vector<double> const& v) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + path.string());
        out.write(magic, 8);
        std::uint64_t const n = v.size();
        out.write(reinterpret_cast<char const*>(&n), sizeof n);
        out.write(reinterpret_cast<char const*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!out) throw FormatError("short write to " + path.string());
    }

    static void load_blob(std::filesystem::path const& path, char const (&magic)[9], std::vector<double>& v) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open " + path.string());
        char got[8];
        std::uint64_t n = 0;
        in.read(got, 8);
        in.read(reinterpret_cast<char*>(&n), sizeof n);
        if (!in || std::string_view(got, 8) != std::string_view(magic, 8)) throw FormatError(path.string() + ": bad checkpoint header");
        if (n != v.size()) {
            throw FormatError(path.string() + ": checkpoint holds " + std::to_string(n) + " values, model expects " +
                              std::to_string(v.size()));
        }
        in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw FormatError(path.string() + ": truncated checkpoint");
    }

    TransformerConfig config_;
    AdapterConfig adapter_config_;
    Span tok_emb_, pos_emb_, final_norm_, lm_head_;
    std::vector<LayerSpans> layer_spans_;
    std::vector<AdapterSpans> adapter_spans_;
    std::vector<double> base_;
    std::vector<double> adapter_;
};

} // namespace genpi
