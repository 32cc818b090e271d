#pragma once

#include "genpi/batches.hpp"
#include "genpi/errors.hpp"
#include "genpi/tiny_transformer.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace genpi {

/// What a loss needs from a model: log-probabilities with and without the
/// adapter, and gradients of a logit-space loss.
template <class M>
concept DifferentiableLM = requires(M const& m, std::span<int const> tokens, bool use_adapter) {
    { m.forward(tokens, use_adapter).log_probs } -> std::convertible_to<Matrix>;
    { m.backward(m.forward(tokens, use_adapter), Matrix{}) };
};

static_assert(DifferentiableLM<TinyTransformer>);

struct LossValue {
    double value = 0.0;
    std::size_t positions = 0;
};

struct LossWithGrad {
    double value = 0.0;
    std::size_t positions = 0;
    TinyTransformer::Gradients grads;
};

namespace detail {

inline void require_finite(double v, std::string const& record_id, char const* what) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite for record " + record_id);
}

/// Mean negative log-likelihood of labels[i] at masked positions i, and its
/// logit gradient if requested. Row i-1 of log_probs predicts position i.
inline double masked_nll(Matrix const& log_probs, TokenBatch const& batch, std::span<int const> labels, Matrix* d_logits) {
    std::size_t const n = batch.masked_count();
    if (d_logits) *d_logits = Matrix::Zero(log_probs.rows(), log_probs.cols());
    double total = 0.0;
    double const inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 1; i < batch.token_ids.size(); ++i) {
        if (!batch.loss_mask[i]) continue;
        auto const row = static_cast<Eigen::Index>(i - 1);
        total -= log_probs(row, labels[i]);
        if (d_logits) {
            d_logits->row(row) = log_probs.row(row).array().exp() * inv;
            (*d_logits)(row, labels[i]) -= inv;
        }
    }
    return total * inv;
}

} // namespace detail

/// Mean next-token NLL over masked-in positions. `labels` defaults to the
/// batch's own tokens; positions outside the mask never read their label.
template <DifferentiableLM M>
[[nodiscard]] LossValue loss_masked_nll(TokenBatch const& batch, M const& model, bool use_adapter = true,
                                        std::span<int const> labels = {}) {
    batch.validate();
    if (labels.empty()) labels = batch.token_ids;
    if (labels.size() != batch.token_ids.size()) throw PreconditionError("label count differs from token count");
    auto const f = model.forward(batch.token_ids, use_adapter);
    double const v = detail::masked_nll(f.log_probs, batch, labels, nullptr);
    detail::require_finite(v, batch.record_id, "masked NLL");
    return {v, batch.masked_count()};
}

[[nodiscard]] inline LossWithGrad loss_masked_nll_with_grad(TokenBatch const& batch, TinyTransformer const& model,
                                                            bool use_adapter = true) {
    batch.validate();
    auto const f = model.forward(batch.token_ids, use_adapter);
    Matrix d_logits;
    double const v = detail::masked_nll(f.log_probs, batch, batch.token_ids, &d_logits);
    detail::require_finite(v, batch.record_id, "masked NLL");
    return {v, batch.masked_count(), model.backward(f, d_logits)};
}

/// (1 - lambda) * L_PG + lambda * L_SFT.
[[nodiscard]] constexpr double joint_loss(double l_pg, double l_sft, double lambda) noexcept {
    return (1.0 - lambda) * l_pg + lambda * l_sft;
}

/// KL(t || s) from log-probability rows; zero-probability teacher entries contribute nothing.
[[nodiscard]] inline double kl_divergence(Eigen::RowVectorXd const& log_t, Eigen::RowVectorXd const& log_s) {
    double kl = 0.0;
    for (Eigen::Index v = 0; v < log_t.size(); ++v) {
        double const p = std::exp(log_t[v]);
        if (p > 0.0) kl += p * (log_t[v] - log_s[v]);
    }
    return kl;
}

/// Mean over aligned assistant positions of KL(teacher || student). The
/// teacher is the frozen base with the prompt; the student is the adapted
/// model without it. Gradients flow to the student only.
inline LossWithGrad loss_kld(KldPair const& pair, TinyTransformer const& model, bool with_grad = true) {
    auto const& sb = pair.student;
    sb.validate();
    auto const teacher = model.forward(pair.teacher_tokens, false);
    auto const student = model.forward(sb.token_ids, true);
    std::size_t const n = sb.masked_count();
    double const inv = 1.0 / static_cast<double>(n);
    Matrix d_logits = Matrix::Zero(student.log_probs.rows(), student.log_probs.cols());
    double total = 0.0;
    for (std::size_t i = 1; i < sb.token_ids.size(); ++i) {
        if (!sb.loss_mask[i]) continue;
        auto const srow = static_cast<Eigen::Index>(i - 1);
        auto const trow = static_cast<Eigen::Index>(i - 1 + pair.offset);
        Eigen::RowVectorXd const log_t = teacher.log_probs.row(trow);
        Eigen::RowVectorXd const log_s = student.log_probs.row(srow);
        Eigen::RowVectorXd const p_t = log_t.array().exp();
        total += kl_divergence(log_t, log_s);
        // d/d(student logits) of KL(t || softmax(z)) = softmax(z) - t
        d_logits.row(srow) = (log_s.array().exp() - p_t.array()) * inv;
    }
    double const v = total * inv;
    detail::require_finite(v, sb.record_id, "KL divergence");
    LossWithGrad out{v, n, {}};
    if (with_grad) out.grads = model.backward(student, d_logits);
    return out;
}

} // namespace genpi
