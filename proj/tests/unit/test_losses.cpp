#include "genpi/losses.hpp"

#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace genpi;
using namespace genpi::test_support;

namespace {

struct ToySetup {
    std::vector<SynthesisRecord> records = os_records(4, 2);
    PromptSpec prompt = os_prompt();
    PieceTokenizer tok = fixture_tokenizer(records, prompt, 60);
    TinyTransformer model;

    ToySetup() : model(config(tok.vocab_size()), AdapterConfig{4, 8.0, 5}) {
        std::mt19937_64 rng(17);
        for (double& a : model.adapter()) a = std::normal_distribution<double>(0.0, 0.3)(rng);
    }

    static TransformerConfig config(std::size_t vocab) {
        TransformerConfig c;
        c.vocab_size = vocab;
        c.d_model = 8;
        c.n_layers = 1;
        c.n_heads = 2;
        c.d_ff = 8;
        c.max_seq_len = 512;
        return c;
    }
};

/// Central differences on `params` for coordinates whose analytic gradient is
/// non-negligible; returns the worst relative error over `want` coordinates.
double worst_relative_error(std::vector<double>& params, std::vector<double> const& grad, std::function<double()> const& loss,
                            std::size_t want, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
    double worst = 0.0;
    std::size_t checked = 0;
    for (int trial = 0; trial < 20000 && checked < want; ++trial) {
        auto const i = pick(rng);
        if (std::abs(grad[i]) < 1e-5) continue;
        double const keep = params[i];
        double const h = 1e-5;
        params[i] = keep + h;
        double const up = loss();
        params[i] = keep - h;
        double const down = loss();
        params[i] = keep;
        double const numeric = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(numeric - grad[i]) / std::max(std::abs(numeric), std::abs(grad[i])));
        ++checked;
    }
    EXPECT_EQ(checked, want);
    return worst;
}

} // namespace

TEST(JointLoss, Endpoints) {
    EXPECT_EQ(joint_loss(2.0, 1.0, 1.0), 1.0);
    EXPECT_EQ(joint_loss(2.0, 1.0, 0.0), 2.0);
    EXPECT_EQ(joint_loss(2.0, 1.0, 0.7), (1.0 - 0.7) * 2.0 + 0.7 * 1.0);
    EXPECT_NEAR(joint_loss(2.0, 1.0, 0.7), 1.3, 1e-15);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 20.0);
    for (int i = 0; i < 1000; ++i) {
        double const a = u(rng), b = u(rng);
        EXPECT_EQ(joint_loss(a, b, 1.0), b);
        EXPECT_EQ(joint_loss(a, b, 0.0), a);
    }
}

TEST(MaskedNll, UniformModelGivesLogVocab) {
    ToySetup s;
    for (double& a : s.model.adapter()) a = 0.0;
    // zero output head: every logit is 0, so the prediction is uniform
    auto const lm_head_size = s.model.config().vocab_size * s.model.config().d_model;
    std::fill(s.model.base().end() - static_cast<std::ptrdiff_t>(lm_head_size), s.model.base().end(), 0.0);
    auto const b = assemble_sft_batch(s.records[0], s.tok, 512);
    EXPECT_NEAR(loss_masked_nll(b, s.model).value, std::log(static_cast<double>(s.tok.vocab_size())), 1e-12);
}

TEST(MaskedNll, AllFalseMaskRejected) {
    ToySetup s;
    auto b = assemble_sft_batch(s.records[0], s.tok, 512);
    std::fill(b.loss_mask.begin(), b.loss_mask.end(), false);
    EXPECT_THROW((void)loss_masked_nll(b, s.model), PreconditionError);
}

TEST(MaskedNll, PerturbingMaskedOutLabelsIsExactNoOp) {
    ToySetup s;
    std::mt19937_64 rng(99);
    auto const templates = PgTemplate::ablations();
    for (int trial = 0; trial < 100; ++trial) {
        auto const r = os_record(static_cast<std::size_t>(trial), 1 + trial % 3);
        TokenBatch b = trial % 2 == 0 ? assemble_sft_batch(r, s.tok, 512)
                                      : assemble_pg_batch(r, s.prompt, templates[trial % templates.size()], s.tok, 512);
        double const base = loss_masked_nll(b, s.model).value;
        std::vector<int> labels = b.token_ids;
        std::uniform_int_distribution<int> any(0, static_cast<int>(s.tok.vocab_size()) - 1);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (!b.loss_mask[i]) labels[i] = any(rng);
        }
        EXPECT_EQ(loss_masked_nll(b, s.model, true, labels).value, base);
        // and a masked-in perturbation does change it
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (b.loss_mask[i]) {
                labels[i] = (labels[i] + 1) % static_cast<int>(s.tok.vocab_size());
                break;
            }
        }
        EXPECT_NE(loss_masked_nll(b, s.model, true, labels).value, base);
    }
}

TEST(MaskedNll, GradientsMatchFiniteDifferences) {
    ToySetup s;
    for (auto const& b : {assemble_sft_batch(s.records[1], s.tok, 512),
                          assemble_pg_batch(s.records[1], s.prompt, PgTemplate::prompt_and_reason(), s.tok, 512)}) {
        auto const g = loss_masked_nll_with_grad(b, s.model);
        auto loss = [&] { return loss_masked_nll(b, s.model).value; };
        EXPECT_LE(worst_relative_error(s.model.adapter(), g.grads.adapter, loss, 60, 1), 1e-4);
        EXPECT_LE(worst_relative_error(s.model.base(), g.grads.base, loss, 60, 2), 1e-4);
    }
}

TEST(Kld, IdenticalContextsGiveZero) {
    ToySetup s;
    for (double& a : s.model.adapter()) a = 0.0;
    KldPair pair;
    pair.student = assemble_sft_batch(s.records[0], s.tok, 512);
    pair.teacher_tokens = pair.student.token_ids;
    pair.offset = 0;
    EXPECT_EQ(loss_kld(pair, s.model).value, 0.0);
}

TEST(Kld, OneHotTeacherUniformStudent) {
    std::size_t const V = 7;
    Eigen::RowVectorXd log_t = Eigen::RowVectorXd::Constant(V, -std::numeric_limits<double>::infinity());
    log_t[3] = 0.0;
    Eigen::RowVectorXd const log_s = Eigen::RowVectorXd::Constant(V, -std::log(static_cast<double>(V)));
    EXPECT_NEAR(kl_divergence(log_t, log_s), std::log(7.0), 1e-15);
}

TEST(Kld, TwoTokenHandComputed) {
    Eigen::RowVectorXd log_t(2), log_s(2);
    log_t << std::log(0.25), std::log(0.75);
    log_s << std::log(0.5), std::log(0.5);
    double const expected = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
    EXPECT_NEAR(kl_divergence(log_t, log_s), expected, 1e-15);
    EXPECT_NEAR(expected, 0.130812035941137, 1e-12);
}

TEST(Kld, NonNegativeAndGradientChecked) {
    ToySetup s;
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        for (double& a : s.model.adapter()) a = std::normal_distribution<double>(0.0, 0.4)(rng);
        auto const pair = assemble_kld_pair(s.records[static_cast<std::size_t>(trial) % 4], s.prompt, s.tok, 512);
        EXPECT_GE(loss_kld(pair, s.model, false).value, 0.0);
    }
    auto const pair = assemble_kld_pair(s.records[2], s.prompt, s.tok, 512);
    auto const g = loss_kld(pair, s.model);
    auto loss = [&] { return loss_kld(pair, s.model, false).value; };
    EXPECT_LE(worst_relative_error(s.model.adapter(), g.grads.adapter, loss, 60, 3), 1e-4);
}

TEST(MaskedNll, NonFiniteIsNumericError) {
    ToySetup s;
    s.model.base().back() = std::numeric_limits<double>::quiet_NaN();
    auto const b = assemble_sft_batch(s.records[0], s.tok, 512);
    EXPECT_THROW((void)loss_masked_nll(b, s.model), NumericError);
}
