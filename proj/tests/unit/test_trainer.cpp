#include "genpi/adapter_budget.hpp"
#include "genpi/adapter_registry.hpp"
#include "genpi/local_backend.hpp"
#include "genpi/trainer.hpp"

#include "fixtures.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace genpi;
using namespace genpi::test_support;

namespace {

struct Desk {
    std::vector<SynthesisRecord> records = os_records(8, 2);
    PromptSpec prompt = os_prompt();
    PieceTokenizer tok = fixture_tokenizer(records, prompt, 200);

    [[nodiscard]] TinyTransformer model(std::size_t rank = 4) const {
        TransformerConfig c;
        c.vocab_size = tok.vocab_size();
        c.d_model = 16;
        c.n_layers = 2;
        c.n_heads = 2;
        c.d_ff = 32;
        c.max_seq_len = 512;
        c.seed = 11;
        return TinyTransformer(c, AdapterConfig{rank, 8.0, 3});
    }

    [[nodiscard]] static TrainConfig config(TrainMode mode) {
        TrainConfig t;
        t.mode = mode;
        t.adapter_rank = 4;
        t.learning_rate = 1e-2;
        t.batch_size = 4;
        t.epochs = 3;
        t.seed = 42;
        if (mode == TrainMode::prepend) t.prepend_probability = 0.5;
        return t;
    }
};

} // namespace

TEST(Trainer, GenpiAtLambdaOneEqualsSftOnly) {
    Desk d;
    auto m1 = d.model();
    auto m2 = d.model();
    auto c1 = Desk::config(TrainMode::genpi);
    c1.lambda = 1.0;
    auto const a1 = train(d.records, d.prompt, c1, m1, d.tok);
    auto const a2 = train(d.records, d.prompt, Desk::config(TrainMode::sft_only), m2, d.tok);
    EXPECT_EQ(a1.metrics.step_loss, a2.metrics.step_loss);
    EXPECT_EQ(m1.adapter(), m2.adapter());
}

TEST(Trainer, SeqKdMatchesSftOnly) {
    Desk d;
    auto m1 = d.model();
    auto m2 = d.model();
    auto const a1 = train(d.records, d.prompt, Desk::config(TrainMode::seqkd), m1, d.tok);
    auto const a2 = train(d.records, d.prompt, Desk::config(TrainMode::sft_only), m2, d.tok);
    EXPECT_EQ(a1.metrics.step_loss, a2.metrics.step_loss);
    EXPECT_EQ(a1.mode, "seqkd");
}

TEST(Trainer, BaseFrozenAndDeterministic) {
    Desk d;
    for (auto mode : {TrainMode::genpi, TrainMode::kld, TrainMode::seqkd_kld, TrainMode::prepend}) {
        auto m1 = d.model();
        auto m2 = d.model();
        auto const before = m1.base();
        auto const a1 = train(d.records, d.prompt, Desk::config(mode), m1, d.tok);
        auto const a2 = train(d.records, d.prompt, Desk::config(mode), m2, d.tok);
        EXPECT_EQ(m1.base(), before) << to_string(mode);
        EXPECT_EQ(m1.adapter(), m2.adapter()) << to_string(mode);
        EXPECT_EQ(a1.metrics.step_loss, a2.metrics.step_loss) << to_string(mode);
        EXPECT_EQ(a1.metrics.epoch_loss.size(), 3u);
    }
}

TEST(Trainer, LossDecreasesAcrossEpochs) {
    Desk d;
    for (auto mode : {TrainMode::genpi, TrainMode::sft_only}) {
        auto m = d.model();
        auto const a = train(d.records, d.prompt, Desk::config(mode), m, d.tok);
        for (std::size_t e = 1; e < a.metrics.epoch_loss.size(); ++e) {
            EXPECT_LT(a.metrics.epoch_loss[e], a.metrics.epoch_loss[e - 1]) << to_string(mode) << " epoch " << e;
        }
    }
}

TEST(Trainer, GenpiStepLossIsJointOfComponents) {
    Desk d;
    auto m = d.model();
    auto const a = train(d.records, d.prompt, Desk::config(TrainMode::genpi), m, d.tok);
    for (std::size_t i = 0; i < a.metrics.step_loss.size(); ++i) {
        EXPECT_EQ(a.metrics.step_loss[i], joint_loss(a.metrics.step_pg[i], a.metrics.step_sft[i], 0.7));
    }
}

TEST(Trainer, WarmupSchedule) {
    TrainConfig c;
    c.learning_rate = 1.0;
    c.warmup_fraction = 0.03;
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 0, 100), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 2, 100), 1.0);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 50, 100), 1.0);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 0, 10), 1.0);  // ceil(0.3) = 1 warmup step
}

TEST(Trainer, ConfigErrors) {
    Desk d;
    auto m = d.model();
    EXPECT_THROW((void)train({}, d.prompt, Desk::config(TrainMode::genpi), m, d.tok), ConfigError);
    auto c = Desk::config(TrainMode::genpi);
    c.lambda.reset();
    EXPECT_THROW(c.validate(), ConfigError);
    c = Desk::config(TrainMode::prepend);
    c.prepend_probability.reset();
    EXPECT_THROW(c.validate(), ConfigError);
    c = Desk::config(TrainMode::genpi);
    c.lambda = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = Desk::config(TrainMode::genpi);
    c.adapter_rank = 8;
    EXPECT_THROW((void)train(d.records, d.prompt, c, m, d.tok), ConfigError);
}

TEST(Trainer, ConfigJsonRoundTrip) {
    auto c = Desk::config(TrainMode::prepend);
    nlohmann::json j = c;
    auto const back = j.get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(config_hash(back), config_hash(c));
    c.seed += 1;
    EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Trainer, DivergenceRollsBackAndSavesLastGood) {
    Desk d;
    test_support::TempDir dir;
    auto m = d.model();
    m.base().back() = std::numeric_limits<double>::quiet_NaN();
    TrainOptions opt;
    opt.output_dir = dir.path();
    EXPECT_THROW((void)train(d.records, d.prompt, Desk::config(TrainMode::sft_only), m, d.tok, opt), NumericError);
    EXPECT_TRUE(std::filesystem::exists(dir / "last_good_adapter.bin"));
    auto fresh = d.model();
    EXPECT_EQ(m.adapter(), fresh.adapter());
}

TEST(Trainer, WritesArtifactDirectory) {
    Desk d;
    test_support::TempDir dir;
    auto m = d.model();
    TrainOptions opt;
    opt.output_dir = dir.path();
    auto const a = train(d.records, d.prompt, Desk::config(TrainMode::genpi), m, d.tok, opt);
    auto const manifest = read_json_file(dir / "manifest.json");
    EXPECT_EQ(manifest.at("prompt_name"), "os");
    EXPECT_EQ(manifest.at("mode"), "genpi");
    EXPECT_EQ(manifest.at("rank"), 4);
    EXPECT_EQ(manifest.at("config_hash"), a.config_hash);
    EXPECT_EQ(manifest.at("trainable_param_count"), m.adapter_parameter_count());
    std::ifstream metrics(dir / "metrics.jsonl");
    std::size_t lines = 0;
    for (std::string line; std::getline(metrics, line);) ++lines;
    EXPECT_EQ(lines, a.metrics.step_loss.size());
    auto reloaded = d.model();
    reloaded.load_adapter(a.checkpoint_path);
    EXPECT_EQ(reloaded.adapter(), m.adapter());
}

TEST(Registry, RegisterListActivate) {
    Desk d;
    test_support::TempDir dir;
    AdapterRegistry reg(dir / "registry");
    auto m = d.model();
    TrainOptions opt;
    opt.output_dir = dir / "os";
    (void)train(d.records, d.prompt, Desk::config(TrainMode::genpi), m, d.tok, opt);
    reg.register_adapter("os", dir / "os" / "manifest.json");
    EXPECT_EQ(reg.list().size(), 1u);

    auto target = d.model();
    auto const base_before = target.base();
    auto const art = reg.activate("os", target);
    EXPECT_EQ(art.mode, "genpi");
    EXPECT_EQ(target.adapter(), m.adapter());
    EXPECT_EQ(target.base(), base_before);
    EXPECT_EQ(reg.active().value_or(""), "os");
    EXPECT_THROW((void)reg.activate("missing", target), LookupError);
}

TEST(Registry, AlternatingAdaptersChangeGeneration) {
    Desk d;
    test_support::TempDir dir;
    AdapterRegistry reg(dir / "registry");
    // second prompt: same records, different answer text, trained separately
    auto other = d.records;
    for (auto& r : other) r.teacher_conversation.turns.back().text = "Think: skip.\nAct: finish";
    auto m = d.model();
    for (auto const& [name, recs] : {std::pair{std::string("os"), d.records}, std::pair{std::string("alt"), other}}) {
        TrainOptions opt;
        opt.output_dir = dir / name;
        auto c = Desk::config(TrainMode::sft_only);
        c.epochs = 6;
        (void)train(recs, d.prompt, c, m, d.tok, opt);
        reg.register_adapter(name, dir / name / "manifest.json");
    }
    auto model = d.model();
    LocalModelBackend backend("local", model, d.tok, true);
    SamplingParams p;
    p.max_new_tokens = 24;
    Conversation q{{d.records[0].pseudo_input}};
    (void)reg.activate("os", model);
    auto const a = backend.complete(q, p);
    (void)reg.activate("alt", model);
    auto const b = backend.complete(q, p);
    EXPECT_NE(a, b);
}

TEST(LocalBackend, GreedyIsDeterministicAndBounded) {
    Desk d;
    auto m = d.model();
    LocalModelBackend backend("local", m, d.tok, false);
    EXPECT_TRUE(backend.handle().has(Capability::score_logits));
    SamplingParams p;
    p.max_new_tokens = 10;
    Conversation q{{user_turn("hello")}};
    auto const a = backend.complete(q, p);
    EXPECT_EQ(a, backend.complete(q, p));
    EXPECT_LE(d.tok.encode(a).size(), 10u * 4);
    p.temperature = 1.0;
    p.top_p = 0.9;
    p.seed = 5;
    EXPECT_EQ(backend.complete(q, p), backend.complete(q, p));
}

TEST(LocalBackend, OverlongContextIsLengthError) {
    Desk d;
    auto m = d.model();
    LocalModelBackend backend("local", m, d.tok, false);
    Conversation q{{user_turn(std::string(600, 'z'))}};
    EXPECT_THROW((void)backend.complete(q, {}), LengthError);
}

TEST(AdapterBudget, EightBClassRankSixteen) {
    auto const shape = eight_b_shape();
    auto const adapters = adapter_parameter_count(shape, 16);
    auto const base = base_parameter_count(shape);
    // independent tally: per layer, rank * (fan_in + fan_out) over the seven projections
    std::uint64_t const per_layer = 16 * ((4096 + 4096) + 2 * (4096 + 1024) + (4096 + 4096) + 2 * (4096 + 14336) +
                                          (14336 + 4096));
    EXPECT_EQ(per_layer, 1'310'720u);
    EXPECT_EQ(adapters, 32 * per_layer);
    EXPECT_EQ(base, 8'030'261'248u);
    double const fraction = static_cast<double>(adapters) / static_cast<double>(base);
    EXPECT_GE(fraction, 0.004);
    EXPECT_LE(fraction, 0.006);
}
