#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "sdda/trainer.hpp"

using namespace sdda;

namespace {

ExperimentConfig tiny_config(Variant v) {
    ExperimentConfig cfg;
    cfg.variant = v;
    cfg.data.samples = 500;
    cfg.epochs = 3;
    cfg.generated_count = 300;
    cfg.pretrain.epochs = 80;
    return cfg;
}

// One shared pretraining for the tiny two-moons setup.
const RunContext& tiny_context() {
    static const RunContext ctx = prepare_run(tiny_config(Variant::Sdda));
    return ctx;
}

RunContext with_variant(Variant v) {
    const RunContext& base = tiny_context();
    ExperimentConfig cfg = tiny_config(v);
    return prepare_run(cfg, base.source_classifier);
}

std::string metrics_text(const TrainReport& r) {
    std::ostringstream out;
    write_metrics_csv(r.records, out);
    return out.str();
}

std::vector<std::uint64_t> hashes(const Networks& n) {
    return {parameter_hash(n.feature_extractor), parameter_hash(n.classifier), parameter_hash(n.generator),
            parameter_hash(n.gan_discriminator), parameter_hash(n.domain_discriminator)};
}

} // namespace

TEST(Stall, NonDecreasingRunIsFlagged) {
    std::vector<double> rising;
    for (int i = 0; i < 11; ++i) rising.push_back(0.5 + 0.1 * i);
    EXPECT_TRUE(loss_stalled(rising, 10));
    rising.pop_back();
    EXPECT_FALSE(loss_stalled(rising, 10));

    std::vector<double> flat(30, 0.7);
    EXPECT_TRUE(loss_stalled(flat, 10));
}

TEST(Stall, FluctuatingOrFallingIsNotFlagged) {
    std::vector<double> falling, zigzag;
    for (int i = 0; i < 50; ++i) {
        falling.push_back(2.0 - 0.01 * i);
        zigzag.push_back(0.7 + 0.01 * i + (i % 4 == 3 ? -0.05 : 0.0));
    }
    EXPECT_FALSE(loss_stalled(falling, 10));
    EXPECT_FALSE(loss_stalled(zigzag, 10));
    EXPECT_FALSE(loss_stalled({}, 10));
}

TEST(Config, VariantRequirements) {
    ExperimentConfig cfg = tiny_config(Variant::SddaG);
    cfg.generated_count = 0;
    EXPECT_THROW(cfg.validate(), ContractError);
    cfg = tiny_config(Variant::Sdda);
    EXPECT_EQ(cfg.mu_gate_epoch(), 1u);
    cfg.epochs = 200;
    EXPECT_EQ(cfg.mu_gate_epoch(), 50u);
    EXPECT_EQ(cfg.effective_schedule().mu_gate, 50u);
}

TEST(Domains, TargetLabelsOnlyInTestSplit) {
    const RunContext& ctx = tiny_context();
    EXPECT_EQ(ctx.domains.target_train.domain, DomainTag::Target);
    EXPECT_EQ(ctx.domains.target_train.size() + ctx.domains.target_test.size(), 500u);
    EXPECT_EQ(ctx.domains.target_test.domain, DomainTag::Target);
}

TEST(Baseline, IdentityShiftMatchesSourceAccuracy) {
    ExperimentConfig cfg = tiny_config(Variant::Baseline);
    cfg.data.samples = 2000;
    cfg.data.shift = ShiftSpec{};
    const RunContext ctx = prepare_run(cfg);
    const TrainReport r = train_baseline(ctx);
    const double source = accuracy(ctx.source_classifier, ctx.domains.source_test.read());
    EXPECT_NEAR(r.final_target_accuracy(), source, 0.02);
}

TEST(GenerateSamples, UniformLabelsAndDeterminism) {
    const MlpNetwork g = init_mlp(arch::generator(8, 2, 2), 4);
    const DomainDataset a = generate_samples(g, 1000, 2, 9);
    const auto ones = static_cast<double>(std::count(a.labels.begin(), a.labels.end(), 1));
    EXPECT_NEAR(ones, 500.0, 41.0);
    EXPECT_EQ(a.features.shape, (Shape{1000, 2}));
    EXPECT_EQ(a.domain, DomainTag::Generated);
    EXPECT_EQ(generate_samples(g, 1000, 2, 9).features.values, a.features.values);
    EXPECT_THROW(generate_samples(g, 0, 2, 9), ContractError);
}

TEST(WarmStart, DefaultShapesCopyEveryLayer) {
    const RunContext& ctx = tiny_context();
    Networks nets = init_networks(ctx.config, 2, 1);
    EXPECT_EQ(warm_start_classifier(ctx.source_classifier, nets.feature_extractor, nets.classifier),
              (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(nets.feature_extractor.weights[1].values, ctx.source_classifier.weights[1].values);
    EXPECT_EQ(nets.classifier.weights[0].values, ctx.source_classifier.weights[2].values);
    EXPECT_EQ(nets.classifier.biases[0].values, ctx.source_classifier.biases[2].values);
}

TEST(WarmStart, IncompatibleWidthCopiesFrontOnly) {
    const RunContext& ctx = tiny_context();
    MlpNetwork f = init_mlp(mlp_spec({2, 64, 32}, Head::Features), 1);
    MlpNetwork c = init_mlp(mlp_spec({32, 2}, Head::Logits), 2);
    EXPECT_EQ(warm_start_classifier(ctx.source_classifier, f, c), (std::vector<std::size_t>{0}));
    MlpNetwork f2 = init_mlp(mlp_spec({2, 16, 16}, Head::Features), 1);
    MlpNetwork c2 = init_mlp(mlp_spec({16, 2}, Head::Logits), 2);
    EXPECT_TRUE(warm_start_classifier(ctx.source_classifier, f2, c2).empty());
}

TEST(Routing, EachSubStepTouchesOnlyItsGroup) {
    const RunContext& ctx = tiny_context();
    const ExperimentConfig& cfg = ctx.config;
    Networks nets = init_networks(cfg, 2, 3);
    const auto dg = detail::group_parameters({&nets.gan_discriminator});
    const auto g = detail::group_parameters({&nets.generator});
    const auto adapt = detail::group_parameters({&nets.feature_extractor, &nets.classifier, &nets.domain_discriminator});
    AdamState dg_adam = make_adam_state(dg, cfg.adam), g_adam = make_adam_state(g, cfg.adam),
              adapt_adam = make_adam_state(adapt, cfg.adapt_adam);
    const Tensor& target = ctx.domains.target_train.features;
    const std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5, 6, 7};
    const Tensor batch = detail::gather_rows(target, rows);
    const std::vector<int> labels{0, 1, 0, 1, 1, 0, 1, 0};
    Rng rng(5);
    const GeneratorInput input = sample_generator_input(labels, 2, cfg.latent_dim, rng);
    const std::uint64_t pc = parameter_hash(ctx.source_classifier);

    auto before = hashes(nets);
    detail::discriminator_step(nets.gan_discriminator, nets.generator, batch, input, dg, dg_adam, 0, 0);
    auto after = hashes(nets);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(before[i] != after[i], i == 3) << i;

    before = after;
    const Coefficients c{0.1, 1.0, 1.0, 1.0, 1.0};
    detail::generator_step(nets.generator, nets.gan_discriminator, ctx.source_classifier, input, labels, c, LossFlags{},
                           false, g, g_adam, 0, 0);
    after = hashes(nets);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(before[i] != after[i], i == 2) << i;

    before = after;
    detail::adaptation_step(nets, generate(nets.generator, input), labels, batch, 1.0, 1.0, LossFlags{},
                            detail::AlignObjective::Grl, 0.0, adapt, adapt_adam, 0, 0);
    after = hashes(nets);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(before[i] != after[i], i == 0 || i == 1 || i == 4) << i;
    EXPECT_EQ(parameter_hash(ctx.source_classifier), pc);
}

TEST(Routing, NoAdaptationSignalLeavesClassifierUntouched) {
    RunContext ctx = with_variant(Variant::Sdda);
    ctx.config.schedule.lambda = 0.0;
    ctx.config.mu_gate_fraction = 1.0;
    const TrainReport r = train_sdda(ctx);
    const Networks fresh = init_networks(ctx.config, 2, RunSeeds(ctx.config.seed).init);
    EXPECT_EQ(parameter_hash(r.networks->classifier), parameter_hash(fresh.classifier));
    EXPECT_EQ(parameter_hash(r.networks->feature_extractor), parameter_hash(fresh.feature_extractor));
    EXPECT_NE(parameter_hash(r.networks->domain_discriminator), parameter_hash(fresh.domain_discriminator));
    EXPECT_DOUBLE_EQ(r.final_target_accuracy(), accuracy(fresh.feature_extractor, fresh.classifier, ctx.domains.target_test));
}

TEST(Firewall, SourceNeverReadOutsideOracle) {
    for (Variant v : {Variant::Baseline, Variant::Sdda, Variant::SddaP, Variant::SddaG, Variant::PluginMmd}) {
        const RunContext ctx = with_variant(v);
        const TrainReport r = run_variant(ctx);
        EXPECT_EQ(r.source_reads, 0u) << variant_name(v);
        EXPECT_EQ(ctx.domains.source_train.access_count(), 0u) << variant_name(v);
        EXPECT_EQ(r.classifier_hash_before, r.classifier_hash_after) << variant_name(v);
        EXPECT_EQ(r.classifier_hash_after, parameter_hash(tiny_context().source_classifier));
    }
    const TrainReport oracle = run_variant(with_variant(Variant::Oracle));
    EXPECT_GT(oracle.source_reads, 0u);
    EXPECT_EQ(oracle.classifier_hash_before, oracle.classifier_hash_after);
}

TEST(Determinism, IdenticalMetricsAcrossRuns) {
    for (Variant v : {Variant::Sdda, Variant::SddaG, Variant::Oracle}) {
        const std::string a = metrics_text(run_variant(with_variant(v)));
        const std::string b = metrics_text(run_variant(with_variant(v)));
        EXPECT_EQ(a, b) << variant_name(v);
    }
    // the full pipeline including pretraining
    ExperimentConfig cfg = tiny_config(Variant::Sdda);
    cfg.epochs = 2;
    EXPECT_EQ(metrics_text(run_experiment(cfg)), metrics_text(run_experiment(cfg)));
}

TEST(Report, OneRecordPerEvaluationEpoch) {
    RunContext ctx = with_variant(Variant::Sdda);
    ctx.config.epochs = 5;
    ctx.config.eval_every = 2;
    const TrainReport r = train_sdda(ctx);
    ASSERT_EQ(r.records.size(), 3u);
    EXPECT_EQ(r.records[0].epoch, 1u);
    EXPECT_EQ(r.records[1].epoch, 3u);
    EXPECT_EQ(r.records[2].epoch, 4u);
    for (const auto& rec : r.records) {
        EXPECT_TRUE(rec.target_accuracy.has_value());
        for (LossTerm t : {LossTerm::Lik, LossTerm::AdvG, LossTerm::AdvD, LossTerm::Crs, LossTerm::Dis, LossTerm::Cls}) {
            EXPECT_TRUE(rec.losses.enabled(t)) << loss_term_name(t);
        }
        EXPECT_FALSE(rec.losses.enabled(LossTerm::Mmd));
    }
    EXPECT_EQ(r.generator_loss_series.size(), 5u);
}

TEST(Report, DisabledTermsAreAbsent) {
    RunContext ctx = with_variant(Variant::Sdda);
    ctx.config.losses.adv = false;
    ctx.config.losses.lik = false;
    const TrainReport r = train_sdda(ctx);
    const auto& rec = r.records.back();
    EXPECT_FALSE(rec.losses.enabled(LossTerm::Lik));
    EXPECT_FALSE(rec.losses.enabled(LossTerm::AdvG));
    EXPECT_TRUE(rec.losses.enabled(LossTerm::Crs));
    // the generator loss is still monitored for the stall check
    EXPECT_EQ(r.generator_loss_series.size(), ctx.config.epochs);
}

TEST(Plugin, GrlReproducesSdda) {
    const RunContext ctx = with_variant(Variant::Sdda);
    EXPECT_EQ(metrics_text(train_plugin(ctx, PluginObjective::Grl)), metrics_text(train_sdda(ctx)));
    EXPECT_THROW(train_plugin(ctx, "wasserstein"), ContractError);
}

TEST(Plugin, MmdLogsItsTerm) {
    const TrainReport r = run_variant(with_variant(Variant::PluginMmd));
    for (const auto& rec : r.records) {
        EXPECT_TRUE(rec.losses.enabled(LossTerm::Mmd));
        EXPECT_FALSE(rec.losses.enabled(LossTerm::Dis));
    }
}

TEST(SddaG, FrozenGeneratorAndSampleSet) {
    const RunContext ctx = with_variant(Variant::SddaG);
    const TrainReport r = train_sdda_g(ctx);
    ASSERT_TRUE(r.generated.has_value());
    EXPECT_EQ(r.generated->size(), 300u);
    EXPECT_TRUE(r.networks->generator.frozen);
    // phase 1 logs generation losses, phase 2 adaptation losses
    EXPECT_EQ(r.records.size(), 6u);
    EXPECT_TRUE(r.records.front().losses.enabled(LossTerm::AdvG));
    EXPECT_FALSE(r.records.front().target_accuracy.has_value());
    EXPECT_TRUE(r.records.back().losses.enabled(LossTerm::Cls));
    EXPECT_TRUE(r.records.back().target_accuracy.has_value());
    // the frozen generator still reproduces the phase-2 sample set
    const DomainDataset again =
        generate_samples(r.networks->generator, 300, 2, RunSeeds(ctx.config.seed).latent ^ 0xC0FFEEULL);
    EXPECT_EQ(again.features.values, r.generated->features.values);
}

TEST(Metrics, CsvRoundTrip) {
    const TrainReport r = run_variant(with_variant(Variant::Sdda));
    std::stringstream buf;
    write_metrics_csv(r.records, buf);
    EXPECT_EQ(read_metrics_csv(buf), r.records);
}

TEST(Metrics, MissingValuesAreEmptyFields) {
    MetricsRecord rec;
    rec.run_id = "x";
    rec.losses.set(LossTerm::Cls, 0.5);
    const std::string row = metrics_row(rec);
    EXPECT_EQ(row, "x,0,0,,,,,,0.5,,,,,,");
    EXPECT_EQ(static_cast<std::size_t>(std::count(row.begin(), row.end(), ',')) + 1, kMetricsColumns.size());
    rec.run_id = "a,b";
    EXPECT_THROW(metrics_row(rec), FormatError);
    std::istringstream wrong("# metrics-v2\n");
    EXPECT_THROW(read_metrics_csv(wrong), VersionError);
}

TEST(Training, NonFiniteInputAborts) {
    RunContext ctx = with_variant(Variant::Sdda);
    for (std::size_t i = 0; i < 20; ++i) ctx.domains.target_train.features[i] = std::nan("");
    try {
        train_sdda(ctx);
        FAIL() << "expected an abort";
    } catch (const TrainingAborted& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 0 step"), std::string::npos) << e.what();
    }
}

TEST(Training, ClassifierMustBeFrozen) {
    MlpNetwork pc = tiny_context().source_classifier;
    pc.frozen = false;
    EXPECT_THROW(prepare_run(tiny_config(Variant::Sdda), pc), ContractError);
}
