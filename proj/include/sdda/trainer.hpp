#pragma once

// Training variants:
//   baseline    frozen source classifier evaluated on the target
//   sdda        generator and adaptation trained jointly
//   sdda_p      sdda with F and C warm-started from the source classifier
//   sdda_g      generator trained first, frozen, then N_g samples adapted on
//   oracle      GRL adaptation on real labelled source samples
//   plugin_mmd  sdda with the domain discriminator replaced by MMD on features
//
// Each joint step runs three updates in order: D_g, then G, then F + C + D_d.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdda/adam.hpp"
#include "sdda/domains.hpp"
#include "sdda/eval.hpp"
#include "sdda/losses.hpp"
#include "sdda/metrics.hpp"
#include "sdda/networks.hpp"
#include "sdda/random.hpp"

namespace sdda {

enum class Variant { Baseline, Sdda, SddaP, SddaG, Oracle, PluginMmd };

inline const char* variant_name(Variant v) {
    switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::Sdda: return "sdda";
    case Variant::SddaP: return "sdda_p";
    case Variant::SddaG: return "sdda_g";
    case Variant::Oracle: return "oracle";
    case Variant::PluginMmd: return "plugin_mmd";
    }
    return "?";
}

inline std::optional<Variant> parse_variant(const std::string& s) {
    for (Variant v : {Variant::Baseline, Variant::Sdda, Variant::SddaP, Variant::SddaG, Variant::Oracle, Variant::PluginMmd}) {
        if (s == variant_name(v)) return v;
    }
    return std::nullopt;
}

enum class DatasetKind { TwoMoons, Blobs };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::TwoMoons;
    std::size_t samples = 2000; // per domain
    double noise = 0.1;         // two-moons coordinate noise
    std::size_t classes = 2;    // blobs only; two-moons is always 2
    double blob_spread = 0.5;
    double blob_radius = 3.0;
    ShiftSpec shift{45.0, {0.5, -0.3}, {1.0, 1.0}, 0.0};
    double test_fraction = 0.2;
};

struct ExperimentConfig {
    Variant variant = Variant::Sdda;
    DatasetSpec data;
    std::size_t hidden = 64;
    std::size_t latent_dim = 8;
    CoefficientSchedule schedule;
    double mu_gate_fraction = 0.25; // mu switches on at this fraction of epochs
    AdamHyper adam;                                // D_g and G
    AdamHyper adapt_adam{1e-3, 0.9, 0.999, 1e-8};  // F, C and D_d
    PretrainSettings pretrain;
    std::size_t epochs = 200;
    std::size_t generation_epochs = 0; // sdda_g phase 1; 0 means `epochs`
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t generated_count = 2000; // N_g for sdda_g
    LossFlags losses;
    bool saturating_generator = false;
    double mmd_bandwidth = 0.0; // 0 selects the median heuristic per batch
    std::size_t eval_every = 1;
    std::size_t discrepancy_every = 0; // 0 disables d_A tracking
    std::size_t stall_window = 10;
    std::string run_id = "run";

    std::size_t classes() const { return data.kind == DatasetKind::TwoMoons ? 2 : data.classes; }

    std::size_t mu_gate_epoch() const {
        return static_cast<std::size_t>(std::llround(mu_gate_fraction * static_cast<double>(epochs)));
    }

    CoefficientSchedule effective_schedule() const {
        CoefficientSchedule s = schedule;
        s.mu_gate = mu_gate_epoch();
        return s;
    }

    void validate() const {
        schedule.validate();
        if (epochs == 0) throw ContractError("config: epochs must be positive");
        if (batch_size == 0) throw ContractError("config: batch_size must be positive");
        if (latent_dim == 0 || hidden == 0) throw ContractError("config: network widths must be positive");
        if (!(mu_gate_fraction >= 0.0 && mu_gate_fraction <= 1.0)) throw ContractError("config: mu_gate_fraction must be in [0, 1]");
        if (variant == Variant::SddaG && generated_count == 0) throw ContractError("config: sdda_g requires generated_count > 0");
        if (data.samples < 10) throw ContractError("config: data.samples must be at least 10");
        if (data.kind == DatasetKind::Blobs && data.classes < 2) throw ContractError("config: blobs need at least 2 classes");
        if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) throw ContractError("config: data.test_fraction must be in (0, 1)");
        if (eval_every == 0) throw ContractError("config: eval_every must be positive");
        if (stall_window == 0) throw ContractError("config: stall_window must be positive");
        if (!(mmd_bandwidth >= 0.0)) throw ContractError("config: mmd_bandwidth must be >= 0");
        data.shift.validate(2);
    }
};

// Independent seeds for every random component of one run.
struct RunSeeds {
    std::uint64_t source_data, target_data, source_split, target_split, shift, pretrain, init, batches, latent, probe;

    explicit RunSeeds(std::uint64_t seed) {
        Rng rng(seed);
        source_data = rng.split();
        target_data = rng.split();
        source_split = rng.split();
        target_split = rng.split();
        shift = rng.split();
        pretrain = rng.split();
        init = rng.split();
        batches = rng.split();
        latent = rng.split();
        probe = rng.split();
    }
};

// Datasets of one run. The source sits behind an access counter; the target
// training split exists only without labels.
struct DomainPair {
    GuardedDataset source_train;
    GuardedDataset source_test;
    UnlabeledDataset target_train;
    DomainDataset target_test; // labels for evaluation only
    std::size_t classes = 2;
};

inline DomainDataset make_source(const ExperimentConfig& cfg, std::uint64_t seed) {
    const DatasetSpec& d = cfg.data;
    DomainDataset out = d.kind == DatasetKind::TwoMoons ? make_two_moons(d.samples, d.noise, seed)
                                                        : make_blobs(d.samples, d.classes, d.blob_spread, d.blob_radius, seed);
    out.domain = DomainTag::Source;
    return out;
}

// The target re-samples the source distribution with a fresh seed, then shifts it.
inline DomainDataset make_target(const ExperimentConfig& cfg, const RunSeeds& seeds) {
    return apply_shift(make_source(cfg, seeds.target_data), cfg.data.shift, seeds.shift);
}

inline DomainPair make_domains(const ExperimentConfig& cfg) {
    const RunSeeds seeds(cfg.seed);
    const std::array<double, 2> fractions{1.0 - cfg.data.test_fraction, cfg.data.test_fraction};
    auto source = split(make_source(cfg, seeds.source_data), fractions, seeds.source_split);
    auto target = split(make_target(cfg, seeds), fractions, seeds.target_split);
    return DomainPair{GuardedDataset(std::move(source[0])), GuardedDataset(std::move(source[1])), target[0].unlabeled(),
                      std::move(target[1]), cfg.classes()};
}

// Pretrains P_c on the source training split (test split for the accuracy gate).
inline PretrainResult pretrain(const ExperimentConfig& cfg, const DomainPair& domains) {
    const RunSeeds seeds(cfg.seed);
    PretrainSettings settings = cfg.pretrain;
    settings.seed = seeds.pretrain;
    const DomainDataset& train = domains.source_train.read();
    const DomainDataset& test = domains.source_test.read();
    DomainDataset all = train;
    all.features = stack_rows(train.features, test.features);
    all.labels.insert(all.labels.end(), test.labels.begin(), test.labels.end());
    return pretrain_source_classifier(all, arch::source_classifier(train.dim(), domains.classes), settings);
}

struct Networks {
    MlpNetwork feature_extractor;
    MlpNetwork classifier;
    MlpNetwork generator;
    MlpNetwork gan_discriminator;
    MlpNetwork domain_discriminator;
};

inline Networks init_networks(const ExperimentConfig& cfg, std::size_t data_dim, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t k = cfg.classes(), h = cfg.hidden;
    auto resize = [&](MlpSpec spec, std::size_t keep_in) {
        // Replace hidden widths of the default architectures with cfg.hidden.
        for (std::size_t i = 1; i + 1 < spec.widths.size(); ++i) spec.widths[i] = h;
        if (keep_in == 0) spec.widths.front() = h;
        if (spec.head == Head::Features) spec.widths.back() = h;
        return spec;
    };
    Networks nets{
        init_mlp(resize(arch::feature_extractor(data_dim), 1), rng.split()),
        init_mlp(resize(arch::adaptive_classifier(k), 0), rng.split()),
        init_mlp(resize(arch::generator(cfg.latent_dim, k, data_dim), 1), rng.split()),
        init_mlp(resize(arch::gan_discriminator(data_dim), 1), rng.split()),
        init_mlp(mlp_spec({h, 32, 1}, Head::SigmoidScalar), rng.split()),
    };
    return nets;
}

// Copies every layer of P_c into the same position of F followed by C when
// the shapes agree. Returns the copied layer indices; an empty list means
// nothing matched and F, C keep their fresh initialisation.
inline std::vector<std::size_t> warm_start_classifier(const MlpNetwork& source_classifier, MlpNetwork& feature_extractor,
                                                      MlpNetwork& classifier) {
    std::vector<std::pair<Tensor*, Tensor*>> stacked;
    for (std::size_t l = 0; l < feature_extractor.weights.size(); ++l) {
        stacked.emplace_back(&feature_extractor.weights[l], &feature_extractor.biases[l]);
    }
    for (std::size_t l = 0; l < classifier.weights.size(); ++l) stacked.emplace_back(&classifier.weights[l], &classifier.biases[l]);
    std::vector<std::size_t> copied;
    const std::size_t n = std::min(stacked.size(), source_classifier.weights.size());
    for (std::size_t l = 0; l < n; ++l) {
        const Tensor& w = source_classifier.weights[l];
        const Tensor& b = source_classifier.biases[l];
        if (w.shape != stacked[l].first->shape || b.shape != stacked[l].second->shape) continue;
        *stacked[l].first = Tensor(w.shape, w.values);
        *stacked[l].second = Tensor(b.shape, b.values);
        copied.push_back(l);
    }
    return copied;
}

// N samples from G with labels drawn uniformly over the classes.
inline DomainDataset generate_samples(const MlpNetwork& generator, std::size_t n, std::size_t classes, std::uint64_t seed) {
    if (n < 1) throw ContractError("generate_samples: need n >= 1");
    if (classes < 1 || generator.spec.input_dim() <= classes) throw ContractError("generate_samples: bad class count");
    Rng rng(seed);
    std::vector<int> labels(n);
    for (int& y : labels) y = static_cast<int>(rng.below(classes));
    const GeneratorInput input = sample_generator_input(labels, classes, generator.spec.input_dim() - classes, rng);
    return DomainDataset{generate(generator, input), std::move(labels), classes, DomainTag::Generated, seed};
}

struct TrainReport {
    ExperimentConfig config;
    std::vector<MetricsRecord> records;
    std::optional<Networks> networks;
    PretrainReport pretrain;
    std::uint64_t classifier_hash_before = 0;
    std::uint64_t classifier_hash_after = 0;
    std::size_t source_reads = 0; // reads of source data after pretraining
    std::vector<std::size_t> warm_started_layers;
    bool diverged_or_stalled = false;
    std::vector<double> generator_loss_series; // epoch means of adv_g, optimised or not
    std::optional<DomainDataset> generated; // sdda_g sample set
    double wall_seconds = 0.0;

    double final_target_accuracy() const {
        for (auto it = records.rbegin(); it != records.rend(); ++it) {
            if (it->target_accuracy) return *it->target_accuracy;
        }
        throw ContractError("report: no target accuracy recorded");
    }
};

// A loss series stalls when it is non-decreasing across `window`
// consecutive epochs (window steps, so window + 1 values). A loss that
// merely fluctuates around a level almost never does this.
inline bool loss_stalled(std::span<const double> series, std::size_t window) {
    std::size_t run = 0;
    for (std::size_t i = 1; i < series.size(); ++i) {
        run = series[i] >= series[i - 1] ? run + 1 : 0;
        if (run >= window) return true;
    }
    return false;
}

namespace detail {

// Running mean of each loss term over the batches of one epoch.
struct EpochLosses {
    std::array<double, kLossTermCount> sum{};
    std::array<std::size_t, kLossTermCount> count{};

    void add(LossTerm t, double v) {
        sum[static_cast<std::size_t>(t)] += v;
        count[static_cast<std::size_t>(t)] += 1;
    }

    LossBundle bundle() const {
        LossBundle b;
        for (std::size_t t = 0; t < kLossTermCount; ++t) {
            if (count[t]) b.values[t] = sum[t] / static_cast<double>(count[t]);
        }
        return b;
    }
};

inline double checked(Var v, LossTerm term, std::size_t epoch, std::size_t step) {
    const double x = v.tape->value(v).item();
    if (!std::isfinite(x)) {
        throw TrainingAborted(std::string("loss ") + loss_term_name(term) + " is not finite at epoch "
                              + std::to_string(epoch) + " step " + std::to_string(step));
    }
    return x;
}

// Runs one training step; non-finite values raised inside it abort the run
// with the epoch and step attached.
template <class Step>
void with_step_context(std::size_t epoch, std::size_t step, Step&& body) {
    try {
        body();
    } catch (const NumericError& e) {
        throw TrainingAborted(std::string(e.what()) + " (epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ")");
    }
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    Tensor out(Shape{rows.size(), x.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(x.values.begin() + static_cast<std::ptrdiff_t>(rows[r] * x.cols()), x.cols(),
                    out.values.begin() + static_cast<std::ptrdiff_t>(r * x.cols()));
    }
    return out;
}

// Shuffled mini-batches of row indices; a trailing partial batch is dropped
// unless it would be the only one.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t size = std::min(batch, n);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start + size <= n; start += size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(start + size));
    }
    return out;
}

inline std::vector<Tensor*> group_parameters(std::initializer_list<MlpNetwork*> nets) {
    std::vector<Tensor*> out;
    for (MlpNetwork* n : nets) {
        for (Tensor* p : n->parameters()) out.push_back(p);
    }
    return out;
}

inline void zero_grads(std::span<Tensor* const> params) {
    for (Tensor* p : params) p->zero_grad();
}

// One update of D_g on (target batch as real, generated batch as fake).
inline double discriminator_step(MlpNetwork& gan_discriminator, const MlpNetwork& generator, const Tensor& target_batch,
                                 const GeneratorInput& input, std::span<Tensor* const> params, AdamState& adam,
                                 std::size_t epoch, std::size_t step) {
    Tape tape;
    zero_grads(params);
    Var fake = generate(generator, tape, input);
    Var loss = gan_discriminator_loss(forward(gan_discriminator, fake), forward(gan_discriminator, tape.constant(target_batch)));
    const double v = checked(loss, LossTerm::AdvD, epoch, step);
    tape.backward(loss);
    adam_step(params, adam);
    return v;
}

struct GeneratorLosses {
    std::optional<double> lik, adv_g, crs;
};

// One update of G on delta*lik + alpha*adv_g + beta*crs. The frozen classifier
// and D_g enter as constants. The adversarial term is always measured for
// monitoring, but only optimised when enabled.
inline GeneratorLosses generator_step(MlpNetwork& generator, const MlpNetwork& gan_discriminator,
                                      const MlpNetwork& source_classifier, const GeneratorInput& input,
                                      std::span<const int> labels, const Coefficients& c, const LossFlags& flags,
                                      bool saturating, std::span<Tensor* const> params, AdamState& adam,
                                      std::size_t epoch, std::size_t step) {
    Tape tape;
    zero_grads(params);
    Var g = generate(generator, tape, input);
    GeneratorLosses out;
    std::vector<Var> terms;
    if (flags.lik) {
        Var lik = likelihood_loss(g, source_classifier);
        out.lik = checked(lik, LossTerm::Lik, epoch, step);
        terms.push_back(scale(lik, c.delta));
    }
    Var adv = gan_generator_loss(forward(gan_discriminator, g), saturating);
    out.adv_g = checked(adv, LossTerm::AdvG, epoch, step);
    if (flags.adv) terms.push_back(scale(adv, c.alpha));
    if (flags.crs) {
        Var crs = class_consistency_loss(forward(source_classifier, g), labels);
        out.crs = checked(crs, LossTerm::Crs, epoch, step);
        terms.push_back(scale(crs, c.beta));
    }
    if (!terms.empty()) {
        Var total = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
        tape.backward(total);
    }
    adam_step(params, adam);
    return out;
}

enum class AlignObjective { Grl, Mmd };

struct AdaptLosses {
    std::optional<double> dis, mmd, cls;
};

// One update of F, C and D_d on labelled proxy samples and an unlabelled
// target batch. The domain term carries lambda through the reversal layer
// (D_d descends it, F ascends it scaled by lambda); MMD is weighted by lambda
// directly. The classification term is weighted by mu.
inline AdaptLosses adaptation_step(Networks& nets, const Tensor& proxy_batch, std::span<const int> proxy_labels,
                                   const Tensor& target_batch, double lambda, double mu, const LossFlags& flags,
                                   AlignObjective objective, double fixed_bandwidth, std::span<Tensor* const> params,
                                   AdamState& adam, std::size_t epoch, std::size_t step) {
    Tape tape;
    zero_grads(params);
    Var fp = forward(nets.feature_extractor, tape.constant(proxy_batch));
    Var ft = forward(nets.feature_extractor, tape.constant(target_batch));
    AdaptLosses out;
    std::vector<Var> terms;
    if (flags.dis) {
        if (objective == AlignObjective::Grl) {
            Var dis = domain_loss(fp, ft, nets.domain_discriminator, lambda);
            out.dis = checked(dis, LossTerm::Dis, epoch, step);
            terms.push_back(dis);
        } else {
            const double bw = fixed_bandwidth > 0.0 ? fixed_bandwidth : mmd_bandwidth(tape.value(fp), tape.value(ft));
            Var mmd = mmd_loss(fp, ft, bw);
            out.mmd = checked(mmd, LossTerm::Mmd, epoch, step);
            terms.push_back(scale(mmd, lambda));
        }
    }
    if (flags.cls) {
        Var cls = class_consistency_loss(forward(nets.classifier, fp), proxy_labels);
        out.cls = checked(cls, LossTerm::Cls, epoch, step);
        terms.push_back(scale(cls, mu));
    }
    if (!terms.empty()) {
        Var total = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
        tape.backward(total);
    }
    adam_step(params, adam);
    return out;
}

} // namespace detail

// Shared state of a training run after pretraining.
struct RunContext {
    ExperimentConfig config;
    DomainPair domains;
    MlpNetwork source_classifier; // frozen
    PretrainReport pretrain;
};

inline RunContext prepare_run(const ExperimentConfig& cfg) {
    cfg.validate();
    DomainPair domains = make_domains(cfg);
    PretrainResult pc = pretrain(cfg, domains);
    return RunContext{cfg, std::move(domains), std::move(pc.classifier), pc.report};
}

// Uses an existing frozen classifier; no source data is generated or read.
inline RunContext prepare_run(const ExperimentConfig& cfg, MlpNetwork source_classifier) {
    cfg.validate();
    if (!source_classifier.frozen) throw ContractError("prepare_run: source classifier must be frozen");
    DomainPair domains = make_domains(cfg);
    return RunContext{cfg, std::move(domains), std::move(source_classifier), {}};
}

namespace detail {

inline MetricsRecord base_record(const ExperimentConfig& cfg, std::size_t epoch) {
    MetricsRecord r;
    r.run_id = cfg.run_id;
    r.seed = cfg.seed;
    r.epoch = epoch;
    return r;
}

inline bool evaluation_epoch(const ExperimentConfig& cfg, std::size_t epoch, std::size_t total) {
    return (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == total;
}

inline void check_classifier(const RunContext& ctx) {
    if (!ctx.source_classifier.frozen) throw ContractError("training: source classifier is missing or not frozen");
    if (ctx.source_classifier.spec.output_dim() != ctx.domains.classes
        || ctx.source_classifier.spec.input_dim() != ctx.domains.target_train.dim()) {
        throw ContractError("training: source classifier does not match the domains");
    }
}

// Attaches d_A between target and generated samples, plus source pairs for
// the oracle, which is the only variant allowed to read source data.
inline void add_discrepancy(MetricsRecord& record, const RunContext& ctx, const Tensor& generated, bool with_source,
                            std::uint64_t seed) {
    ProbeConfig probe;
    probe.seed = seed;
    record.d_a_target_generated = proxy_a_distance(ctx.domains.target_train.features, generated, probe).d_a;
    if (with_source) {
        const Tensor& src = ctx.domains.source_train.read().features;
        record.d_a_source_target = proxy_a_distance(src, ctx.domains.target_train.features, probe).d_a;
        record.d_a_source_generated = proxy_a_distance(src, generated, probe).d_a;
    }
}

} // namespace detail

// Source-only baseline: P_c evaluated on the target test split.
inline TrainReport train_baseline(const RunContext& ctx) {
    const auto start = std::chrono::steady_clock::now();
    detail::check_classifier(ctx);
    TrainReport report;
    report.config = ctx.config;
    report.pretrain = ctx.pretrain;
    report.classifier_hash_before = parameter_hash(ctx.source_classifier);
    MetricsRecord r = detail::base_record(ctx.config, 0);
    r.target_accuracy = accuracy(ctx.source_classifier, ctx.domains.target_test);
    report.records.push_back(r);
    report.classifier_hash_after = parameter_hash(ctx.source_classifier);
    report.source_reads = ctx.domains.source_train.access_count() + ctx.domains.source_test.access_count();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

namespace detail {

// Joint generation + adaptation loop shared by sdda, sdda_p and plugin_mmd.
inline TrainReport train_joint(const RunContext& ctx, AlignObjective objective, bool warm_start) {
    const auto start = std::chrono::steady_clock::now();
    check_classifier(ctx);
    const ExperimentConfig& cfg = ctx.config;
    const std::size_t reads_before = ctx.domains.source_train.access_count() + ctx.domains.source_test.access_count();
    const RunSeeds seeds(cfg.seed);
    const std::size_t k = ctx.domains.classes;
    const CoefficientSchedule sched = cfg.effective_schedule();

    TrainReport report;
    report.config = cfg;
    report.pretrain = ctx.pretrain;
    report.classifier_hash_before = parameter_hash(ctx.source_classifier);
    Networks nets = init_networks(cfg, ctx.domains.target_train.dim(), seeds.init);
    if (warm_start) {
        report.warm_started_layers = warm_start_classifier(ctx.source_classifier, nets.feature_extractor, nets.classifier);
    }

    const auto dg_params = group_parameters({&nets.gan_discriminator});
    const auto g_params = group_parameters({&nets.generator});
    const auto adapt_params = group_parameters({&nets.feature_extractor, &nets.classifier, &nets.domain_discriminator});
    AdamState dg_adam = make_adam_state(dg_params, cfg.adam);
    AdamState g_adam = make_adam_state(g_params, cfg.adam);
    AdamState adapt_adam = make_adam_state(adapt_params, cfg.adapt_adam);

    Rng batch_rng(seeds.batches);
    Rng latent_rng(seeds.latent);
    const Tensor& target = ctx.domains.target_train.features;
    std::vector<double> adv_series;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const Coefficients c = schedule(epoch, sched);
        EpochLosses losses;
        double adv_sum = 0.0;
        const auto batches = epoch_batches(target.rows(), cfg.batch_size, batch_rng);
        for (std::size_t step = 0; step < batches.size(); ++step) {
            with_step_context(epoch, step, [&] {
                const Tensor target_batch = gather_rows(target, batches[step]);
                std::vector<int> labels(batches[step].size());
                for (int& y : labels) y = static_cast<int>(latent_rng.below(k));
                const GeneratorInput input = sample_generator_input(labels, k, cfg.latent_dim, latent_rng);

                losses.add(LossTerm::AdvD, discriminator_step(nets.gan_discriminator, nets.generator, target_batch, input,
                                                              dg_params, dg_adam, epoch, step));
                const GeneratorLosses gl = generator_step(nets.generator, nets.gan_discriminator, ctx.source_classifier, input,
                                                          labels, c, cfg.losses, cfg.saturating_generator, g_params, g_adam,
                                                          epoch, step);
                if (gl.lik) losses.add(LossTerm::Lik, *gl.lik);
                if (gl.adv_g && cfg.losses.adv) losses.add(LossTerm::AdvG, *gl.adv_g);
                if (gl.crs) losses.add(LossTerm::Crs, *gl.crs);

                const Tensor proxy = generate(nets.generator, input);
                const AdaptLosses al = adaptation_step(nets, proxy, labels, target_batch, c.lambda, c.mu, cfg.losses, objective,
                                                       cfg.mmd_bandwidth, adapt_params, adapt_adam, epoch, step);
                if (al.dis) losses.add(LossTerm::Dis, *al.dis);
                if (al.mmd) losses.add(LossTerm::Mmd, *al.mmd);
                if (al.cls) losses.add(LossTerm::Cls, *al.cls);
                adv_sum += *gl.adv_g;
            });
        }
        // Monitoring series for the stall check, recorded whether or not the
        // term is optimised.
        adv_series.push_back(adv_sum / static_cast<double>(batches.size()));
        if (evaluation_epoch(cfg, epoch, cfg.epochs)) {
            MetricsRecord r = base_record(cfg, epoch);
            r.losses = losses.bundle();
            r.target_accuracy = accuracy(nets.feature_extractor, nets.classifier, ctx.domains.target_test);
            if (cfg.discrepancy_every && ((epoch + 1) % cfg.discrepancy_every == 0 || epoch + 1 == cfg.epochs)) {
                const DomainDataset g = generate_samples(nets.generator, target.rows(), k, seeds.probe ^ epoch);
                add_discrepancy(r, ctx, g.features, false, seeds.probe + epoch);
            }
            report.records.push_back(std::move(r));
        }
    }
    for (Tensor* p : adapt_params) p->grad.reset();
    for (Tensor* p : g_params) p->grad.reset();
    for (Tensor* p : dg_params) p->grad.reset();
    report.diverged_or_stalled = loss_stalled(adv_series, cfg.stall_window);
    report.generator_loss_series = std::move(adv_series);
    report.networks = std::move(nets);
    report.classifier_hash_after = parameter_hash(ctx.source_classifier);
    report.source_reads = ctx.domains.source_train.access_count() + ctx.domains.source_test.access_count() - reads_before;
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// Standard GRL adaptation on a fixed labelled proxy set (generated or real
// source). Classification is on from the first epoch.
inline void adapt_on_fixed_set(const RunContext& ctx, Networks& nets, const DomainDataset& proxy, std::size_t epoch_offset,
                               std::uint64_t seed, TrainReport& report) {
    const ExperimentConfig& cfg = ctx.config;
    const auto params = group_parameters({&nets.feature_extractor, &nets.classifier, &nets.domain_discriminator});
    AdamState adam = make_adam_state(params, cfg.adapt_adam);
    Rng rng(seed);
    const Tensor& target = ctx.domains.target_train.features;
    std::vector<std::size_t> proxy_order(proxy.size());
    for (std::size_t i = 0; i < proxy_order.size(); ++i) proxy_order[i] = i;
    std::size_t cursor = proxy_order.size();
    LossFlags flags = cfg.losses;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochLosses losses;
        const auto batches = epoch_batches(target.rows(), cfg.batch_size, rng);
        for (std::size_t step = 0; step < batches.size(); ++step) {
            with_step_context(epoch, step, [&] {
                std::vector<std::size_t> rows;
                for (std::size_t i = 0; i < batches[step].size(); ++i) {
                    if (cursor == proxy_order.size()) {
                        rng.shuffle(proxy_order);
                        cursor = 0;
                    }
                    rows.push_back(proxy_order[cursor++]);
                }
                const DomainDataset batch = proxy.subset(rows);
                const AdaptLosses al = adaptation_step(nets, batch.features, batch.labels, gather_rows(target, batches[step]),
                                                       cfg.schedule.lambda, 1.0, flags, AlignObjective::Grl, 0.0, params, adam,
                                                       epoch, step);
                if (al.dis) losses.add(LossTerm::Dis, *al.dis);
                if (al.cls) losses.add(LossTerm::Cls, *al.cls);
            });
        }
        if (evaluation_epoch(cfg, epoch, cfg.epochs)) {
            MetricsRecord r = base_record(cfg, epoch_offset + epoch);
            r.losses = losses.bundle();
            r.target_accuracy = accuracy(nets.feature_extractor, nets.classifier, ctx.domains.target_test);
            report.records.push_back(std::move(r));
        }
    }
    for (Tensor* p : params) p->grad.reset();
}

} // namespace detail

inline TrainReport train_sdda(const RunContext& ctx) {
    return detail::train_joint(ctx, detail::AlignObjective::Grl, ctx.config.variant == Variant::SddaP);
}

enum class PluginObjective { Grl, Mmd };

inline std::optional<PluginObjective> parse_plugin_objective(const std::string& s) {
    if (s == "grl") return PluginObjective::Grl;
    if (s == "mmd") return PluginObjective::Mmd;
    return std::nullopt;
}

// SDDA with a different alignment objective. Grl is train_sdda itself.
inline TrainReport train_plugin(const RunContext& ctx, PluginObjective objective) {
    return detail::train_joint(ctx, objective == PluginObjective::Grl ? detail::AlignObjective::Grl : detail::AlignObjective::Mmd,
                               false);
}

inline TrainReport train_plugin(const RunContext& ctx, const std::string& objective) {
    const auto parsed = parse_plugin_objective(objective);
    if (!parsed) throw ContractError("train_plugin: unknown objective '" + objective + "'");
    return train_plugin(ctx, *parsed);
}

// Phase 1 trains G and D_g only; phase 2 freezes G, draws N_g labelled
// samples and runs GRL adaptation between them and the target.
inline TrainReport train_sdda_g(const RunContext& ctx) {
    const auto start = std::chrono::steady_clock::now();
    detail::check_classifier(ctx);
    const ExperimentConfig& cfg = ctx.config;
    const std::size_t reads_before = ctx.domains.source_train.access_count() + ctx.domains.source_test.access_count();
    const RunSeeds seeds(cfg.seed);
    const std::size_t k = ctx.domains.classes;
    const CoefficientSchedule sched = cfg.effective_schedule();
    const std::size_t gen_epochs = cfg.generation_epochs ? cfg.generation_epochs : cfg.epochs;

    TrainReport report;
    report.config = cfg;
    report.pretrain = ctx.pretrain;
    report.classifier_hash_before = parameter_hash(ctx.source_classifier);
    Networks nets = init_networks(cfg, ctx.domains.target_train.dim(), seeds.init);
    const auto dg_params = detail::group_parameters({&nets.gan_discriminator});
    const auto g_params = detail::group_parameters({&nets.generator});
    AdamState dg_adam = make_adam_state(dg_params, cfg.adam);
    AdamState g_adam = make_adam_state(g_params, cfg.adam);
    Rng batch_rng(seeds.batches);
    Rng latent_rng(seeds.latent);
    const Tensor& target = ctx.domains.target_train.features;
    LossFlags gen_flags = cfg.losses;
    std::vector<double> adv_series;
    for (std::size_t epoch = 0; epoch < gen_epochs; ++epoch) {
        const Coefficients c = schedule(epoch, sched);
        detail::EpochLosses losses;
        double adv_sum = 0.0;
        const auto batches = detail::epoch_batches(target.rows(), cfg.batch_size, batch_rng);
        for (std::size_t step = 0; step < batches.size(); ++step) {
            detail::with_step_context(epoch, step, [&] {
                const Tensor target_batch = detail::gather_rows(target, batches[step]);
                std::vector<int> labels(batches[step].size());
                for (int& y : labels) y = static_cast<int>(latent_rng.below(k));
                const GeneratorInput input = sample_generator_input(labels, k, cfg.latent_dim, latent_rng);
                losses.add(LossTerm::AdvD, detail::discriminator_step(nets.gan_discriminator, nets.generator, target_batch, input,
                                                                      dg_params, dg_adam, epoch, step));
                const auto gl = detail::generator_step(nets.generator, nets.gan_discriminator, ctx.source_classifier, input, labels,
                                                       c, gen_flags, cfg.saturating_generator, g_params, g_adam, epoch, step);
                if (gl.lik) losses.add(LossTerm::Lik, *gl.lik);
                if (gl.adv_g && gen_flags.adv) losses.add(LossTerm::AdvG, *gl.adv_g);
                if (gl.crs) losses.add(LossTerm::Crs, *gl.crs);
                adv_sum += *gl.adv_g;
            });
        }
        adv_series.push_back(adv_sum / static_cast<double>(batches.size()));
        if (detail::evaluation_epoch(cfg, epoch, gen_epochs)) {
            MetricsRecord r = detail::base_record(cfg, epoch);
            r.losses = losses.bundle();
            report.records.push_back(std::move(r));
        }
    }
    for (Tensor* p : g_params) p->grad.reset();
    for (Tensor* p : dg_params) p->grad.reset();
    nets.generator.frozen = true;
    report.diverged_or_stalled = loss_stalled(adv_series, cfg.stall_window);
    report.generator_loss_series = std::move(adv_series);
    DomainDataset generated = generate_samples(nets.generator, cfg.generated_count, k, seeds.latent ^ 0xC0FFEEULL);
    detail::adapt_on_fixed_set(ctx, nets, generated, gen_epochs, seeds.batches ^ 0xADA97ULL, report);
    report.generated = std::move(generated);
    report.networks = std::move(nets);
    report.classifier_hash_after = parameter_hash(ctx.source_classifier);
    report.source_reads = ctx.domains.source_train.access_count() + ctx.domains.source_test.access_count() - reads_before;
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// GRL adaptation with real labelled source samples in place of generated ones.
inline TrainReport train_oracle(const RunContext& ctx) {
    const auto start = std::chrono::steady_clock::now();
    detail::check_classifier(ctx);
    const ExperimentConfig& cfg = ctx.config;
    const RunSeeds seeds(cfg.seed);
    TrainReport report;
    report.config = cfg;
    report.pretrain = ctx.pretrain;
    report.classifier_hash_before = parameter_hash(ctx.source_classifier);
    Networks nets = init_networks(cfg, ctx.domains.target_train.dim(), seeds.init);
    const DomainDataset& source = ctx.domains.source_train.read();
    detail::adapt_on_fixed_set(ctx, nets, source, 0, seeds.batches ^ 0x0EAC1EULL, report);
    if (!report.records.empty()) {
        report.records.back().source_accuracy = accuracy(nets.feature_extractor, nets.classifier, ctx.domains.source_test.read());
    }
    report.networks = std::move(nets);
    report.classifier_hash_after = parameter_hash(ctx.source_classifier);
    report.source_reads = ctx.domains.source_train.access_count() + ctx.domains.source_test.access_count();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// Dispatches on config.variant. `train_baseline` covers both baseline and,
// with real source data, the oracle.
inline TrainReport train_baseline_or_oracle(const RunContext& ctx) {
    return ctx.config.variant == Variant::Oracle ? train_oracle(ctx) : train_baseline(ctx);
}

inline TrainReport run_variant(const RunContext& ctx) {
    switch (ctx.config.variant) {
    case Variant::Baseline: return train_baseline(ctx);
    case Variant::Sdda:
    case Variant::SddaP: return train_sdda(ctx);
    case Variant::SddaG: return train_sdda_g(ctx);
    case Variant::Oracle: return train_oracle(ctx);
    case Variant::PluginMmd: return train_plugin(ctx, PluginObjective::Mmd);
    }
    throw ContractError("unknown variant");
}

inline TrainReport run_experiment(const ExperimentConfig& cfg) { return run_variant(prepare_run(cfg)); }

} // namespace sdda
