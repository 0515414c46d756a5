// sdda: command-line front end for pretraining, adaptation, evaluation,
// sweeps and plot data. Exit status: 0 ok, 1 runtime failure, 2 usage,
// 3 configuration. Failures print one line to stderr:
//   sdda: error[<class>]: <message>

#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sdda/config.hpp"
#include "sdda/eval.hpp"
#include "sdda/metrics.hpp"
#include "sdda/trainer.hpp"

namespace fs = std::filesystem;
using namespace sdda;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kConfig = 3 };

struct UsageError : Error {
    using Error::Error;
};

int fail(const char* kind, const std::string& message, int code) {
    std::string line = message;
    for (char& c : line) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    std::cerr << "sdda: error[" << kind << "]: " << line << '\n';
    return code;
}

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", path, "experiment config file (defaults when omitted)");
        cmd->add_option("--set", overrides, "override a config key, key=value (repeatable)");
        cmd->add_option("--seed", seed, "run seed (overrides the config)");
    }

    ExperimentConfig load() const {
        ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : parse_config(path);
        std::vector<std::string> all = overrides;
        if (seed) all.push_back("seed=" + std::to_string(*seed));
        return with_overrides(std::move(cfg), all);
    }
};

MlpNetwork load_frozen(const std::string& path) {
    MlpNetwork net = load_checkpoint(path);
    net.frozen = true;
    return net;
}

void print_value(const std::string& key, double v) { std::cout << key << '=' << format_double(v) << '\n'; }

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void save_networks(const TrainReport& report, const MlpNetwork& source_classifier, const fs::path& dir) {
    fs::create_directories(dir);
    save_checkpoint(source_classifier, dir / "source_classifier.ckpt");
    if (!report.networks) return;
    const Networks& n = *report.networks;
    save_checkpoint(n.feature_extractor, dir / "feature_extractor.ckpt");
    save_checkpoint(n.classifier, dir / "classifier.ckpt");
    save_checkpoint(n.domain_discriminator, dir / "domain_discriminator.ckpt");
    if (report.config.variant != Variant::Oracle) {
        save_checkpoint(n.generator, dir / "generator.ckpt");
        save_checkpoint(n.gan_discriminator, dir / "gan_discriminator.ckpt");
    }
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const ConfigArgs& args, const std::string& out) {
    const ExperimentConfig cfg = args.load();
    const RunContext ctx = prepare_run(cfg);
    ensure_parent(out);
    save_checkpoint(ctx.source_classifier, out);
    print_value("source_train_accuracy", ctx.pretrain.train_accuracy);
    print_value("source_test_accuracy", ctx.pretrain.test_accuracy);
    print_value("target_test_accuracy", accuracy(ctx.source_classifier, ctx.domains.target_test));
    return kOk;
}

int cmd_adapt(const ConfigArgs& args, const std::string& classifier, const std::string& metrics,
              const std::string& checkpoints, const std::string& samples) {
    const ExperimentConfig cfg = args.load();
    const RunContext ctx = classifier.empty() ? prepare_run(cfg) : prepare_run(cfg, load_frozen(classifier));
    const TrainReport report = run_variant(ctx);
    ensure_parent(metrics);
    save_metrics_csv(report.records, metrics);
    if (!checkpoints.empty()) save_networks(report, ctx.source_classifier, checkpoints);
    if (!samples.empty()) {
        if (!report.generated) throw UsageError("--samples needs variant sdda_g, which keeps a generated set");
        ensure_parent(samples);
        save_dataset_csv(*report.generated, samples);
    }
    std::cout << "variant=" << variant_name(cfg.variant) << '\n';
    print_value("final_target_accuracy", report.final_target_accuracy());
    std::cout << "diverged_or_stalled=" << (report.diverged_or_stalled ? "true" : "false") << '\n';
    std::cout << "source_reads=" << report.source_reads << '\n';
    std::cout << "classifier_unchanged=" << (report.classifier_hash_before == report.classifier_hash_after ? "true" : "false")
              << '\n';
    return kOk;
}

int cmd_generate(const std::string& generator, std::size_t count, std::size_t classes, std::uint64_t seed,
                 const std::string& out) {
    const MlpNetwork g = load_checkpoint(generator);
    const DomainDataset d = generate_samples(g, count, classes, seed);
    ensure_parent(out);
    save_dataset_csv(d, out);
    std::cout << "samples=" << d.size() << '\n';
    return kOk;
}

struct EvaluateArgs {
    std::string classifier, feature_extractor, head, generated;
    std::string space = "raw";
    double epsilon = 0.0;
};

int cmd_evaluate(const ConfigArgs& args, const EvaluateArgs& e) {
    const ExperimentConfig cfg = args.load();
    const bool composed = !e.feature_extractor.empty();
    if (composed && e.head.empty()) throw UsageError("--feature-extractor needs --head");
    if (!composed && e.classifier.empty()) throw UsageError("give --classifier or --feature-extractor with --head");
    if (e.space == "features" && !composed) throw UsageError("--space features needs --feature-extractor");

    const DomainPair domains = make_domains(cfg);
    std::optional<MlpNetwork> pc, f, c;
    if (!e.classifier.empty()) pc = load_frozen(e.classifier);
    if (composed) {
        f = load_frozen(e.feature_extractor);
        c = load_frozen(e.head);
    }
    auto acc = [&](const DomainDataset& d) { return composed ? accuracy(*f, *c, d) : accuracy(*pc, d); };
    print_value("target_test_accuracy", acc(domains.target_test));
    print_value("source_test_accuracy", acc(domains.source_test.read()));

    if (e.generated.empty()) return kOk;
    const DomainDataset gen = load_dataset_csv(e.generated, domains.classes);
    if (pc) print_value("class_agreement", generated_class_agreement(*pc, gen));

    const Tensor& src_raw = domains.source_train.read().features;
    const Tensor& tgt_raw = domains.target_train.features;
    const bool features = e.space == "features";
    const Tensor src = features ? apply(*f, src_raw) : src_raw;
    const Tensor tgt = features ? apply(*f, tgt_raw) : tgt_raw;
    const Tensor g = features ? apply(*f, gen.features) : gen.features;
    ProbeConfig probe;
    probe.seed = RunSeeds(cfg.seed).probe;
    print_value("da_source_target", proxy_a_distance(src, tgt, probe).d_a);
    print_value("da_source_generated", proxy_a_distance(src, g, probe).d_a);
    print_value("da_target_generated", proxy_a_distance(tgt, g, probe).d_a);
    const double eps = e.epsilon > 0.0 ? e.epsilon : default_density_epsilon(src);
    print_value("density_epsilon", eps);
    print_value("density_generated_near_source", density_around(src, g, eps));
    print_value("density_target_near_source", density_around(src, tgt, eps));
    return kOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepCell {
    std::string value;
    std::uint64_t seed;
    std::string run_id;
};

constexpr const char* kSummaryHeader = "run_id,param,value,seed,variant,final_target_acc,diverged_or_stalled,source_reads";

ExperimentConfig cell_config(ExperimentConfig cfg, const std::string& param, const std::string& value) {
    if (param == "lambda") {
        return with_overrides(std::move(cfg), {"schedule.lambda=" + value});
    }
    if (param == "generated_count") {
        cfg.variant = Variant::SddaG;
        return with_overrides(std::move(cfg), {"generated_count=" + value});
    }
    // loss configurations of the ablation table
    std::vector<std::string> flags{"losses.lik=true", "losses.dis=true", "losses.adv=true", "losses.crs=true", "losses.cls=true"};
    if (value == "no_lik_dis") {
        flags[0] = "losses.lik=false";
        flags[1] = "losses.dis=false";
    } else if (value == "no_lik") {
        flags[0] = "losses.lik=false";
    } else if (value == "no_adv") {
        flags[2] = "losses.adv=false";
    } else if (value != "full") {
        throw ConfigError("sweep: unknown loss configuration '" + value + "' (full|no_lik|no_lik_dis|no_adv)");
    }
    return with_overrides(std::move(cfg), flags);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot open " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// Runs one cell and writes <run_id>.csv and <run_id>.row into runs/.
void run_cell(const ExperimentConfig& base, const std::string& param, const SweepCell& cell, const MlpNetwork& pc,
              const fs::path& runs) {
    ExperimentConfig cfg = cell_config(base, param, cell.value);
    cfg.seed = cell.seed;
    cfg.run_id = cell.run_id;
    const TrainReport report = run_variant(prepare_run(cfg, pc));
    save_metrics_csv(report.records, runs / (cell.run_id + ".csv"));
    std::ofstream row(runs / (cell.run_id + ".row"), std::ios::trunc);
    row << cell.run_id << ',' << param << ',' << cell.value << ',' << cell.seed << ',' << variant_name(cfg.variant) << ','
        << format_double(report.final_target_accuracy()) << ',' << (report.diverged_or_stalled ? "true" : "false") << ','
        << report.source_reads << '\n';
    if (!row) throw Error("failed writing " + (runs / (cell.run_id + ".row")).string());
}

int cmd_sweep(const ConfigArgs& args, const std::string& param, const std::string& values_text,
              const std::string& seeds_text, const std::string& out_dir, std::size_t jobs) {
    if (param != "lambda" && param != "generated_count" && param != "losses") {
        throw UsageError("--param must be lambda, generated_count or losses");
    }
    const ExperimentConfig base = args.load();
    const std::vector<std::string> values = split_list(values_text);
    if (values.empty()) throw UsageError("--values is empty");
    std::vector<std::uint64_t> seeds;
    if (seeds_text.empty()) {
        seeds.push_back(base.seed);
    } else {
        for (const std::string& s : split_list(seeds_text)) {
            try {
                seeds.push_back(std::stoull(s));
            } catch (const std::exception&) {
                throw UsageError("--seeds: bad seed '" + s + "'");
            }
        }
    }
    // Validate every cell before any training starts.
    for (const std::string& v : values) (void)cell_config(base, param, v);

    const fs::path runs = fs::path(out_dir) / "runs";
    fs::create_directories(runs);
    std::vector<SweepCell> cells;
    for (const std::string& v : values) {
        for (std::uint64_t s : seeds) cells.push_back({v, s, base.run_id + "-" + param + "-" + v + "-s" + std::to_string(s)});
    }

    // P_c depends only on the seed and the data, which the swept keys never touch.
    std::map<std::uint64_t, MlpNetwork> classifiers;
    for (std::uint64_t s : seeds) {
        ExperimentConfig c = base;
        c.seed = s;
        classifiers.emplace(s, prepare_run(c).source_classifier);
    }

    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            try {
                run_cell(base, param, cells[i], classifiers.at(cells[i].seed), runs);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < std::max<std::size_t>(jobs, 1); ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);

    // Aggregation is a pure post-pass over the per-run files.
    std::ofstream metrics(fs::path(out_dir) / "metrics.csv", std::ios::trunc);
    std::ofstream summary(fs::path(out_dir) / "summary.csv", std::ios::trunc);
    metrics << kMetricsVersionLine << '\n' << metrics_header() << '\n';
    summary << kSummaryHeader << '\n';
    std::cout << kSummaryHeader << '\n';
    const std::string run_header = std::string(kMetricsVersionLine) + "\n" + metrics_header() + "\n";
    for (const SweepCell& cell : cells) {
        const std::string body = read_file(runs / (cell.run_id + ".csv"));
        if (body.compare(0, run_header.size(), run_header) != 0) throw FormatError("sweep: unexpected header in " + cell.run_id);
        metrics << body.substr(run_header.size());
        const std::string row = read_file(runs / (cell.run_id + ".row"));
        summary << row;
        std::cout << row;
    }
    if (!metrics || !summary) throw Error("sweep: failed writing aggregate tables");
    return kOk;
}

int cmd_plotdata(const ConfigArgs& args, const std::string& generator, std::size_t count, const std::string& out) {
    const ExperimentConfig cfg = args.load();
    const RunSeeds seeds(cfg.seed);
    std::vector<DomainDataset> sets{make_source(cfg, seeds.source_data), make_target(cfg, seeds)};
    if (!generator.empty()) {
        sets.push_back(generate_samples(load_checkpoint(generator), count, cfg.classes(), seeds.latent));
    }
    ensure_parent(out);
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw Error("cannot open " + out + " for writing");
    for (std::size_t i = 0; i < sets.size(); ++i) {
        std::ostringstream part;
        write_dataset_csv(sets[i], part);
        const std::string text = part.str();
        f << (i == 0 ? text : text.substr(text.find('\n') + 1));
    }
    std::size_t rows = 0;
    for (const auto& s : sets) rows += s.size();
    std::cout << "rows=" << rows << '\n';
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Source-data-free domain adaptation on synthetic 2-D domains"};
    app.require_subcommand(1);

    ConfigArgs pre_args, adapt_args, eval_args, sweep_args, plot_args;

    std::string pretrain_out;
    auto* pretrain = app.add_subcommand("pretrain", "train the source classifier and save it");
    pre_args.attach(pretrain);
    pretrain->add_option("--out", pretrain_out, "checkpoint path")->required();

    std::string adapt_classifier, adapt_metrics, adapt_checkpoints, adapt_samples;
    auto* adapt = app.add_subcommand("adapt", "run the configured variant");
    adapt_args.attach(adapt);
    adapt->add_option("--classifier", adapt_classifier, "frozen source classifier checkpoint (pretrains when omitted)");
    adapt->add_option("--metrics", adapt_metrics, "metrics CSV path")->required();
    adapt->add_option("--checkpoints", adapt_checkpoints, "directory for network checkpoints");
    adapt->add_option("--samples", adapt_samples, "CSV of the generated set (sdda_g)");

    std::string gen_model, gen_out;
    std::size_t gen_count = 1000, gen_classes = 2;
    std::uint64_t gen_seed = 0;
    auto* generate = app.add_subcommand("generate", "draw labelled samples from a generator checkpoint");
    generate->add_option("--generator", gen_model, "generator checkpoint")->required();
    generate->add_option("--count", gen_count, "number of samples")->check(CLI::PositiveNumber);
    generate->add_option("--classes", gen_classes, "number of classes");
    generate->add_option("--seed", gen_seed, "sampling seed");
    generate->add_option("--out", gen_out, "dataset CSV path")->required();

    EvaluateArgs eval;
    auto* evaluate = app.add_subcommand("evaluate", "accuracy, d_A and density for checkpoints");
    eval_args.attach(evaluate);
    evaluate->add_option("--classifier", eval.classifier, "single-network classifier checkpoint");
    evaluate->add_option("--feature-extractor", eval.feature_extractor, "feature extractor checkpoint");
    evaluate->add_option("--head", eval.head, "classifier head on top of the feature extractor");
    evaluate->add_option("--generated", eval.generated, "generated dataset CSV");
    evaluate->add_option("--space", eval.space, "raw or features")->check(CLI::IsMember({"raw", "features"}));
    evaluate->add_option("--epsilon", eval.epsilon, "density radius (default: half the median source distance)");

    std::string sweep_param, sweep_values, sweep_seeds, sweep_out;
    std::size_t sweep_jobs = 1;
    auto* sweep = app.add_subcommand("sweep", "one run per grid cell plus aggregate tables");
    sweep_args.attach(sweep);
    sweep->add_option("--param", sweep_param, "lambda | generated_count | losses")->required();
    sweep->add_option("--values", sweep_values, "comma-separated values")->required();
    sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds (default: the config seed)");
    sweep->add_option("--out-dir", sweep_out, "output directory")->required();
    sweep->add_option("--jobs", sweep_jobs, "parallel workers");

    std::string plot_generator, plot_out;
    std::size_t plot_count = 1000;
    auto* plotdata = app.add_subcommand("plotdata", "scatter CSV of source, target and generated sets");
    plot_args.attach(plotdata);
    plotdata->add_option("--generator", plot_generator, "generator checkpoint");
    plotdata->add_option("--count", plot_count, "generated samples")->check(CLI::PositiveNumber);
    plotdata->add_option("--out", plot_out, "CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), kUsage);
    }

    try {
        if (*pretrain) return cmd_pretrain(pre_args, pretrain_out);
        if (*adapt) return cmd_adapt(adapt_args, adapt_classifier, adapt_metrics, adapt_checkpoints, adapt_samples);
        if (*generate) return cmd_generate(gen_model, gen_count, gen_classes, gen_seed, gen_out);
        if (*evaluate) return cmd_evaluate(eval_args, eval);
        if (*sweep) return cmd_sweep(sweep_args, sweep_param, sweep_values, sweep_seeds, sweep_out, sweep_jobs);
        if (*plotdata) return cmd_plotdata(plot_args, plot_generator, plot_count, plot_out);
    } catch (const UsageError& e) {
        return fail("usage", e.what(), kUsage);
    } catch (const ConfigError& e) {
        return fail("config", e.what(), kConfig);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), kRuntime);
    }
    return fail("usage", "no subcommand", kUsage);
}
