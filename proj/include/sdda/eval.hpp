#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sdda/adam.hpp"
#include "sdda/domains.hpp"
#include "sdda/losses.hpp"
#include "sdda/networks.hpp"

namespace sdda {

// Accuracy of C(F(x)). Evaluation is the only consumer of target labels.
inline double accuracy(const MlpNetwork& feature_extractor, const MlpNetwork& classifier, const DomainDataset& data) {
    if (data.size() == 0) throw ContractError("accuracy: empty dataset");
    return match_fraction(argmax_rows(classify(classifier, apply(feature_extractor, data.features))), data.labels);
}

inline double accuracy(const MlpNetwork& classifier, const DomainDataset& data) {
    return classifier_accuracy(classifier, data);
}

// ---------------------------------------------------------------------------
// Proxy A-distance
// ---------------------------------------------------------------------------

enum class PairLabel { SourceTarget, SourceGenerated, TargetGenerated, Other };
enum class Phase { Before, After };

inline const char* pair_name(PairLabel p) {
    switch (p) {
    case PairLabel::SourceTarget: return "source-target";
    case PairLabel::SourceGenerated: return "source-generated";
    case PairLabel::TargetGenerated: return "target-generated";
    case PairLabel::Other: return "other";
    }
    return "?";
}

struct DiscrepancyReport {
    PairLabel pair = PairLabel::Other;
    double d_a = 0.0;
    double epsilon = 0.5; // probe test error after the symmetry clamp
    Phase phase = Phase::Before;
};

// d_A = 2 (1 - 2 eps) after folding eps into [0, 0.5]; a probe that is
// wrong more often than not is as informative as its inverse.
inline DiscrepancyReport discrepancy_from_error(double test_error, PairLabel pair = PairLabel::Other,
                                               Phase phase = Phase::Before) {
    if (!(test_error >= 0.0 && test_error <= 1.0)) throw ContractError("proxy A-distance: error outside [0, 1]");
    const double eps = test_error > 0.5 ? 1.0 - test_error : test_error;
    return DiscrepancyReport{pair, 2.0 * (1.0 - 2.0 * eps), eps, phase};
}

// The probe is a [d -> 32 -> 1] tanh MLP trained with binary cross-entropy,
// not a kernel SVM. d_A depends on the probe class, so its capacity is fixed.
struct ProbeConfig {
    std::size_t hidden = 32;
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 1e-2;
    std::size_t max_per_set = 1000; // larger sets are subsampled
    std::uint64_t seed = 0;
};

namespace detail {

inline Tensor subsample_rows(const Tensor& x, std::size_t limit, Rng& rng) {
    if (x.rows() <= limit) return x;
    std::vector<std::size_t> rows(x.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    rng.shuffle(rows);
    rows.resize(limit);
    std::sort(rows.begin(), rows.end());
    Tensor out(Shape{limit, x.cols()});
    for (std::size_t r = 0; r < limit; ++r) {
        std::copy_n(x.values.begin() + static_cast<std::ptrdiff_t>(rows[r] * x.cols()), x.cols(),
                    out.values.begin() + static_cast<std::ptrdiff_t>(r * x.cols()));
    }
    return out;
}

} // namespace detail

// Probe test error for telling set A (label 0) from set B (label 1) on a
// stratified 80/20 split.
inline double probe_test_error(const Tensor& set_a, const Tensor& set_b, const ProbeConfig& cfg) {
    if (set_a.rows() < 10 || set_b.rows() < 10) throw ContractError("proxy A-distance: each set needs at least 10 samples");
    if (set_a.cols() != set_b.cols()) throw DimensionError("proxy A-distance: sets have different widths");
    Rng rng(cfg.seed);
    const Tensor a = detail::subsample_rows(set_a, cfg.max_per_set, rng);
    const Tensor b = detail::subsample_rows(set_b, cfg.max_per_set, rng);
    DomainDataset both{stack_rows(a, b), std::vector<int>(a.rows(), 0), 2, DomainTag::Source, cfg.seed};
    both.labels.resize(a.rows() + b.rows(), 1);
    const std::array<double, 2> fractions{0.8, 0.2};
    const auto parts = split(both, fractions, rng.split());
    const DomainDataset& train = parts[0];
    const DomainDataset& test = parts[1];

    MlpNetwork probe = init_mlp(mlp_spec({a.cols(), cfg.hidden, 1}, Head::SigmoidScalar), rng.split());
    auto params = probe.parameters();
    AdamState adam = make_adam_state(params, AdamHyper{cfg.learning_rate, 0.9, 0.999, 1e-8});
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            const DomainDataset batch = train.subset(std::span(order).subspan(start, stop - start));
            Tensor sign(Shape{batch.size(), 1});
            for (std::size_t i = 0; i < batch.size(); ++i) sign[i] = batch.labels[i] == 1 ? -1.0 : 1.0;
            Tape tape;
            probe.zero_grad();
            // BCE with logits: softplus(x) for label 0, softplus(-x) for label 1.
            Var logits = forward(probe, tape.constant(batch.features));
            Var loss = mean(softplus(mul(logits, tape.constant(sign))));
            tape.backward(loss);
            adam_step(params, adam);
        }
    }
    const Tensor scores = apply(probe, test.features);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const int predicted = scores[i] > 0.0 ? 1 : 0;
        wrong += predicted != test.labels[i] ? 1 : 0;
    }
    return static_cast<double>(wrong) / static_cast<double>(test.size());
}

inline DiscrepancyReport proxy_a_distance(const Tensor& set_a, const Tensor& set_b, const ProbeConfig& cfg,
                                          PairLabel pair = PairLabel::Other, Phase phase = Phase::Before) {
    return discrepancy_from_error(probe_test_error(set_a, set_b, cfg), pair, phase);
}

// ---------------------------------------------------------------------------
// Neighbourhood density
// ---------------------------------------------------------------------------

// Fraction of query rows whose nearest reference row lies within epsilon.
inline double density_around(const Tensor& reference, const Tensor& query, double epsilon) {
    if (!(epsilon > 0.0)) throw ContractError("density_around: epsilon must be positive");
    if (reference.rows() == 0 || query.rows() == 0) throw ContractError("density_around: empty set");
    if (reference.cols() != query.cols()) throw DimensionError("density_around: sets have different widths");
    const std::size_t d = reference.cols();
    const double eps2 = epsilon * epsilon;
    std::size_t covered = 0;
    for (std::size_t q = 0; q < query.rows(); ++q) {
        for (std::size_t r = 0; r < reference.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < d && s <= eps2; ++c) {
                const double diff = query.at(q, c) - reference.at(r, c);
                s += diff * diff;
            }
            if (s <= eps2) {
                ++covered;
                break;
            }
        }
    }
    return static_cast<double>(covered) / static_cast<double>(query.rows());
}

// Density measured in the feature space of F instead of on raw inputs.
inline double density_around(const MlpNetwork& feature_extractor, const Tensor& reference, const Tensor& query,
                             double epsilon) {
    return density_around(apply(feature_extractor, reference), apply(feature_extractor, query), epsilon);
}

// Half the median pairwise distance within the reference set.
inline double default_density_epsilon(const Tensor& reference) { return 0.5 * median_pairwise_distance(reference); }

// ---------------------------------------------------------------------------
// Generated-sample class agreement
// ---------------------------------------------------------------------------

// Fraction of generated rows that the frozen classifier assigns to their
// conditioning label.
inline double generated_class_agreement(const MlpNetwork& classifier, const DomainDataset& generated) {
    if (generated.size() == 0) throw ContractError("generated_class_agreement: empty set");
    return match_fraction(argmax_rows(classify(classifier, generated.features)), generated.labels);
}

} // namespace sdda
