#pragma once

// Training objectives. Every loss is a batch mean (the domain loss is a mean
// over the union of both batches), so coefficients do not depend on batch size.
// Discriminator probabilities never appear explicitly: losses take the
// pre-sigmoid logit and use softplus, since -log(sigmoid(x)) = softplus(-x)
// and -log(1 - sigmoid(x)) = softplus(x).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdda/autodiff.hpp"
#include "sdda/errors.hpp"
#include "sdda/networks.hpp"

namespace sdda {

// -log sum_k exp(logit_k); one value per row for a batch.
inline Var energy(Var logits) {
    const Tensor& v = logits.tape->value(logits);
    if (v.cols() < 2) throw ContractError("energy: need at least 2 classes, got " + std::to_string(v.cols()));
    return neg(logsumexp(logits));
}

inline double energy(std::span<const double> logits) {
    if (logits.size() < 2) throw ContractError("energy: need at least 2 classes, got " + std::to_string(logits.size()));
    const double hi = *std::max_element(logits.begin(), logits.end());
    double acc = 0.0;
    for (double l : logits) acc += std::exp(l - hi);
    return -(hi + std::log(acc));
}

// Mean energy of generated samples under the frozen classifier. The
// classifier enters as constants, so only upstream (generator) parameters
// receive gradient.
inline Var likelihood_loss(Var generated, const MlpNetwork& frozen_classifier) {
    if (!frozen_classifier.frozen) throw ContractError("likelihood_loss: classifier must be frozen");
    return mean(energy(forward(frozen_classifier, generated)));
}

// Generator side of the GAN game, from discriminator logits on fakes.
// Non-saturating: mean -log D(G(z,y)). Saturating: mean log(1 - D(G(z,y))).
inline Var gan_generator_loss(Var fake_logits, bool saturating = false) {
    if (fake_logits.tape->value(fake_logits).size() == 0) throw ContractError("gan_generator_loss: empty batch");
    return saturating ? neg(mean(softplus(fake_logits))) : mean(softplus(neg(fake_logits)));
}

// Target samples are the real class: mean -log D(a) + mean -log(1 - D(G(z,y))).
inline Var gan_discriminator_loss(Var fake_logits, Var real_logits) {
    return add(mean(softplus(neg(real_logits))), mean(softplus(fake_logits)));
}

inline void check_labels(std::span<const int> labels, std::size_t classes, const char* where) {
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw ContractError(std::string(where) + ": label " + std::to_string(y) + " outside [0, "
                                + std::to_string(classes) + ")");
        }
    }
}

// Mean softmax cross-entropy. Used both through the frozen classifier (only
// the generator learns) and through C(F(x)) on generated samples.
inline Var class_consistency_loss(Var logits, std::span<const int> labels) {
    const Tensor& v = logits.tape->value(logits);
    if (v.rank() != 2 || v.shape[0] != labels.size()) {
        throw DimensionError("class_consistency_loss: logits " + shape_string(v.shape) + " for "
                             + std::to_string(labels.size()) + " labels");
    }
    check_labels(labels, v.shape[1], "class_consistency_loss");
    return neg(mean(pick(log_softmax(logits), labels)));
}

// Binary cross-entropy of the domain discriminator, generated -> 0 and
// target -> 1, averaged over all N samples. Features pass through a gradient
// reversal layer first, so the discriminator descends this loss while the
// feature extractor ascends it with factor lambda.
inline Var domain_loss(Var features_generated, Var features_target, MlpNetwork& domain_discriminator, double lambda,
                       Binding binding = Binding::Trainable) {
    if (!(lambda >= 0.0)) throw ContractError("domain_loss: lambda must be >= 0");
    Tape& tape = *features_generated.tape;
    const std::size_t n = tape.value(features_generated).rows() + tape.value(features_target).rows();
    if (n == 0) throw ContractError("domain_loss: empty batches");
    Var d_gen = forward(domain_discriminator, grad_reverse(features_generated, lambda), binding);
    Var d_tgt = forward(domain_discriminator, grad_reverse(features_target, lambda), binding);
    Var total = add(sum(softplus(d_gen)), sum(softplus(neg(d_tgt))));
    return scale(total, 1.0 / static_cast<double>(n));
}

// Median Euclidean distance over all unordered row pairs.
inline double median_pairwise_distance(const Tensor& points) {
    const std::size_t n = points.rows(), d = points.cols();
    if (n < 2) throw ContractError("median_pairwise_distance: need at least 2 points");
    std::vector<double> dist;
    dist.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = points.at(i, c) - points.at(j, c);
                s += diff * diff;
            }
            dist.push_back(std::sqrt(s));
        }
    }
    const std::size_t mid = dist.size() / 2;
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
    double med = dist[mid];
    if (dist.size() % 2 == 0) {
        med = 0.5 * (med + *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid)));
    }
    return med;
}

// Row-stacks two matrices with equal widths.
inline Tensor stack_rows(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("stack_rows: widths " + shape_string(a.shape) + " and " + shape_string(b.shape));
    }
    Tensor out(Shape{a.rows() + b.rows(), a.cols()});
    std::copy(a.values.begin(), a.values.end(), out.values.begin());
    std::copy(b.values.begin(), b.values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

// Median-distance bandwidth over the union of both batches; falls back to 1
// when every point coincides.
inline double mmd_bandwidth(const Tensor& a, const Tensor& b) {
    const double med = median_pairwise_distance(stack_rows(a, b));
    return med > 0.0 ? med : 1.0;
}

// Biased squared MMD with a Gaussian kernel: mean k(a,a) + mean k(b,b) - 2 mean k(a,b).
inline Var mmd_loss(Var features_a, Var features_b, double bandwidth) {
    if (!(bandwidth > 0.0)) throw ContractError("mmd_loss: bandwidth must be positive");
    Var within = add(gaussian_kernel_mean(features_a, features_a, bandwidth),
                     gaussian_kernel_mean(features_b, features_b, bandwidth));
    return sub(within, scale(gaussian_kernel_mean(features_a, features_b, bandwidth), 2.0));
}

// ---------------------------------------------------------------------------
// Coefficients and the weighted total
// ---------------------------------------------------------------------------

struct CoefficientSchedule {
    double delta = 0.1;
    double alpha0 = 1.0;
    double beta0 = 1.0;
    double decay = 0.95;      // per-epoch factor r for alpha and beta
    std::size_t mu_gate = 50; // first epoch with mu = 1
    double lambda = 1.0;

    void validate() const {
        if (!(delta >= 0.0)) throw ContractError("schedule: delta must be >= 0");
        if (!(alpha0 >= 0.0)) throw ContractError("schedule: alpha0 must be >= 0");
        if (!(beta0 >= 0.0)) throw ContractError("schedule: beta0 must be >= 0");
        if (!(lambda >= 0.0)) throw ContractError("schedule: lambda must be >= 0");
        if (!(decay > 0.0 && decay <= 1.0)) throw ContractError("schedule: decay must be in (0, 1]");
    }
};

struct Coefficients {
    double delta = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double lambda = 0.0;
    double mu = 0.0;
};

inline Coefficients schedule(std::size_t epoch, const CoefficientSchedule& s) {
    const double decay = std::pow(s.decay, static_cast<double>(epoch));
    return Coefficients{s.delta, s.alpha0 * decay, s.beta0 * decay, s.lambda, epoch < s.mu_gate ? 0.0 : 1.0};
}

enum class LossTerm : std::size_t { Lik, AdvG, AdvD, Crs, Dis, Cls, Mmd };
inline constexpr std::size_t kLossTermCount = 7;

inline const char* loss_term_name(LossTerm t) {
    static constexpr std::array<const char*, kLossTermCount> names{"lik", "adv_g", "adv_d", "crs", "dis", "cls", "mmd"};
    return names[static_cast<std::size_t>(t)];
}

// Which terms take part in training; the ablation switches.
struct LossFlags {
    bool lik = true;
    bool adv = true; // generator side only; D_g keeps training
    bool crs = true;
    bool dis = true;
    bool cls = true;

    bool operator==(const LossFlags&) const = default;
};

// Loss values of one step or one epoch. Absent values are disabled terms.
struct LossBundle {
    std::array<std::optional<double>, kLossTermCount> values{};

    void set(LossTerm t, double v) { values[static_cast<std::size_t>(t)] = v; }
    void disable(LossTerm t) { values[static_cast<std::size_t>(t)].reset(); }
    bool enabled(LossTerm t) const { return values[static_cast<std::size_t>(t)].has_value(); }
    const std::optional<double>& get(LossTerm t) const { return values[static_cast<std::size_t>(t)]; }
};

// delta*lik + alpha*adv_g + beta*crs + lambda*(dis or mmd) + mu*cls over
// enabled terms. adv_d is the discriminator's own objective and is excluded.
inline double total_loss(const LossBundle& bundle, const Coefficients& c) {
    const std::array<std::pair<LossTerm, double>, 6> weighted{{
        {LossTerm::Lik, c.delta},
        {LossTerm::AdvG, c.alpha},
        {LossTerm::Crs, c.beta},
        {LossTerm::Dis, c.lambda},
        {LossTerm::Mmd, c.lambda},
        {LossTerm::Cls, c.mu},
    }};
    double total = 0.0;
    for (const auto& [term, weight] : weighted) {
        const auto& v = bundle.get(term);
        if (!v) continue;
        if (!std::isfinite(*v)) throw NumericError(std::string("total_loss: term ") + loss_term_name(term) + " is not finite");
        total += weight * *v;
    }
    return total;
}

} // namespace sdda
