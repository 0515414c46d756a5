#pragma once

// Synthetic domain pairs, splits, CSV persistence and source-classifier
// pretraining. Pretraining is the only place that reads source data.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sdda/adam.hpp"
#include "sdda/errors.hpp"
#include "sdda/losses.hpp"
#include "sdda/networks.hpp"
#include "sdda/random.hpp"
#include "sdda/tensor.hpp"

namespace sdda {

enum class DomainTag { Source, Target, Generated };

inline const char* domain_name(DomainTag t) {
    switch (t) {
    case DomainTag::Source: return "source";
    case DomainTag::Target: return "target";
    case DomainTag::Generated: return "generated";
    }
    return "?";
}

inline DomainTag parse_domain(const std::string& s) {
    if (s == "source") return DomainTag::Source;
    if (s == "target") return DomainTag::Target;
    if (s == "generated") return DomainTag::Generated;
    throw FormatError("unknown domain tag '" + s + "'");
}

// Features without labels. Training code only ever sees target data in this form.
struct UnlabeledDataset {
    Tensor features;
    DomainTag domain = DomainTag::Target;

    std::size_t size() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }
};

struct DomainDataset {
    Tensor features; // (n, d)
    std::vector<int> labels;
    std::size_t num_classes = 2;
    DomainTag domain = DomainTag::Source;
    std::uint64_t seed = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols(); }

    void validate() const {
        if (features.rank() != 2 || features.rows() != labels.size()) {
            throw ContractError("dataset: " + std::to_string(labels.size()) + " labels for features "
                                + shape_string(features.shape));
        }
        check_labels(labels, num_classes, "dataset");
    }

    UnlabeledDataset unlabeled() const { return UnlabeledDataset{Tensor(features.shape, features.values), domain}; }

    // Copy of the listed rows, in the listed order.
    DomainDataset subset(std::span<const std::size_t> rows) const {
        DomainDataset out{Tensor(Shape{rows.size(), dim()}), {}, num_classes, domain, seed};
        out.labels.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            std::copy_n(features.values.begin() + static_cast<std::ptrdiff_t>(rows[r] * dim()), dim(),
                        out.features.values.begin() + static_cast<std::ptrdiff_t>(r * dim()));
            out.labels.push_back(labels[rows[r]]);
        }
        return out;
    }
};

// Source data behind an access counter. Every read of features or labels is
// counted, so a run can prove it never touched the source after pretraining.
class GuardedDataset {
public:
    explicit GuardedDataset(DomainDataset data) : data_(std::move(data)) {}

    const DomainDataset& read() const {
        ++reads_;
        return data_;
    }

    std::size_t access_count() const { return reads_; }

private:
    DomainDataset data_;
    mutable std::size_t reads_ = 0;
};

// Interleaved half circles of radius 1: class 0 on the upper arc centred at
// the origin, class 1 on the lower arc centred at (1, 0.5). Points are
// evenly spaced in angle, shuffled, then jittered by Gaussian noise.
inline DomainDataset make_two_moons(std::size_t n, double noise_std, std::uint64_t seed) {
    if (n < 2) throw ContractError("make_two_moons: need n >= 2, got " + std::to_string(n));
    if (!(noise_std >= 0.0)) throw ContractError("make_two_moons: noise std must be >= 0");
    const std::size_t n0 = (n + 1) / 2, n1 = n / 2;
    DomainDataset data{Tensor(Shape{n, 2}), {}, 2, DomainTag::Source, seed};
    data.labels.resize(n);
    auto step = [](std::size_t i, std::size_t count) {
        return count == 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1);
    };
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t row = order[i];
        if (i < n0) {
            const double t = step(i, n0);
            data.features.at(row, 0) = std::cos(t);
            data.features.at(row, 1) = std::sin(t);
            data.labels[row] = 0;
        } else {
            const double t = step(i - n0, n1);
            data.features.at(row, 0) = 1.0 - std::cos(t);
            data.features.at(row, 1) = 0.5 - std::sin(t);
            data.labels[row] = 1;
        }
    }
    if (noise_std > 0.0) {
        for (double& v : data.features.values) v += noise_std * rng.normal();
    }
    return data;
}

// K isotropic Gaussian blobs with centres evenly spaced on a circle.
inline DomainDataset make_blobs(std::size_t n, std::size_t classes, double spread, double radius, std::uint64_t seed) {
    if (classes < 2) throw ContractError("make_blobs: need at least 2 classes");
    if (n < classes) throw ContractError("make_blobs: need at least one sample per class");
    DomainDataset data{Tensor(Shape{n, 2}), std::vector<int>(n), classes, DomainTag::Source, seed};
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = i % classes;
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
        data.features.at(i, 0) = radius * std::cos(angle) + spread * rng.normal();
        data.features.at(i, 1) = radius * std::sin(angle) + spread * rng.normal();
        data.labels[i] = static_cast<int>(k);
    }
    return data;
}

struct ShiftSpec {
    double rotation_deg = 0.0;
    std::vector<double> translation{0.0, 0.0};
    std::vector<double> scale{1.0, 1.0};
    double noise_std = 0.0;

    void validate(std::size_t dim) const {
        if (translation.size() != dim || scale.size() != dim) {
            throw ContractError("shift: translation and scale need " + std::to_string(dim) + " entries");
        }
        for (double s : scale) {
            if (!(s > 0.0)) throw ContractError("shift: scale factors must be positive");
        }
        if (!(noise_std >= 0.0)) throw ContractError("shift: noise std must be >= 0");
        if (rotation_deg != 0.0 && dim < 2) throw ContractError("shift: rotation needs at least 2 dimensions");
    }
};

// rotate (first two axes) -> scale -> translate -> add noise. Labels are kept.
inline DomainDataset apply_shift(const DomainDataset& data, const ShiftSpec& shift, std::uint64_t seed) {
    const std::size_t d = data.dim();
    shift.validate(d);
    DomainDataset out = data;
    out.domain = DomainTag::Target;
    Tensor& x = out.features;
    if (shift.rotation_deg != 0.0) {
        const double theta = shift.rotation_deg * std::numbers::pi / 180.0;
        const double c = std::cos(theta), s = std::sin(theta);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const double u = x.at(r, 0), v = x.at(r, 1);
            x.at(r, 0) = c * u - s * v;
            x.at(r, 1) = s * u + c * v;
        }
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t k = 0; k < d; ++k) {
            if (shift.scale[k] != 1.0) x.at(r, k) *= shift.scale[k];
            if (shift.translation[k] != 0.0) x.at(r, k) += shift.translation[k];
        }
    }
    if (shift.noise_std > 0.0) {
        Rng rng(seed);
        for (double& v : x.values) v += shift.noise_std * rng.normal();
    }
    return out;
}

// Label-stratified partition. Each class is shuffled and cut by the
// fractions (rounded, last part takes the remainder); each part is shuffled.
inline std::vector<DomainDataset> split(const DomainDataset& data, std::span<const double> fractions, std::uint64_t seed) {
    if (fractions.empty()) throw ContractError("split: no fractions");
    double total = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0)) throw ContractError("split: fractions must be positive");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ContractError("split: fractions must sum to 1");
    Rng rng(seed);
    std::vector<std::vector<std::size_t>> parts(fractions.size());
    for (std::size_t k = 0; k < data.num_classes; ++k) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (data.labels[i] == static_cast<int>(k)) rows.push_back(i);
        }
        rng.shuffle(rows);
        std::size_t start = 0;
        for (std::size_t p = 0; p < fractions.size(); ++p) {
            std::size_t count = p + 1 == fractions.size()
                                    ? rows.size() - start
                                    : static_cast<std::size_t>(std::llround(fractions[p] * static_cast<double>(rows.size())));
            count = std::min(count, rows.size() - start);
            parts[p].insert(parts[p].end(), rows.begin() + static_cast<std::ptrdiff_t>(start),
                            rows.begin() + static_cast<std::ptrdiff_t>(start + count));
            start += count;
        }
    }
    std::vector<DomainDataset> out;
    for (auto& rows : parts) {
        rng.shuffle(rows);
        if (rows.empty()) throw ContractError("split: a fraction produced an empty part");
        out.push_back(data.subset(rows));
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV: header x0,...,x{d-1},label,domain; floats in 17 significant digits.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& context) {
    double v = 0.0;
    const char* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) throw FormatError(context + ": bad number '" + s + "'");
    return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline void write_dataset_csv(const DomainDataset& data, std::ostream& out) {
    for (std::size_t k = 0; k < data.dim(); ++k) out << 'x' << k << ',';
    out << "label,domain\n";
    for (std::size_t r = 0; r < data.size(); ++r) {
        for (std::size_t k = 0; k < data.dim(); ++k) out << format_double(data.features.at(r, k)) << ',';
        out << data.labels[r] << ',' << domain_name(data.domain) << '\n';
    }
}

inline void save_dataset_csv(const DomainDataset& data, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_dataset_csv(data, out);
}

// Rows carry their own domain tag; the dataset takes the first row's. The
// class count is one more than the largest label unless given.
inline DomainDataset read_dataset_csv(std::istream& in, std::size_t num_classes = 0) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("dataset csv: missing header");
    const auto header = split_csv_line(line);
    if (header.size() < 3 || header[header.size() - 2] != "label" || header.back() != "domain") {
        throw FormatError("dataset csv: header must end with label,domain");
    }
    const std::size_t d = header.size() - 2;
    for (std::size_t k = 0; k < d; ++k) {
        if (header[k] != "x" + std::to_string(k)) throw FormatError("dataset csv: unexpected column '" + header[k] + "'");
    }
    std::vector<double> values;
    DomainDataset data;
    std::size_t line_no = 1;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        const std::string ctx = "dataset csv line " + std::to_string(line_no);
        if (cells.size() != d + 2) throw FormatError(ctx + ": expected " + std::to_string(d + 2) + " columns");
        for (std::size_t k = 0; k < d; ++k) values.push_back(parse_double(cells[k], ctx));
        int label = 0;
        const auto res = std::from_chars(cells[d].data(), cells[d].data() + cells[d].size(), label);
        if (res.ec != std::errc{} || label < 0) throw FormatError(ctx + ": bad label '" + cells[d] + "'");
        data.labels.push_back(label);
        max_label = std::max(max_label, label);
        const DomainTag tag = parse_domain(cells[d + 1]);
        if (data.labels.size() == 1) data.domain = tag;
    }
    if (data.labels.empty()) throw FormatError("dataset csv: no rows");
    data.features = Tensor(Shape{data.labels.size(), d}, std::move(values));
    data.num_classes = num_classes ? num_classes : static_cast<std::size_t>(std::max(max_label + 1, 2));
    data.validate();
    return data;
}

inline DomainDataset load_dataset_csv(const std::filesystem::path& path, std::size_t num_classes = 0) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return read_dataset_csv(in, num_classes);
}

// ---------------------------------------------------------------------------
// Source classifier pretraining
// ---------------------------------------------------------------------------

inline std::vector<int> argmax_rows(const Tensor& scores) {
    std::vector<int> out(scores.rows());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        const double* row = scores.values.data() + r * scores.cols();
        out[r] = static_cast<int>(std::max_element(row, row + scores.cols()) - row);
    }
    return out;
}

inline double match_fraction(std::span<const int> predicted, std::span<const int> labels) {
    if (labels.empty()) throw ContractError("accuracy: empty dataset");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// Accuracy of a single classifier network.
inline double classifier_accuracy(const MlpNetwork& net, const DomainDataset& data) {
    if (data.size() == 0) throw ContractError("accuracy: empty dataset");
    return match_fraction(argmax_rows(classify(net, data.features)), data.labels);
}

struct PretrainSettings {
    std::size_t epochs = 60;
    std::size_t batch_size = 64;
    double learning_rate = 1e-2;
    double test_fraction = 0.2;
    double min_accuracy = 0.95;
    std::uint64_t seed = 0;
};

struct PretrainReport {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double final_loss = 0.0;
    std::size_t epochs = 0;
};

struct PretrainResult {
    MlpNetwork classifier; // frozen
    PretrainReport report;
};

// Trains P_c with softmax cross-entropy on a stratified train split and
// freezes it. Throws PretrainingFailed below the minimum test accuracy.
inline PretrainResult pretrain_source_classifier(const DomainDataset& source, const MlpSpec& spec,
                                                 const PretrainSettings& settings) {
    source.validate();
    if (spec.input_dim() != source.dim() || spec.output_dim() != source.num_classes) {
        throw ContractError("pretrain: classifier spec does not match the source data");
    }
    const std::array<double, 2> fractions{1.0 - settings.test_fraction, settings.test_fraction};
    const auto parts = split(source, fractions, settings.seed ^ 0x5157ULL);
    const DomainDataset& train = parts[0];
    const DomainDataset& test = parts[1];

    Rng rng(settings.seed);
    MlpNetwork net = init_mlp(spec, rng.split());
    auto params = net.parameters();
    AdamState adam = make_adam_state(params, AdamHyper{settings.learning_rate, 0.9, 0.999, 1e-8});

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    double last_loss = 0.0;
    for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += settings.batch_size) {
            const std::size_t stop = std::min(order.size(), start + settings.batch_size);
            const DomainDataset batch = train.subset(std::span(order).subspan(start, stop - start));
            Tape tape;
            net.zero_grad();
            Var loss = class_consistency_loss(forward(net, tape.constant(batch.features)), batch.labels);
            tape.backward(loss);
            adam_step(params, adam);
            loss_sum += tape.value(loss).item();
            ++batches;
        }
        last_loss = loss_sum / static_cast<double>(batches);
    }
    for (Tensor* p : params) p->grad.reset();
    net.frozen = true;
    PretrainReport report{classifier_accuracy(net, train), classifier_accuracy(net, test), last_loss, settings.epochs};
    if (report.test_accuracy < settings.min_accuracy) {
        throw PretrainingFailed("pretrain: source test accuracy " + format_double(report.test_accuracy)
                                + " below required " + format_double(settings.min_accuracy));
    }
    return PretrainResult{std::move(net), report};
}

} // namespace sdda
