#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "sdda/domains.hpp"

using namespace sdda;

namespace {

double distance(const Tensor& x, std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
        const double d = x.at(i, c) - x.at(j, c);
        s += d * d;
    }
    return std::sqrt(s);
}

// 1-nearest-neighbour accuracy of `test` against `train`, brute force.
double nearest_neighbour_accuracy(const DomainDataset& train, const DomainDataset& test) {
    std::size_t hits = 0;
    for (std::size_t q = 0; q < test.size(); ++q) {
        double best = INFINITY;
        int label = -1;
        for (std::size_t r = 0; r < train.size(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < train.dim(); ++c) {
                const double d = test.features.at(q, c) - train.features.at(r, c);
                s += d * d;
            }
            if (s < best) {
                best = s;
                label = train.labels[r];
            }
        }
        hits += label == test.labels[q] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

std::size_t count_label(const DomainDataset& d, int y) {
    return static_cast<std::size_t>(std::count(d.labels.begin(), d.labels.end(), y));
}

} // namespace

TEST(TwoMoons, CountsAndShape) {
    const DomainDataset d = make_two_moons(2001, 0.1, 1);
    EXPECT_EQ(d.features.shape, (Shape{2001, 2}));
    EXPECT_EQ(count_label(d, 0), 1001u);
    EXPECT_EQ(count_label(d, 1), 1000u);
    EXPECT_NO_THROW(d.validate());
    EXPECT_THROW(make_two_moons(1, 0.1, 1), ContractError);
    EXPECT_THROW(make_two_moons(10, -0.1, 1), ContractError);
}

TEST(TwoMoons, NoiselessPointsLieOnTheArcs) {
    const DomainDataset d = make_two_moons(400, 0.0, 2);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double x = d.features.at(i, 0), y = d.features.at(i, 1);
        if (d.labels[i] == 0) {
            EXPECT_NEAR(std::hypot(x, y), 1.0, 1e-12);
            EXPECT_GE(y, -1e-12);
        } else {
            EXPECT_NEAR(std::hypot(x - 1.0, y - 0.5), 1.0, 1e-12);
            EXPECT_LE(y, 0.5 + 1e-12);
        }
    }
}

TEST(TwoMoons, DeterministicUnderSeed) {
    EXPECT_EQ(make_two_moons(300, 0.1, 5).features.values, make_two_moons(300, 0.1, 5).features.values);
    EXPECT_NE(make_two_moons(300, 0.1, 5).features.values, make_two_moons(300, 0.1, 6).features.values);
}

// Nearest-neighbour check that the default moons are separable enough for a
// 95% classifier to exist.
TEST(TwoMoons, NearestNeighbourSeparability) {
    const DomainDataset d = make_two_moons(2000, 0.1, 11);
    const std::array<double, 2> fractions{0.8, 0.2};
    const auto parts = split(d, fractions, 3);
    EXPECT_GE(nearest_neighbour_accuracy(parts[0], parts[1]), 0.95);
}

TEST(Blobs, BalancedClassesAroundCircle) {
    const DomainDataset d = make_blobs(900, 3, 0.3, 3.0, 4);
    EXPECT_EQ(d.num_classes, 3u);
    for (int k = 0; k < 3; ++k) {
        EXPECT_EQ(count_label(d, k), 300u);
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (d.labels[i] != k) continue;
            mx += d.features.at(i, 0) / 300.0;
            my += d.features.at(i, 1) / 300.0;
        }
        const double angle = 2.0 * std::numbers::pi * k / 3.0;
        // standard error of the mean is 0.3 / sqrt(300) ~ 0.017
        EXPECT_NEAR(mx, 3.0 * std::cos(angle), 0.1);
        EXPECT_NEAR(my, 3.0 * std::sin(angle), 0.1);
    }
}

TEST(Shift, IdentityIsBitwise) {
    const DomainDataset d = make_two_moons(200, 0.1, 1);
    const DomainDataset s = apply_shift(d, ShiftSpec{}, 9);
    EXPECT_EQ(s.features.values, d.features.values);
    EXPECT_EQ(s.labels, d.labels);
    EXPECT_EQ(s.domain, DomainTag::Target);
}

TEST(Shift, QuarterTurn) {
    const DomainDataset d{Tensor(Shape{1, 2}, {1.0, 0.0}), {0}, 2, DomainTag::Source, 0};
    const DomainDataset s = apply_shift(d, ShiftSpec{90.0, {0.0, 0.0}, {1.0, 1.0}, 0.0}, 0);
    EXPECT_NEAR(s.features.at(0, 0), 0.0, 1e-12);
    EXPECT_NEAR(s.features.at(0, 1), 1.0, 1e-12);
}

TEST(Shift, RotationAndTranslationAreIsometric) {
    const DomainDataset d = make_two_moons(150, 0.1, 3);
    const DomainDataset s = apply_shift(d, ShiftSpec{45.0, {0.5, -0.3}, {1.0, 1.0}, 0.0}, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = i + 1; j < d.size(); ++j) {
            EXPECT_NEAR(distance(s.features, i, j), distance(d.features, i, j), 1e-9);
        }
    }
}

TEST(Shift, ScaleAndNoise) {
    const DomainDataset d = make_two_moons(4000, 0.0, 3);
    const DomainDataset scaled = apply_shift(d, ShiftSpec{0.0, {0.0, 0.0}, {2.0, 0.5}, 0.0}, 0);
    EXPECT_DOUBLE_EQ(scaled.features.at(7, 0), 2.0 * d.features.at(7, 0));
    EXPECT_DOUBLE_EQ(scaled.features.at(7, 1), 0.5 * d.features.at(7, 1));

    const DomainDataset noisy = apply_shift(d, ShiftSpec{0.0, {0.0, 0.0}, {1.0, 1.0}, 0.2}, 5);
    double ss = 0.0;
    for (std::size_t i = 0; i < noisy.features.size(); ++i) {
        const double e = noisy.features[i] - d.features[i];
        ss += e * e;
    }
    const double std_est = std::sqrt(ss / static_cast<double>(noisy.features.size()));
    EXPECT_NEAR(std_est, 0.2, 0.01);
    EXPECT_EQ(noisy.features.values, apply_shift(d, ShiftSpec{0.0, {0.0, 0.0}, {1.0, 1.0}, 0.2}, 5).features.values);
}

TEST(Shift, InvalidSpecs) {
    const DomainDataset d = make_two_moons(20, 0.1, 3);
    EXPECT_THROW(apply_shift(d, ShiftSpec{0.0, {0.0}, {1.0, 1.0}, 0.0}, 0), ContractError);
    EXPECT_THROW(apply_shift(d, ShiftSpec{0.0, {0.0, 0.0}, {1.0, 0.0}, 0.0}, 0), ContractError);
    EXPECT_THROW(apply_shift(d, ShiftSpec{0.0, {0.0, 0.0}, {1.0, 1.0}, -1.0}, 0), ContractError);
}

TEST(Split, StratifiedAndDisjoint) {
    const DomainDataset d = make_two_moons(1000, 0.1, 8);
    const std::array<double, 3> fractions{0.6, 0.2, 0.2};
    const auto parts = split(d, fractions, 4);
    ASSERT_EQ(parts.size(), 3u);
    EXPECT_EQ(parts[0].size() + parts[1].size() + parts[2].size(), 1000u);
    EXPECT_EQ(count_label(parts[0], 0), 300u);
    EXPECT_EQ(count_label(parts[1], 0), 100u);
    EXPECT_EQ(count_label(parts[2], 1), 100u);

    // every source row appears exactly once across the parts
    std::multiset<std::pair<double, double>> seen;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < p.size(); ++i) seen.insert({p.features.at(i, 0), p.features.at(i, 1)});
    }
    std::multiset<std::pair<double, double>> expected;
    for (std::size_t i = 0; i < d.size(); ++i) expected.insert({d.features.at(i, 0), d.features.at(i, 1)});
    EXPECT_EQ(seen, expected);
}

TEST(Split, DeterministicAndValidated) {
    const DomainDataset d = make_two_moons(100, 0.1, 8);
    const std::array<double, 2> f{0.8, 0.2};
    EXPECT_EQ(split(d, f, 1)[1].features.values, split(d, f, 1)[1].features.values);
    const std::array<double, 2> bad_sum{0.8, 0.3};
    EXPECT_THROW(split(d, bad_sum, 1), ContractError);
    const std::array<double, 2> negative{1.2, -0.2};
    EXPECT_THROW(split(d, negative, 1), ContractError);
}

TEST(Csv, RoundTripIsExact) {
    DomainDataset d = make_blobs(50, 3, 0.4, 2.0, 6);
    d.domain = DomainTag::Generated;
    std::stringstream buf;
    write_dataset_csv(d, buf);
    const DomainDataset back = read_dataset_csv(buf);
    EXPECT_EQ(back.features.values, d.features.values);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.num_classes, 3u);
    EXPECT_EQ(back.domain, DomainTag::Generated);
}

TEST(Csv, MalformedInput) {
    std::istringstream empty("");
    EXPECT_THROW(read_dataset_csv(empty), FormatError);
    std::istringstream header("a,b,label,domain\n");
    EXPECT_THROW(read_dataset_csv(header), FormatError);
    std::istringstream columns("x0,x1,label,domain\n1,2,0\n");
    EXPECT_THROW(read_dataset_csv(columns), FormatError);
    std::istringstream number("x0,x1,label,domain\n1,zz,0,source\n");
    EXPECT_THROW(read_dataset_csv(number), FormatError);
    std::istringstream tag("x0,x1,label,domain\n1,2,0,elsewhere\n");
    EXPECT_THROW(read_dataset_csv(tag), FormatError);
    std::istringstream label("x0,x1,label,domain\n1,2,-1,source\n");
    EXPECT_THROW(read_dataset_csv(label), FormatError);
    std::istringstream rows("x0,x1,label,domain\n");
    EXPECT_THROW(read_dataset_csv(rows), FormatError);
}

TEST(Guard, CountsEveryRead) {
    GuardedDataset g(make_two_moons(10, 0.1, 1));
    EXPECT_EQ(g.access_count(), 0u);
    (void)g.read();
    (void)g.read().labels;
    EXPECT_EQ(g.access_count(), 2u);
}

TEST(Pretrain, ReachesRequiredAccuracyAndFreezes) {
    const DomainDataset d = make_two_moons(2000, 0.1, 21);
    PretrainSettings settings;
    settings.seed = 3;
    const PretrainResult r = pretrain_source_classifier(d, arch::source_classifier(2, 2), settings);
    EXPECT_GE(r.report.test_accuracy, 0.95);
    EXPECT_TRUE(r.classifier.frozen);
    for (const Tensor& w : r.classifier.weights) EXPECT_FALSE(w.grad.has_value());
}

TEST(Pretrain, FailureIsReported) {
    const DomainDataset d = make_two_moons(200, 0.1, 21);
    PretrainSettings settings;
    settings.epochs = 1;
    settings.learning_rate = 1e-6;
    settings.min_accuracy = 0.99;
    EXPECT_THROW(pretrain_source_classifier(d, arch::source_classifier(2, 2), settings), PretrainingFailed);
    EXPECT_THROW(pretrain_source_classifier(d, arch::source_classifier(2, 3), settings), ContractError);
}
