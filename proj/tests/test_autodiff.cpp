#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "sdda/adam.hpp"
#include "sdda/autodiff.hpp"
#include "sdda/random.hpp"
#include "support/grad_suite.hpp"

using namespace sdda;

TEST(Tensor, RejectsMismatchedValues) {
    EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5, 0.0)), DimensionError);
    EXPECT_THROW(Tensor(Shape{0, 3}), DimensionError);
    EXPECT_EQ(Tensor(Shape{2, 3}).size(), 6u);
}

TEST(Tape, NonFiniteInputIsNumericError) {
    Tape tape;
    EXPECT_THROW(tape.constant(make_vector({1.0, std::nan("")})), NumericError);
    EXPECT_THROW(tape.input(make_vector({INFINITY})), NumericError);
}

TEST(Tape, MatmulShapes) {
    Tape tape;
    Var a = tape.constant(Tensor(Shape{2, 3}, 1.0));
    Var b = tape.constant(Tensor(Shape{3, 4}, 1.0));
    EXPECT_EQ(tape.value(matmul(a, b)).shape, (Shape{2, 4}));
    try {
        matmul(a, a);
        FAIL();
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Tape, BroadcastRulesAreNarrow) {
    Tape tape;
    Var a = tape.constant(Tensor(Shape{2, 3}, 1.0));
    EXPECT_NO_THROW(add(a, tape.constant(Tensor(Shape{3}, 1.0))));
    EXPECT_THROW(add(a, tape.constant(Tensor(Shape{2}, 1.0))), DimensionError);
    EXPECT_THROW(add(a, tape.constant(Tensor(Shape{3, 2}, 1.0))), DimensionError);
    EXPECT_THROW(mul(a, tape.constant(Tensor(Shape{3}, 1.0))), DimensionError);
}

TEST(Tape, SimpleValues) {
    Tape tape;
    EXPECT_EQ(tape.value(tanh(tape.constant(Tensor(Shape{2, 2})))).values, std::vector<double>(4, 0.0));
    const Tensor sm = tape.value(softmax(tape.constant(Tensor(Shape{1, 4}))));
    for (double v : sm.values) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Tape, MeanGradient) {
    Tape tape;
    Var x = tape.input(make_vector({1, 2, 3, 4}));
    tape.backward(mean(x));
    EXPECT_EQ(tape.grad(x), (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
}

TEST(Tape, SquareGradient) {
    Tape tape;
    Var x = tape.input(make_vector({3.0}));
    tape.backward(sum(mul(x, x)));
    EXPECT_DOUBLE_EQ(tape.grad(x)[0], 6.0);
}

TEST(Tape, NonScalarLossIsContractError) {
    Tape tape;
    Var x = tape.input(make_vector({1, 2}));
    EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Tape, DetachedNodeGetsZeroGradient) {
    Tape tape;
    Var x = tape.input(make_vector({1, 2}));
    Var y = tape.input(make_vector({5, 6}));
    tape.backward(sum(mul(detach(x), y)));
    EXPECT_EQ(tape.grad(x), (std::vector<double>{0.0, 0.0}));
    EXPECT_EQ(tape.grad(y), (std::vector<double>{1.0, 2.0}));
}

TEST(Tape, RecordsAreTopological) {
    Tape tape;
    Rng rng(3);
    Var x = tape.input(sdda::testing::random_tensor({3, 4}, rng));
    Var w = tape.input(sdda::testing::random_tensor({4, 2}, rng));
    Var h = tanh(matmul(x, w));
    tape.backward(mean(add(h, log_softmax(h))));
    std::vector<bool> seen(tape.size(), false);
    for (const auto& rec : tape.records()) {
        for (std::size_t in : rec.inputs) {
            EXPECT_LT(in, rec.output);
            EXPECT_TRUE(seen[in]);
        }
        EXPECT_FALSE(seen[rec.output]);
        seen[rec.output] = true;
    }
    EXPECT_EQ(std::count(seen.begin(), seen.end(), true), static_cast<long>(tape.size()));
}

TEST(Tape, ReusedNodeAccumulatesBranches) {
    // f = sum(tanh(x) * x + 2x): the gradient with x reused in three places
    // equals the sum of the three single-branch gradients.
    Rng rng(8);
    const Tensor xv = sdda::testing::random_tensor({2, 3}, rng);
    Tape tape;
    Var x = tape.input(xv);
    tape.backward(sum(add(mul(tanh(x), x), scale(x, 2.0))));
    const auto g = tape.grad(x);

    auto branch = [&](int which) {
        Tape t;
        Var a = t.input(xv);
        Var c = t.constant(xv);
        Var loss = which == 0 ? sum(mul(tanh(a), c)) : which == 1 ? sum(mul(tanh(c), a)) : sum(scale(a, 2.0));
        t.backward(loss);
        return t.grad(a);
    };
    const auto b0 = branch(0), b1 = branch(1), b2 = branch(2);
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_NEAR(g[k], b0[k] + b1[k] + b2[k], 1e-12);
}

TEST(Tape, ParameterGradientsAccumulateAcrossBackwardCalls) {
    Tensor p = make_vector({1.0, -2.0});
    p.zero_grad();
    for (int i = 0; i < 2; ++i) {
        Tape tape;
        tape.backward(sum(mul(tape.parameter(p), tape.constant(make_vector({3.0, 4.0})))));
    }
    EXPECT_EQ(*p.grad, (std::vector<double>{6.0, 8.0}));
}

TEST(Logsumexp, KnownValues) {
    Tape tape;
    EXPECT_NEAR(tape.value(logsumexp(tape.constant(make_vector({0, 0})))).item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(tape.value(logsumexp(tape.constant(make_vector({1000, 1000})))).item(), 1000.0 + std::log(2.0), 1e-12);
}

TEST(Logsumexp, MatchesNaiveFormula) {
    Rng rng(11);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> v(5);
        for (double& x : v) x = rng.uniform(-10.0, 10.0);
        double naive = 0.0;
        for (double x : v) naive += std::exp(x);
        Tape tape;
        EXPECT_NEAR(tape.value(logsumexp(tape.constant(make_vector(v)))).item(), std::log(naive), 1e-12);
    }
}

TEST(Logsumexp, ShiftInvariance) {
    Rng rng(12);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> v(4), w(4);
        const double c = rng.uniform(-50.0, 50.0);
        for (std::size_t k = 0; k < 4; ++k) {
            v[k] = rng.uniform(-5.0, 5.0);
            w[k] = v[k] + c;
        }
        Tape tape;
        const double a = tape.value(logsumexp(tape.constant(make_vector(v)))).item();
        const double b = tape.value(logsumexp(tape.constant(make_vector(w)))).item();
        EXPECT_NEAR(b, a + c, 1e-12);
    }
}

TEST(Softmax, RowsAreDistributions) {
    Rng rng(13);
    for (int i = 0; i < 20; ++i) {
        Tape tape;
        const Tensor out = tape.value(softmax(tape.constant(sdda::testing::random_tensor({4, 5}, rng, 20.0))));
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 5; ++c) {
                EXPECT_GE(out.at(r, c), 0.0);
                EXPECT_LE(out.at(r, c), 1.0);
                s += out.at(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(StableFunctions, ExtremeInputsStayFinite) {
    Tape tape;
    Var x = tape.input(make_vector({-800.0, 800.0}));
    tape.backward(add(sum(softplus(x)), sum(sigmoid(x))));
    EXPECT_DOUBLE_EQ(tape.value(softplus(x))[1], 800.0);
    for (double g : tape.grad(x)) EXPECT_TRUE(std::isfinite(g));
}

TEST(GradReverse, ForwardIdentityBackwardScaled) {
    Tape tape;
    Var x = tape.input(make_vector({1.5, -2.0}));
    Var y = grad_reverse(x, 1.0);
    EXPECT_EQ(tape.value(y).values, (std::vector<double>{1.5, -2.0}));
    tape.backward(sum(y));
    EXPECT_EQ(tape.grad(x), (std::vector<double>{-1.0, -1.0}));

    Tape t2;
    Var a = t2.input(make_vector({0.3}));
    t2.backward(scale(grad_reverse(a, 0.5), 2.0));
    EXPECT_EQ(t2.grad(a)[0], -1.0);
}

TEST(GradReverse, TwiceIsIdentityForward) {
    Tape tape;
    Var x = tape.input(make_vector({0.1, 7.0, -3.0}));
    EXPECT_EQ(tape.value(grad_reverse(grad_reverse(x, 0.7), 0.7)).values, tape.value(x).values);
}

TEST(GradReverse, FactorIsExactlyMinusLambda) {
    for (double lambda : {0.0, 0.25, 0.5, 1.0, 2.0, 3.5}) {
        Tape tape;
        Var x = tape.input(make_vector({2.0}));
        tape.backward(scale(grad_reverse(x, lambda), 1.0));
        EXPECT_EQ(tape.grad(x)[0], -lambda);
    }
}

TEST(GradientSuite, EveryPrimitiveMatchesFiniteDifferences) {
    for (const auto& c : sdda::testing::run_gradient_suite(20, 2024)) {
        EXPECT_GE(c.instances, 20u) << c.name;
        EXPECT_LT(c.worst_error, sdda::testing::kFdTolerance) << c.name;
    }
}

TEST(GradientSuite, ThreeLayerMlp) {
    Rng rng(21);
    for (int i = 0; i < 20; ++i) {
        MlpNetwork net = init_mlp(mlp_spec({4, 6, 5, 1}, Head::SigmoidScalar), rng.split());
        const Tensor x = sdda::testing::random_tensor({3, 4}, rng);
        EXPECT_LT(sdda::testing::max_parameter_fd_error(net, [&](Tape& t) { return mean(forward(net, t.constant(x))); }),
                  sdda::testing::kFdTolerance);
    }
}

TEST(Adam, ZeroGradientLeavesParamsButCountsStep) {
    Tensor p = make_vector({1.0, 2.0});
    std::vector<Tensor*> params{&p};
    AdamState s = make_adam_state(params);
    std::vector<double> g(2, 0.0);
    std::vector<const std::vector<double>*> grads{&g};
    adam_step(params, grads, s);
    EXPECT_EQ(p.values, (std::vector<double>{1.0, 2.0}));
    EXPECT_EQ(s.t, 1u);
}

TEST(Adam, FirstStepClosedForm) {
    // With bias correction the first step is lr * g / (|g| + eps).
    for (double g0 : {0.3, -4.0, 1e-3, 250.0}) {
        Tensor p = make_vector({0.5});
        std::vector<Tensor*> params{&p};
        AdamHyper h;
        AdamState s = make_adam_state(params, h);
        std::vector<double> g{g0};
        std::vector<const std::vector<double>*> grads{&g};
        adam_step(params, grads, s);
        const double expected = 0.5 - h.learning_rate * g0 / (std::abs(g0) + h.epsilon);
        EXPECT_NEAR(p[0], expected, 1e-15);
    }
}

TEST(Adam, MatchesReferenceRecurrence) {
    Tensor p = make_vector({0.2, -0.1});
    std::vector<Tensor*> params{&p};
    AdamHyper h{1e-2, 0.9, 0.99, 1e-8};
    AdamState s = make_adam_state(params, h);
    double ref[2] = {0.2, -0.1}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 5; ++t) {
        std::vector<double> g{std::sin(t * 1.0), std::cos(t * 2.0)};
        std::vector<const std::vector<double>*> grads{&g};
        adam_step(params, grads, s);
        for (int k = 0; k < 2; ++k) {
            m[k] = h.beta1 * m[k] + (1 - h.beta1) * g[k];
            v[k] = h.beta2 * v[k] + (1 - h.beta2) * g[k] * g[k];
            const double mh = m[k] / (1 - std::pow(h.beta1, t)), vh = v[k] / (1 - std::pow(h.beta2, t));
            ref[k] -= h.learning_rate * mh / (std::sqrt(vh) + h.epsilon);
        }
    }
    EXPECT_NEAR(p[0], ref[0], 1e-14);
    EXPECT_NEAR(p[1], ref[1], 1e-14);
    EXPECT_EQ(s.t, 5u);
}

TEST(Adam, ShapeMismatchIsContractError) {
    Tensor p = make_vector({1.0, 2.0});
    std::vector<Tensor*> params{&p};
    AdamState s = make_adam_state(params);
    std::vector<double> g(3, 1.0);
    std::vector<const std::vector<double>*> grads{&g};
    EXPECT_THROW(adam_step(params, grads, s), ContractError);
}

TEST(Adam, Deterministic) {
    auto run = [] {
        Tensor p = make_vector({0.1, 0.2, 0.3});
        std::vector<Tensor*> params{&p};
        AdamState s = make_adam_state(params);
        for (int i = 0; i < 10; ++i) {
            std::vector<double> g{0.1 * i, -0.2, std::sqrt(i + 1.0)};
            std::vector<const std::vector<double>*> grads{&g};
            adam_step(params, grads, s);
        }
        return p.values;
    };
    EXPECT_EQ(run(), run());
}

TEST(Rng, BelowIsInRangeAndShuffleIsPermutation) {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.below(7), 7u);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    rng.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}

TEST(Rng, NormalMoments) {
    Rng rng(6);
    double s = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}
