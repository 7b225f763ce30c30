#include <doctest.h>

#include <cmath>

#include "gtfmn/optim.hpp"
#include "test_helpers.hpp"

using namespace gtfmn;
using gtfmn::testing::close;

TEST_CASE("adam leaves parameters unchanged on zero gradient") {
    auto theta = Tensor<double>::from({0.5, -1.5}, {2});
    theta.set_requires_grad(true);
    Adam<double> adam({{"theta", theta}});
    adam.step();
    CHECK(theta.data()[0] == 0.5);
    CHECK(theta.data()[1] == -1.5);
    CHECK(adam.step_count() == 1);
}

TEST_CASE("adam with lr=0 is the identity") {
    auto theta = Tensor<double>::from({1.0}, {1});
    theta.set_requires_grad(true);
    Adam<double>::Options opts;
    opts.lr = 0.0;
    Adam<double> adam({{"theta", theta}}, opts);
    theta.grad()[0] = 2.7;
    adam.step();
    CHECK(theta.data()[0] == 1.0);
}

TEST_CASE("first adam step is sign-like with magnitude lr") {
    // Closed form: m1 = (1-b1) g, v1 = (1-b2) g^2; after bias correction
    // mhat = g, vhat = g^2, so delta = -lr * g / (|g| + eps) ~ -lr * sign(g).
    auto theta = Tensor<double>::from({1.0}, {1});
    theta.set_requires_grad(true);
    Adam<double> adam({{"theta", theta}});
    theta.grad()[0] = 3.0;
    adam.step();
    CHECK(close(theta.data()[0] - 1.0, -2e-4, 1e-6, 1e-9));
}

TEST_CASE("adam drives a quadratic toward zero") {
    // Loss 0.5 * theta^2, gradient theta itself.
    auto theta = Tensor<double>::from({1.0}, {1});
    theta.set_requires_grad(true);
    Adam<double>::Options opts;
    opts.lr = 2e-3;
    Adam<double> adam({{"theta", theta}}, opts);
    double after_100 = 0;
    for (int step = 1; step <= 500; ++step) {
        theta.zero_grad();
        theta.grad()[0] = theta.data()[0];
        const double before = std::abs(theta.data()[0]);
        adam.step();
        if (step <= 100) CHECK(std::abs(theta.data()[0]) < before);  // strict descent early
        if (step == 100) after_100 = std::abs(theta.data()[0]);
    }
    CHECK(after_100 < 0.9);
    CHECK(std::abs(theta.data()[0]) < after_100);
}

TEST_CASE("adam rejects non-finite gradients without touching state") {
    auto theta = Tensor<double>::from({1.0}, {1});
    theta.set_requires_grad(true);
    Adam<double> adam({{"theta", theta}});
    theta.grad()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(adam.step(), std::runtime_error);
    CHECK(theta.data()[0] == 1.0);
    CHECK(adam.step_count() == 0);
}

TEST_CASE("learning rate can be rescheduled mid-run") {
    auto theta = Tensor<double>::from({1.0}, {1});
    theta.set_requires_grad(true);
    Adam<double> adam({{"theta", theta}});
    CHECK(adam.learning_rate() == doctest::Approx(2e-4));
    adam.set_learning_rate(1e-4);
    CHECK(adam.learning_rate() == doctest::Approx(1e-4));
}
