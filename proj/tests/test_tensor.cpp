#include <doctest.h>

#include <set>
#include <thread>

#include "gtfmn/ops.hpp"
#include "gtfmn/tensor.hpp"

using namespace gtfmn;

TEST_CASE("tensor shape and data length stay consistent") {
    auto t = Tensor<float>::from({1.f, 2.f, 3.f, 4.f, 5.f, 6.f}, {2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.extent(0) == 2);
    CHECK_THROWS_AS(Tensor<float>::from({1.f, 2.f}, {2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
}

TEST_CASE("requires_grad allocates a matching zeroed grad buffer") {
    auto t = Tensor<double>::ones({3, 2});
    CHECK(!t.has_grad());
    t.set_requires_grad(true);
    REQUIRE(t.has_grad());
    CHECK(t.grad().size() == t.numel());
    for (double g : t.grad()) CHECK(g == 0.0);
}

TEST_CASE("zeros ones full fill as named") {
    auto z = Tensor<float>::zeros({2, 2});
    auto o = Tensor<float>::ones({2, 2});
    auto f = Tensor<float>::full({2, 2}, 0.25f);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(z.data()[i] == 0.f);
        CHECK(o.data()[i] == 1.f);
        CHECK(f.data()[i] == 0.25f);
    }
}

TEST_CASE("tape records operations in topological order") {
    auto x = Tensor<double>::from({1.0, 2.0, 3.0, 4.0}, {1, 1, 2, 2});
    x.set_requires_grad(true);
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        auto y = mul(x, x);
        auto z = sigmoid(y);
        auto loss = sum(add(z, x));
        tape.backward(loss);
    }
    REQUIRE(tape.size() > 0);
    // Every node input is either a leaf or the output of an earlier node.
    std::set<const void*> seen = {x.id()};
    for (const auto& node : tape.nodes()) {
        for (const auto& in : node.inputs) {
            const bool known = seen.count(in.id()) > 0 || !in.requires_grad();
            CHECK(known);
        }
        seen.insert(node.output.id());
    }
}

TEST_CASE("backward fills simple closed-form gradients") {
    SUBCASE("sum gives all-ones gradient") {
        auto x = Tensor<double>::from({0.3, -1.0, 2.5}, {3});
        x.set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto loss = sum(x);
        tape.backward(loss);
        for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
    }
    SUBCASE("sum of squares doubles the input") {
        auto x = Tensor<double>::from({1.0, -2.0}, {2});
        x.set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto loss = sum(mul(x, x));
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(2.0));
        CHECK(x.grad()[1] == doctest::Approx(-4.0));
    }
}

TEST_CASE("backward rejects misuse") {
    auto x = Tensor<double>::ones({2, 2});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto y = mul(x, x);

    SUBCASE("non-scalar loss") {
        CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
    }
    SUBCASE("double backward without reset") {
        auto loss = sum(y);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
        tape.reset();
        // After reset the tape is empty; the old loss is disconnected.
        CHECK_THROWS_AS(tape.backward(loss), std::invalid_argument);
    }
    SUBCASE("loss from a different tape is rejected") {
        auto loss = sum(y);
        Tape<double> other;
        CHECK_THROWS_AS(other.backward(loss), std::invalid_argument);
    }
}

TEST_CASE("ops outside a tape scope do not record") {
    auto x = Tensor<double>::ones({2});
    x.set_requires_grad(true);
    auto y = mul(x, x);
    CHECK(!y.requires_grad());
}

TEST_CASE("independent tapes work concurrently on separate threads") {
    auto worker = [](std::uint64_t seed, std::vector<double>* out) {
        Rng rng(seed);
        auto x = Tensor<double>::rand_uniform({1, 2, 6, 6}, rng, -1.0, 1.0);
        auto w = Tensor<double>::rand_normal({2, 2, 3, 3}, rng, 0.4);
        auto b = Tensor<double>::zeros({2});
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        for (int i = 0; i < 20; ++i) {
            x.zero_grad();
            w.zero_grad();
            Tape<double> tape;
            Tape<double>::Scope scope(tape);
            auto loss = sum(sigmoid(conv2d(x, w, b, 1, 1)));
            tape.backward(loss);
        }
        *out = x.grad();
    };
    std::vector<double> ga, gb, ga_seq;
    std::thread ta(worker, 7, &ga);
    std::thread tb(worker, 8, &gb);
    ta.join();
    tb.join();
    worker(7, &ga_seq);  // same seed sequentially
    REQUIRE(ga.size() == ga_seq.size());
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(ga[i] == ga_seq[i]);
    CHECK(ga != gb);
}

TEST_CASE("forward ops keep finite inputs finite") {
    Rng rng(7);
    auto x = Tensor<double>::rand_uniform({2, 4, 6, 6}, rng, -3.0, 3.0);
    auto w = Tensor<double>::rand_normal({4, 4, 3, 3}, rng, 0.5);
    auto b = Tensor<double>::rand_normal({4}, rng, 0.5);
    auto y = conv2d(x, w, b, 1, 1);
    y = channel_norm(y);
    y = sigmoid(y);
    y = leaky_relu(y, 0.2);
    y = clamp(y, -0.5, 1.5);
    CHECK(y.all_finite());
}
