#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gtfmn/rng.hpp"

namespace gtfmn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename Scalar>
class Tape;

// Dense row-major n-d array with an optional gradient buffer. Copying a
// Tensor copies a handle; the payload is shared. Values are immutable by
// convention once an op has produced them, grads accumulate in place.
template <typename Scalar>
class Tensor {
    static_assert(std::is_floating_point_v<Scalar>);

public:
    using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
    using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return Tensor(std::move(shape), Scalar{0});
    }

    static Tensor ones(Shape shape) {
        return Tensor(std::move(shape), Scalar{1});
    }

    static Tensor full(Shape shape, Scalar value) {
        return Tensor(std::move(shape), value);
    }

    static Tensor from(std::vector<Scalar> values, Shape shape) {
        if (values.size() != numel_of(shape)) {
            throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                        " values do not fill shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<Payload>();
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        return t;
    }

    static Tensor scalar(Scalar value) { return from({value}, {1}); }

    static Tensor rand_uniform(Shape shape, Rng& rng, Scalar lo = 0, Scalar hi = 1) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.impl_->values) v = static_cast<Scalar>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor rand_normal(Shape shape, Rng& rng, Scalar stddev = 1) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.impl_->values) v = static_cast<Scalar>(rng.normal() * stddev);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->values.size(); }
    std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }

    Scalar* data() { return impl_->values.data(); }
    const Scalar* data() const { return impl_->values.data(); }
    std::vector<Scalar>& values() { return impl_->values; }
    const std::vector<Scalar>& values() const { return impl_->values; }

    ArrayMap array() { return ArrayMap(impl_->values.data(), static_cast<Eigen::Index>(numel())); }
    ConstArrayMap array() const {
        return ConstArrayMap(impl_->values.data(), static_cast<Eigen::Index>(numel()));
    }

    // Flat offset of an (n, c, h, w) coordinate; rank must be 4.
    std::size_t offset4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        const Shape& s = impl_->shape;
        return ((n * s[1] + c) * s[2] + h) * s[3] + w;
    }

    Scalar& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return impl_->values[offset4(n, c, h, w)];
    }
    Scalar at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return impl_->values[offset4(n, c, h, w)];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        if (flag && impl_->grad.size() != impl_->values.size()) {
            impl_->grad.assign(impl_->values.size(), Scalar{0});
        }
        return *this;
    }

    bool has_grad() const { return impl_ && impl_->grad.size() == impl_->values.size(); }

    std::vector<Scalar>& grad() {
        ensure_grad();
        return impl_->grad;
    }
    const std::vector<Scalar>& grad() const {
        if (!has_grad()) {
            throw std::runtime_error("Tensor::grad: gradient buffer not populated");
        }
        return impl_->grad;
    }

    void ensure_grad() {
        if (impl_->grad.size() != impl_->values.size()) {
            impl_->grad.assign(impl_->values.size(), Scalar{0});
        }
    }

    void zero_grad() {
        if (impl_ && !impl_->grad.empty()) {
            std::fill(impl_->grad.begin(), impl_->grad.end(), Scalar{0});
        }
    }

    // Deep copy of values; grad and graph links are not carried over.
    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<Payload>();
        t.impl_->shape = impl_->shape;
        t.impl_->values = impl_->values;
        return t;
    }

    Tensor reshaped(Shape shape) const {
        if (numel_of(shape) != numel()) {
            throw std::invalid_argument("Tensor::reshaped: " + shape_str(impl_->shape) +
                                        " cannot take shape " + shape_str(shape));
        }
        Tensor t = clone();
        t.impl_->shape = std::move(shape);
        return t;
    }

    bool all_finite() const {
        for (Scalar v : impl_->values) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    // Stable identity of the shared payload, for graph introspection.
    const void* id() const { return impl_.get(); }

private:
    struct Payload {
        Shape shape;
        std::vector<Scalar> values;
        std::vector<Scalar> grad;
        bool requires_grad = false;
    };

    Tensor(Shape shape, Scalar fill) {
        impl_ = std::make_shared<Payload>();
        impl_->values.assign(numel_of(shape), fill);
        impl_->shape = std::move(shape);
    }

    std::shared_ptr<Payload> impl_;
};

// Execution-ordered record of differentiable operations. Ops append nodes
// while a tape is active on the current thread; backward() replays them in
// reverse. One tape per training step, one thread per tape.
template <typename Scalar>
class Tape {
public:
    struct Node {
        std::string op;
        std::vector<Tensor<Scalar>> inputs;
        Tensor<Scalar> output;
        std::function<void()> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() {
        if (active() == this) active() = nullptr;
    }

    // RAII activation; restores the previously active tape on destruction.
    class Scope {
    public:
        explicit Scope(Tape& tape) : previous_(active()) { active() = &tape; }
        ~Scope() { active() = previous_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

    // RAII suspension, e.g. while a finite-difference probe re-runs forward.
    class Pause {
    public:
        Pause() : previous_(active()) { active() = nullptr; }
        ~Pause() { active() = previous_; }
        Pause(const Pause&) = delete;
        Pause& operator=(const Pause&) = delete;

    private:
        Tape* previous_;
    };

    static Tape* current() { return active(); }

    void record(std::string op, std::vector<Tensor<Scalar>> inputs,
                Tensor<Scalar> output, std::function<void()> backward) {
        for (auto& in : inputs) {
            if (in.requires_grad()) in.ensure_grad();
        }
        output.ensure_grad();
        nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output),
                              std::move(backward)});
    }

    void backward(const Tensor<Scalar>& loss) {
        if (consumed_) {
            throw std::runtime_error("Tape::backward: tape already consumed; reset() first");
        }
        if (!loss.defined() || loss.numel() != 1) {
            throw std::invalid_argument("Tape::backward: loss must be a scalar tensor");
        }
        bool reachable = false;
        for (const Node& node : nodes_) {
            if (node.output.id() == loss.id()) reachable = true;
        }
        if (!reachable) {
            throw std::invalid_argument("Tape::backward: loss is not connected to this tape");
        }
        consumed_ = true;
        Tensor<Scalar> seed = loss;
        seed.ensure_grad();
        seed.grad()[0] = Scalar{1};
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->backward) it->backward();
        }
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

private:
    static Tape*& active() {
        static thread_local Tape* tape = nullptr;
        return tape;
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

} // namespace gtfmn
