#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtfmn/serialize.hpp"
#include "gtfmn/tensor.hpp"

namespace gtfmn {

// Adam with bias correction. First/second moment buffers mirror the
// parameter shapes; the step counter starts at zero and increases once per
// accepted step. A non-finite gradient rejects the whole step before any
// state is touched.
template <typename Scalar>
class Adam {
public:
    struct Options {
        Scalar lr = Scalar(2e-4);
        Scalar beta1 = Scalar(0.9);
        Scalar beta2 = Scalar(0.999);
        Scalar eps = Scalar(1e-8);
    };

    explicit Adam(std::vector<NamedTensor<Scalar>> params, Options options = {})
        : params_(std::move(params)), options_(options) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto& p : params_) {
            m_.push_back(std::vector<Scalar>(p.tensor.numel(), Scalar{0}));
            v_.push_back(std::vector<Scalar>(p.tensor.numel(), Scalar{0}));
        }
    }

    void step() {
        for (auto& p : params_) {
            if (!p.tensor.has_grad()) {
                throw std::runtime_error("Adam::step: parameter '" + p.name +
                                         "' has no gradient");
            }
            for (Scalar g : p.tensor.grad()) {
                if (!std::isfinite(g)) {
                    throw std::runtime_error("Adam::step: non-finite gradient in '" + p.name +
                                             "'; step rejected");
                }
            }
        }
        ++t_;
        const Scalar c1 = Scalar{1} - std::pow(options_.beta1, Scalar(t_));
        const Scalar c2 = Scalar{1} - std::pow(options_.beta2, Scalar(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& theta = params_[i].tensor.values();
            const auto& grad = params_[i].tensor.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < theta.size(); ++k) {
                const Scalar g = grad[k];
                m[k] = options_.beta1 * m[k] + (Scalar{1} - options_.beta1) * g;
                v[k] = options_.beta2 * v[k] + (Scalar{1} - options_.beta2) * g * g;
                const Scalar mhat = m[k] / c1;
                const Scalar vhat = v[k] / c2;
                theta[k] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    std::uint64_t step_count() const { return t_; }
    Scalar learning_rate() const { return options_.lr; }
    void set_learning_rate(Scalar lr) { options_.lr = lr; }
    const std::vector<NamedTensor<Scalar>>& parameters() const { return params_; }

private:
    std::vector<NamedTensor<Scalar>> params_;
    Options options_;
    std::vector<std::vector<Scalar>> m_;
    std::vector<std::vector<Scalar>> v_;
    std::uint64_t t_ = 0;
};

} // namespace gtfmn
