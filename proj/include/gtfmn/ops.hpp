#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gtfmn/tensor.hpp"

// Free-function operations on Tensor. Every op here computes eagerly and,
// when a Tape is active and an input requires grad, records its backward
// closure onto the tape. Shapes follow the N x C x H x W convention for
// activations and O x I x kH x kW for convolution weights.

namespace gtfmn {

namespace detail {

template <typename Scalar>
bool should_record(std::initializer_list<const Tensor<Scalar>*> inputs) {
    if (Tape<Scalar>::current() == nullptr) return false;
    for (const Tensor<Scalar>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Broadcasting is restricted: equal ranks, and each axis either matches or
// is a singleton on one side.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size()) {
        throw std::invalid_argument(std::string(op) + ": rank mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
    }
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1) {
            out[i] = a[i];
        } else if (a[i] == 1) {
            out[i] = b[i];
        } else {
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) +
                                        " and " + shape_str(b) + " do not broadcast");
        }
    }
    return out;
}

// Row-major strides, zeroed on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> st(s.size());
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[i] = (s[i] == 1 && out[i] != 1) ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

// Calls visit(flat_out, flat_a, flat_b) for every output element.
template <typename Visit>
void broadcast_walk(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, Visit visit) {
    const std::size_t rank = out.size();
    const std::size_t total = numel_of(out);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < total; ++o) {
        visit(o, ia, ib);
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < out[ax]) break;
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

// Element-wise binary op with broadcast; FwdF(a, b) -> out,
// DaF(a, b, dy) -> contribution to da, DbF(a, b, dy) -> to db.
template <typename Scalar, typename FwdF, typename DaF, typename DbF>
Tensor<Scalar> binary_op(const char* name, const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                         FwdF fwd, DaF dfa, DbF dfb) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    Tensor<Scalar> out = Tensor<Scalar>::zeros(out_shape);

    if (a.shape() == b.shape()) {
        const Scalar* pa = a.data();
        const Scalar* pb = b.data();
        Scalar* po = out.data();
        const std::size_t n = out.numel();
        for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        const auto sa = broadcast_strides(a.shape(), out_shape);
        const auto sb = broadcast_strides(b.shape(), out_shape);
        const Scalar* pa = a.data();
        const Scalar* pb = b.data();
        Scalar* po = out.data();
        broadcast_walk(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            po[o] = fwd(pa[ia], pb[ib]);
        });
    }

    if (should_record<Scalar>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sa_t = a, sb_t = b, so_t = out;
        Tape<Scalar>::current()->record(name, {a, b}, out, [=]() mutable {
            const Scalar* pa = sa_t.data();
            const Scalar* pb = sb_t.data();
            const Scalar* dy = so_t.grad().data();
            const bool wa = sa_t.requires_grad();
            const bool wb = sb_t.requires_grad();
            Scalar* ga = wa ? sa_t.grad().data() : nullptr;
            Scalar* gb = wb ? sb_t.grad().data() : nullptr;
            if (sa_t.shape() == sb_t.shape()) {
                const std::size_t n = so_t.numel();
                for (std::size_t i = 0; i < n; ++i) {
                    if (wa) ga[i] += dfa(pa[i], pb[i], dy[i]);
                    if (wb) gb[i] += dfb(pa[i], pb[i], dy[i]);
                }
            } else {
                const Shape& os = so_t.shape();
                const auto sta = broadcast_strides(sa_t.shape(), os);
                const auto stb = broadcast_strides(sb_t.shape(), os);
                broadcast_walk(os, sta, stb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                    if (wa) ga[ia] += dfa(pa[ia], pb[ib], dy[o]);
                    if (wb) gb[ib] += dfb(pa[ia], pb[ib], dy[o]);
                });
            }
        });
    }
    return out;
}

// Element-wise unary op; FwdF(x) -> y, DF(x, y, dy) -> dx contribution.
template <typename Scalar, typename FwdF, typename DF>
Tensor<Scalar> unary_op(const char* name, const Tensor<Scalar>& x, FwdF fwd, DF dfx) {
    Tensor<Scalar> out = Tensor<Scalar>::zeros(x.shape());
    const Scalar* px = x.data();
    Scalar* po = out.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);

    if (should_record<Scalar>({&x})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sx = x, so = out;
        Tape<Scalar>::current()->record(name, {x}, out, [=]() mutable {
            const Scalar* px = sx.data();
            const Scalar* py = so.data();
            const Scalar* dy = so.grad().data();
            Scalar* gx = sx.grad().data();
            const std::size_t n = sx.numel();
            for (std::size_t i = 0; i < n; ++i) gx[i] += dfx(px[i], py[i], dy[i]);
        });
    }
    return out;
}

template <typename Scalar>
void im2col(const Scalar* in, std::size_t cpg, std::size_t H, std::size_t W,
            std::size_t kH, std::size_t kW, std::size_t stride, std::size_t pad,
            std::size_t Ho, std::size_t Wo, Scalar* col) {
    const std::ptrdiff_t iH = static_cast<std::ptrdiff_t>(H);
    const std::ptrdiff_t iW = static_cast<std::ptrdiff_t>(W);
    const std::size_t L = cpg * kH * kW;
    std::size_t p = 0;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow, ++p) {
            Scalar* dst = col + p * L;
            std::size_t l = 0;
            for (std::size_t c = 0; c < cpg; ++c) {
                for (std::size_t kh = 0; kh < kH; ++kh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * stride + kh) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kw = 0; kw < kW; ++kw, ++l) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * stride + kw) - static_cast<std::ptrdiff_t>(pad);
                        dst[l] = (ih >= 0 && ih < iH && iw >= 0 && iw < iW)
                                     ? in[(c * H + static_cast<std::size_t>(ih)) * W +
                                          static_cast<std::size_t>(iw)]
                                     : Scalar{0};
                    }
                }
            }
        }
    }
}

template <typename Scalar>
void col2im_add(const Scalar* col, std::size_t cpg, std::size_t H, std::size_t W,
                std::size_t kH, std::size_t kW, std::size_t stride, std::size_t pad,
                std::size_t Ho, std::size_t Wo, Scalar* din) {
    const std::ptrdiff_t iH = static_cast<std::ptrdiff_t>(H);
    const std::ptrdiff_t iW = static_cast<std::ptrdiff_t>(W);
    const std::size_t L = cpg * kH * kW;
    std::size_t p = 0;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow, ++p) {
            const Scalar* src = col + p * L;
            std::size_t l = 0;
            for (std::size_t c = 0; c < cpg; ++c) {
                for (std::size_t kh = 0; kh < kH; ++kh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * stride + kh) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kw = 0; kw < kW; ++kw, ++l) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * stride + kw) - static_cast<std::ptrdiff_t>(pad);
                        if (ih >= 0 && ih < iH && iw >= 0 && iw < iW) {
                            din[(c * H + static_cast<std::size_t>(ih)) * W +
                                static_cast<std::size_t>(iw)] += src[l];
                        }
                    }
                }
            }
        }
    }
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
    if (x >= Scalar{0}) {
        return Scalar{1} / (Scalar{1} + std::exp(-x));
    }
    const Scalar e = std::exp(x);
    return e / (Scalar{1} + e);
}

} // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    return detail::binary_op<Scalar>(
        "add", a, b, [](Scalar x, Scalar y) { return x + y; },
        [](Scalar, Scalar, Scalar dy) { return dy; },
        [](Scalar, Scalar, Scalar dy) { return dy; });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    return detail::binary_op<Scalar>(
        "sub", a, b, [](Scalar x, Scalar y) { return x - y; },
        [](Scalar, Scalar, Scalar dy) { return dy; },
        [](Scalar, Scalar, Scalar dy) { return -dy; });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    return detail::binary_op<Scalar>(
        "mul", a, b, [](Scalar x, Scalar y) { return x * y; },
        [](Scalar, Scalar y, Scalar dy) { return dy * y; },
        [](Scalar x, Scalar, Scalar dy) { return dy * x; });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    return detail::binary_op<Scalar>(
        "div", a, b, [](Scalar x, Scalar y) { return x / y; },
        [](Scalar, Scalar y, Scalar dy) { return dy / y; },
        [](Scalar x, Scalar y, Scalar dy) { return -dy * x / (y * y); });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar k) {
    return detail::unary_op<Scalar>(
        "scale", x, [k](Scalar v) { return k * v; },
        [k](Scalar, Scalar, Scalar dy) { return k * dy; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar k) {
    return detail::unary_op<Scalar>(
        "add_scalar", x, [k](Scalar v) { return v + k; },
        [](Scalar, Scalar, Scalar dy) { return dy; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
    return detail::unary_op<Scalar>(
        "sigmoid", x, [](Scalar v) { return detail::stable_sigmoid(v); },
        [](Scalar, Scalar y, Scalar dy) { return dy * y * (Scalar{1} - y); });
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& x, Scalar slope) {
    return detail::unary_op<Scalar>(
        "leaky_relu", x, [slope](Scalar v) { return v > Scalar{0} ? v : slope * v; },
        [slope](Scalar v, Scalar, Scalar dy) { return v > Scalar{0} ? dy : slope * dy; });
}

// Saturating clamp; the gradient is zero on and outside the bounds.
template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, Scalar lo, Scalar hi) {
    if (!(lo <= hi)) {
        throw std::invalid_argument("clamp: lo must not exceed hi");
    }
    return detail::unary_op<Scalar>(
        "clamp", x,
        [lo, hi](Scalar v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](Scalar v, Scalar, Scalar dy) {
            return (v > lo && v < hi) ? dy : Scalar{0};
        });
}

// Mean over the spatial plane: N x C x H x W -> N x C x 1 x 1. This is also
// the global average pooling used by the illumination stream.
template <typename Scalar>
Tensor<Scalar> spatial_mean(const Tensor<Scalar>& x) {
    if (x.rank() != 4) {
        throw std::invalid_argument("spatial_mean: expected rank-4 input, got " +
                                    shape_str(x.shape()));
    }
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (H == 0 || W == 0) {
        throw std::invalid_argument("spatial_mean: empty spatial extent in " +
                                    shape_str(x.shape()));
    }
    Tensor<Scalar> out = Tensor<Scalar>::zeros({N, C, 1, 1});
    const std::size_t plane = H * W;
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        Scalar acc{0};
        const Scalar* p = px + nc * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        po[nc] = acc / static_cast<Scalar>(plane);
    }

    if (detail::should_record<Scalar>({&x})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sx = x, so = out;
        Tape<Scalar>::current()->record("spatial_mean", {x}, out, [=]() mutable {
            const std::size_t plane2 = sx.extent(2) * sx.extent(3);
            const Scalar inv = Scalar{1} / static_cast<Scalar>(plane2);
            const Scalar* dy = so.grad().data();
            Scalar* gx = sx.grad().data();
            const std::size_t groups = sx.extent(0) * sx.extent(1);
            for (std::size_t nc = 0; nc < groups; ++nc) {
                const Scalar g = dy[nc] * inv;
                Scalar* p = gx + nc * plane2;
                for (std::size_t i = 0; i < plane2; ++i) p[i] += g;
            }
        });
    }
    return out;
}

// Layer normalization across the channel axis, independently per sample and
// spatial position. Affine parameters are applied by the caller.
template <typename Scalar>
Tensor<Scalar> channel_norm(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-6)) {
    if (x.rank() != 4) {
        throw std::invalid_argument("channel_norm: expected rank-4 input, got " +
                                    shape_str(x.shape()));
    }
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t plane = H * W;
    Tensor<Scalar> out = Tensor<Scalar>::zeros(x.shape());
    std::vector<Scalar> inv_std(N * plane);

    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t s = 0; s < plane; ++s) {
            const std::size_t base = n * C * plane + s;
            Scalar mean{0};
            for (std::size_t c = 0; c < C; ++c) mean += px[base + c * plane];
            mean /= static_cast<Scalar>(C);
            Scalar var{0};
            for (std::size_t c = 0; c < C; ++c) {
                const Scalar d = px[base + c * plane] - mean;
                var += d * d;
            }
            var /= static_cast<Scalar>(C);
            const Scalar is = Scalar{1} / std::sqrt(var + eps);
            inv_std[n * plane + s] = is;
            for (std::size_t c = 0; c < C; ++c) {
                po[base + c * plane] = (px[base + c * plane] - mean) * is;
            }
        }
    }

    if (detail::should_record<Scalar>({&x})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sx = x, so = out;
        auto saved_inv = std::make_shared<std::vector<Scalar>>(std::move(inv_std));
        Tape<Scalar>::current()->record("channel_norm", {x}, out, [=]() mutable {
            const std::size_t C2 = sx.extent(1);
            const std::size_t plane2 = sx.extent(2) * sx.extent(3);
            const Scalar* xh = so.data(); // normalized values
            const Scalar* dy = so.grad().data();
            Scalar* gx = sx.grad().data();
            const Scalar invC = Scalar{1} / static_cast<Scalar>(C2);
            for (std::size_t n = 0; n < sx.extent(0); ++n) {
                for (std::size_t s = 0; s < plane2; ++s) {
                    const std::size_t base = n * C2 * plane2 + s;
                    Scalar mean_dy{0}, mean_dyxh{0};
                    for (std::size_t c = 0; c < C2; ++c) {
                        const Scalar d = dy[base + c * plane2];
                        mean_dy += d;
                        mean_dyxh += d * xh[base + c * plane2];
                    }
                    mean_dy *= invC;
                    mean_dyxh *= invC;
                    const Scalar is = (*saved_inv)[n * plane2 + s];
                    for (std::size_t c = 0; c < C2; ++c) {
                        gx[base + c * plane2] +=
                            is * (dy[base + c * plane2] - mean_dy -
                                  xh[base + c * plane2] * mean_dyxh);
                    }
                }
            }
        });
    }
    return out;
}

// 2-d convolution with zero padding, im2col lowering and an Eigen GEMM.
// input N x Cin x H x W, weight Cout x Cin/groups x kH x kW, bias Cout.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, std::size_t stride = 1,
                      std::size_t padding = 0, std::size_t groups = 1) {
    if (input.rank() != 4 || weight.rank() != 4) {
        throw std::invalid_argument("conv2d: input and weight must be rank 4, got " +
                                    shape_str(input.shape()) + " and " +
                                    shape_str(weight.shape()));
    }
    if (stride == 0) {
        throw std::invalid_argument("conv2d: stride must be positive");
    }
    if (groups == 0) {
        throw std::invalid_argument("conv2d: groups must be positive");
    }
    const std::size_t N = input.extent(0), Cin = input.extent(1);
    const std::size_t H = input.extent(2), W = input.extent(3);
    const std::size_t Cout = weight.extent(0), kH = weight.extent(2), kW = weight.extent(3);
    if (Cin % groups != 0 || Cout % groups != 0) {
        throw std::invalid_argument("conv2d: channel counts (" + std::to_string(Cin) + ", " +
                                    std::to_string(Cout) + ") not divisible by groups=" +
                                    std::to_string(groups));
    }
    if (weight.extent(1) != Cin / groups) {
        throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) +
                                    " inconsistent with input channels " + std::to_string(Cin) +
                                    " and groups " + std::to_string(groups));
    }
    if (bias.rank() != 1 || bias.extent(0) != Cout) {
        throw std::invalid_argument("conv2d: bias must have shape [" + std::to_string(Cout) +
                                    "], got " + shape_str(bias.shape()));
    }
    if (H + 2 * padding < kH || W + 2 * padding < kW) {
        throw std::invalid_argument("conv2d: kernel " + std::to_string(kH) + "x" +
                                    std::to_string(kW) + " exceeds padded input " +
                                    shape_str(input.shape()) + " with padding " +
                                    std::to_string(padding));
    }

    const std::size_t Ho = (H + 2 * padding - kH) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - kW) / stride + 1;
    const std::size_t cpg = Cin / groups;
    const std::size_t opg = Cout / groups;
    const std::size_t L = cpg * kH * kW;
    const std::size_t P = Ho * Wo;

    using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ColMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    Tensor<Scalar> out = Tensor<Scalar>::zeros({N, Cout, Ho, Wo});
    std::vector<Scalar> col(L * P);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t g = 0; g < groups; ++g) {
            detail::im2col(input.data() + (n * Cin + g * cpg) * H * W, cpg, H, W, kH, kW,
                           stride, padding, Ho, Wo, col.data());
            Eigen::Map<const RowMat> Wm(weight.data() + g * opg * L,
                                        static_cast<Eigen::Index>(opg),
                                        static_cast<Eigen::Index>(L));
            Eigen::Map<const ColMat> Km(col.data(), static_cast<Eigen::Index>(L),
                                        static_cast<Eigen::Index>(P));
            Eigen::Map<RowMat> Om(out.data() + (n * Cout + g * opg) * P,
                                  static_cast<Eigen::Index>(opg),
                                  static_cast<Eigen::Index>(P));
            Om.noalias() = Wm * Km;
            Eigen::Map<const Vec> bv(bias.data() + g * opg, static_cast<Eigen::Index>(opg));
            Om.colwise() += bv;
        }
    }

    if (detail::should_record<Scalar>({&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor<Scalar> si = input, sw = weight, sb = bias, so = out;
        Tape<Scalar>::current()->record(
            "conv2d", {input, weight, bias}, out,
            [=, str = stride, pad = padding, grp = groups]() mutable {
                const std::size_t N2 = si.extent(0), Cin2 = si.extent(1);
                const std::size_t H2 = si.extent(2), W2 = si.extent(3);
                const std::size_t Cout2 = sw.extent(0), kH2 = sw.extent(2), kW2 = sw.extent(3);
                const std::size_t Ho2 = so.extent(2), Wo2 = so.extent(3);
                const std::size_t cpg2 = Cin2 / grp, opg2 = Cout2 / grp;
                const std::size_t L2 = cpg2 * kH2 * kW2, P2 = Ho2 * Wo2;

                const bool want_in = si.requires_grad();
                const bool want_w = sw.requires_grad();
                const bool want_b = sb.requires_grad();
                std::vector<Scalar> col2(L2 * P2);
                for (std::size_t n = 0; n < N2; ++n) {
                    for (std::size_t g = 0; g < grp; ++g) {
                        Eigen::Map<const RowMat> Gm(so.grad().data() + (n * Cout2 + g * opg2) * P2,
                                                    static_cast<Eigen::Index>(opg2),
                                                    static_cast<Eigen::Index>(P2));
                        if (want_w || want_in) {
                            detail::im2col(si.data() + (n * Cin2 + g * cpg2) * H2 * W2, cpg2,
                                           H2, W2, kH2, kW2, str, pad, Ho2, Wo2, col2.data());
                        }
                        if (want_w) {
                            Eigen::Map<const ColMat> Km(col2.data(),
                                                        static_cast<Eigen::Index>(L2),
                                                        static_cast<Eigen::Index>(P2));
                            Eigen::Map<RowMat> dWm(sw.grad().data() + g * opg2 * L2,
                                                   static_cast<Eigen::Index>(opg2),
                                                   static_cast<Eigen::Index>(L2));
                            dWm.noalias() += Gm * Km.transpose();
                        }
                        if (want_in) {
                            Eigen::Map<const RowMat> Wm(sw.data() + g * opg2 * L2,
                                                        static_cast<Eigen::Index>(opg2),
                                                        static_cast<Eigen::Index>(L2));
                            ColMat dK = Wm.transpose() * Gm;
                            detail::col2im_add(dK.data(), cpg2, H2, W2, kH2, kW2, str, pad,
                                               Ho2, Wo2,
                                               si.grad().data() + (n * Cin2 + g * cpg2) * H2 * W2);
                        }
                        if (want_b) {
                            for (std::size_t c = 0; c < opg2; ++c) {
                                sb.grad()[g * opg2 + c] += Gm.row(static_cast<Eigen::Index>(c)).sum();
                            }
                        }
                    }
                }
            });
    }
    return out;
}

// Sub-pixel rearrangement: N x (C*s^2) x H x W -> N x C x sH x sW with
// out[n, c, h*s+i, w*s+j] = in[n, c*s^2 + i*s + j, h, w].
template <typename Scalar>
Tensor<Scalar> pixel_shuffle(const Tensor<Scalar>& x, std::size_t s) {
    if (x.rank() != 4) {
        throw std::invalid_argument("pixel_shuffle: expected rank-4 input, got " +
                                    shape_str(x.shape()));
    }
    if (s == 0) {
        throw std::invalid_argument("pixel_shuffle: scale must be positive");
    }
    const std::size_t N = x.extent(0), Cs = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (Cs % (s * s) != 0) {
        throw std::invalid_argument("pixel_shuffle: " + std::to_string(Cs) +
                                    " channels not divisible by s^2=" + std::to_string(s * s));
    }
    const std::size_t C = Cs / (s * s);
    Tensor<Scalar> out = Tensor<Scalar>::zeros({N, C, H * s, W * s});
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t j = 0; j < s; ++j) {
                    const Scalar* src = px + ((n * Cs + c * s * s + i * s + j) * H) * W;
                    for (std::size_t h = 0; h < H; ++h) {
                        Scalar* dst = po + ((n * C + c) * H * s + h * s + i) * W * s + j;
                        for (std::size_t w = 0; w < W; ++w) {
                            dst[w * s] = src[h * W + w];
                        }
                    }
                }
            }
        }
    }

    if (detail::should_record<Scalar>({&x})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sx = x, so = out;
        Tape<Scalar>::current()->record("pixel_shuffle", {x}, out, [=]() mutable {
            const std::size_t N2 = sx.extent(0), Cs2 = sx.extent(1);
            const std::size_t H2 = sx.extent(2), W2 = sx.extent(3);
            const std::size_t C2 = Cs2 / (s * s);
            const Scalar* dy = so.grad().data();
            Scalar* gx = sx.grad().data();
            for (std::size_t n = 0; n < N2; ++n) {
                for (std::size_t c = 0; c < C2; ++c) {
                    for (std::size_t i = 0; i < s; ++i) {
                        for (std::size_t j = 0; j < s; ++j) {
                            Scalar* dst = gx + ((n * Cs2 + c * s * s + i * s + j) * H2) * W2;
                            for (std::size_t h = 0; h < H2; ++h) {
                                const Scalar* src =
                                    dy + ((n * C2 + c) * H2 * s + h * s + i) * W2 * s + j;
                                for (std::size_t w = 0; w < W2; ++w) {
                                    dst[h * W2 + w] += src[w * s];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Exact inverse of pixel_shuffle.
template <typename Scalar>
Tensor<Scalar> pixel_unshuffle(const Tensor<Scalar>& x, std::size_t s) {
    if (x.rank() != 4) {
        throw std::invalid_argument("pixel_unshuffle: expected rank-4 input, got " +
                                    shape_str(x.shape()));
    }
    if (s == 0) {
        throw std::invalid_argument("pixel_unshuffle: scale must be positive");
    }
    const std::size_t N = x.extent(0), C = x.extent(1), Hs = x.extent(2), Ws = x.extent(3);
    if (Hs % s != 0 || Ws % s != 0) {
        throw std::invalid_argument("pixel_unshuffle: spatial dims " + shape_str(x.shape()) +
                                    " not divisible by s=" + std::to_string(s));
    }
    const std::size_t H = Hs / s, W = Ws / s;
    Tensor<Scalar> out = Tensor<Scalar>::zeros({N, C * s * s, H, W});
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t j = 0; j < s; ++j) {
                    Scalar* dst = po + ((n * C * s * s + c * s * s + i * s + j) * H) * W;
                    for (std::size_t h = 0; h < H; ++h) {
                        const Scalar* src = px + ((n * C + c) * Hs + h * s + i) * Ws + j;
                        for (std::size_t w = 0; w < W; ++w) {
                            dst[h * W + w] = src[w * s];
                        }
                    }
                }
            }
        }
    }

    if (detail::should_record<Scalar>({&x})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sx = x, so = out;
        Tape<Scalar>::current()->record("pixel_unshuffle", {x}, out, [=]() mutable {
            const std::size_t N2 = sx.extent(0), C2 = sx.extent(1);
            const std::size_t Hs2 = sx.extent(2), Ws2 = sx.extent(3);
            const std::size_t H2 = Hs2 / s, W2 = Ws2 / s;
            const Scalar* dy = so.grad().data();
            Scalar* gx = sx.grad().data();
            for (std::size_t n = 0; n < N2; ++n) {
                for (std::size_t c = 0; c < C2; ++c) {
                    for (std::size_t i = 0; i < s; ++i) {
                        for (std::size_t j = 0; j < s; ++j) {
                            const Scalar* src =
                                dy + ((n * C2 * s * s + c * s * s + i * s + j) * H2) * W2;
                            for (std::size_t h = 0; h < H2; ++h) {
                                Scalar* dst = gx + ((n * C2 + c) * Hs2 + h * s + i) * Ws2 + j;
                                for (std::size_t w = 0; w < W2; ++w) {
                                    dst[w * s] += src[h * W2 + w];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Total sum reduced to a scalar tensor of shape [1].
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
    Tensor<Scalar> out = Tensor<Scalar>::scalar(x.array().sum());
    if (detail::should_record<Scalar>({&x})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sx = x, so = out;
        Tape<Scalar>::current()->record("sum", {x}, out, [=]() mutable {
            const Scalar dy = so.grad()[0];
            Scalar* gx = sx.grad().data();
            const std::size_t n = sx.numel();
            for (std::size_t i = 0; i < n; ++i) gx[i] += dy;
        });
    }
    return out;
}

// Mean absolute difference; the subgradient at exact ties is zero.
template <typename Scalar>
Tensor<Scalar> l1_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("l1_loss: shape mismatch " + shape_str(pred.shape()) +
                                    " vs " + shape_str(target.shape()));
    }
    const std::size_t n = pred.numel();
    const Scalar* pp = pred.data();
    const Scalar* pt = target.data();
    Scalar acc{0};
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(pp[i] - pt[i]);
    Tensor<Scalar> out = Tensor<Scalar>::scalar(acc / static_cast<Scalar>(n));

    if (detail::should_record<Scalar>({&pred, &target})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sp = pred, st = target, so = out;
        Tape<Scalar>::current()->record("l1_loss", {pred, target}, out, [=]() mutable {
            const std::size_t n2 = sp.numel();
            const Scalar g = so.grad()[0] / static_cast<Scalar>(n2);
            const Scalar* pp = sp.data();
            const Scalar* pt = st.data();
            const bool wp = sp.requires_grad();
            const bool wt = st.requires_grad();
            Scalar* gp = wp ? sp.grad().data() : nullptr;
            Scalar* gt = wt ? st.grad().data() : nullptr;
            for (std::size_t i = 0; i < n2; ++i) {
                const Scalar d = pp[i] - pt[i];
                const Scalar s = d > Scalar{0} ? g : (d < Scalar{0} ? -g : Scalar{0});
                if (wp) gp[i] += s;
                if (wt) gt[i] -= s;
            }
        });
    }
    return out;
}

// Mean absolute forward difference along both spatial axes of an
// N x C x H x W map; optional smoothness penalty for illumination maps.
template <typename Scalar>
Tensor<Scalar> total_variation(const Tensor<Scalar>& x) {
    if (x.rank() != 4) {
        throw std::invalid_argument("total_variation: expected rank-4 input, got " +
                                    shape_str(x.shape()));
    }
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t terms = N * C * ((H > 1 ? (H - 1) * W : 0) + (W > 1 ? H * (W - 1) : 0));
    const Scalar* px = x.data();
    Scalar acc{0};
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const Scalar* p = px + nc * H * W;
        for (std::size_t h = 0; h + 1 < H; ++h)
            for (std::size_t w = 0; w < W; ++w) acc += std::abs(p[(h + 1) * W + w] - p[h * W + w]);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w + 1 < W; ++w) acc += std::abs(p[h * W + w + 1] - p[h * W + w]);
    }
    Tensor<Scalar> out =
        Tensor<Scalar>::scalar(terms == 0 ? Scalar{0} : acc / static_cast<Scalar>(terms));

    if (detail::should_record<Scalar>({&x})) {
        out.set_requires_grad(true);
        Tensor<Scalar> sx = x, so = out;
        Tape<Scalar>::current()->record("total_variation", {x}, out, [=]() mutable {
            const std::size_t N2 = sx.extent(0), C2 = sx.extent(1);
            const std::size_t H2 = sx.extent(2), W2 = sx.extent(3);
            const std::size_t terms2 =
                N2 * C2 * ((H2 > 1 ? (H2 - 1) * W2 : 0) + (W2 > 1 ? H2 * (W2 - 1) : 0));
            if (terms2 == 0) return;
            const Scalar g = so.grad()[0] / static_cast<Scalar>(terms2);
            const Scalar* p = sx.data();
            Scalar* gx = sx.grad().data();
            for (std::size_t nc = 0; nc < N2 * C2; ++nc) {
                const std::size_t off = nc * H2 * W2;
                auto step = [&](std::size_t hi, std::size_t lo) {
                    const Scalar d = p[off + hi] - p[off + lo];
                    const Scalar s = d > Scalar{0} ? g : (d < Scalar{0} ? -g : Scalar{0});
                    gx[off + hi] += s;
                    gx[off + lo] -= s;
                };
                for (std::size_t h = 0; h + 1 < H2; ++h)
                    for (std::size_t w = 0; w < W2; ++w) step((h + 1) * W2 + w, h * W2 + w);
                for (std::size_t h = 0; h < H2; ++h)
                    for (std::size_t w = 0; w + 1 < W2; ++w) step(h * W2 + w + 1, h * W2 + w);
            }
        });
    }
    return out;
}

// Central-difference gradient estimate of a scalar-valued function. Used as
// the independent oracle against tape gradients; never records itself.
template <typename Scalar>
Tensor<Scalar> finite_difference_grad(const std::function<Scalar(const Tensor<Scalar>&)>& f,
                                      const Tensor<Scalar>& x, Scalar step) {
    if (!(step > Scalar{0})) {
        throw std::invalid_argument("finite_difference_grad: step must be positive");
    }
    typename Tape<Scalar>::Pause pause;
    Tensor<Scalar> probe = x.clone();
    if (!std::isfinite(f(probe))) {
        throw std::invalid_argument("finite_difference_grad: f(x) is not finite");
    }
    Tensor<Scalar> grad = Tensor<Scalar>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const Scalar saved = probe.data()[i];
        probe.data()[i] = saved + step;
        const Scalar fp = f(probe);
        probe.data()[i] = saved - step;
        const Scalar fm = f(probe);
        probe.data()[i] = saved;
        grad.data()[i] = (fp - fm) / (Scalar{2} * step);
    }
    return grad;
}

} // namespace gtfmn
