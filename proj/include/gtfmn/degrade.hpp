#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtfmn/tensor.hpp"

// Synthetic degradation: gamma darkening followed by bicubic (Catmull-Rom)
// downsampling, plus the BT.601 luma conversion the metrics run on.

namespace gtfmn {

struct DegradationSpec {
    double gamma = 2.2;
    bool sample_gamma = false;   // draw gamma per image from [gamma_lo, gamma_hi]
    double gamma_lo = 1.8;
    double gamma_hi = 2.6;
    std::size_t scale = 2;

    void validate() const {
        if (!(gamma > 0) || !(gamma_lo > 0) || !(gamma_hi >= gamma_lo)) {
            throw std::invalid_argument("DegradationSpec: gamma values must be positive");
        }
        if (scale != 2 && scale != 4) {
            throw std::invalid_argument("DegradationSpec: scale must be 2 or 4");
        }
    }
};

// v -> v^gamma elementwise; gamma > 1 darkens. Endpoints 0 and 1 are fixed.
template <typename Scalar>
Tensor<Scalar> gamma_darken(const Tensor<Scalar>& img, double gamma) {
    if (!(gamma > 0)) {
        throw std::invalid_argument("gamma_darken: gamma must be positive, got " +
                                    std::to_string(gamma));
    }
    Tensor<Scalar> out = Tensor<Scalar>::zeros(img.shape());
    const Scalar* src = img.data();
    Scalar* dst = out.data();
    for (std::size_t i = 0; i < img.numel(); ++i) {
        dst[i] = static_cast<Scalar>(std::pow(static_cast<double>(src[i]), gamma));
    }
    return out;
}

namespace detail {

// Catmull-Rom weight (bicubic with a = -0.5).
inline double catmull_rom(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

struct ResampleTap {
    std::ptrdiff_t index[4];
    double weight[4];
};

// Pixel-center mapping with edge-clamped taps.
inline std::vector<ResampleTap> resample_taps(std::size_t in, std::size_t out) {
    std::vector<ResampleTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const double base = std::floor(src);
        const double t = src - base;
        ResampleTap tap;
        for (int k = -1; k <= 2; ++k) {
            std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(base) + k;
            if (idx < 0) idx = 0;
            if (idx >= static_cast<std::ptrdiff_t>(in)) idx = static_cast<std::ptrdiff_t>(in) - 1;
            tap.index[k + 1] = idx;
            tap.weight[k + 1] = catmull_rom(static_cast<double>(k) - t);
        }
        taps[o] = tap;
    }
    return taps;
}

} // namespace detail

// Separable Catmull-Rom resampling of a C x H x W image; the result is
// clamped into [0,1] after both passes.
template <typename Scalar>
Tensor<Scalar> bicubic_resize(const Tensor<Scalar>& img, std::size_t out_h, std::size_t out_w) {
    if (img.rank() != 3) {
        throw std::invalid_argument("bicubic_resize: expected C x H x W image, got " +
                                    shape_str(img.shape()));
    }
    if (out_h == 0 || out_w == 0) {
        throw std::invalid_argument("bicubic_resize: target dimensions must be positive");
    }
    const std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
    const auto taps_x = detail::resample_taps(W, out_w);
    const auto taps_y = detail::resample_taps(H, out_h);

    // Horizontal pass in double precision, clamp only at the very end.
    std::vector<double> mid(C * H * out_w);
    const Scalar* src = img.data();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            const Scalar* row = src + (c * H + y) * W;
            double* out_row = mid.data() + (c * H + y) * out_w;
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& t = taps_x[x];
                double acc = 0;
                for (int k = 0; k < 4; ++k) acc += t.weight[k] * double(row[t.index[k]]);
                out_row[x] = acc;
            }
        }
    }

    Tensor<Scalar> out = Tensor<Scalar>::zeros({C, out_h, out_w});
    Scalar* dst = out.data();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& t = taps_y[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                double acc = 0;
                for (int k = 0; k < 4; ++k) {
                    acc += t.weight[k] * mid[(c * H + std::size_t(t.index[k])) * out_w + x];
                }
                acc = acc < 0.0 ? 0.0 : (acc > 1.0 ? 1.0 : acc);
                dst[(c * out_h + y) * out_w + x] = static_cast<Scalar>(acc);
            }
        }
    }
    return out;
}

enum class LumaConvention {
    kFullRange,    // Y = 0.299 R + 0.587 G + 0.114 B
    kStudioSwing,  // Y' = (16 + 219 Y) / 255
};

// BT.601 luma of an N x 3 x H x W image -> N x 1 x H x W.
template <typename Scalar>
Tensor<Scalar> rgb_to_y(const Tensor<Scalar>& img,
                        LumaConvention convention = LumaConvention::kFullRange) {
    if (img.rank() != 4 || img.extent(1) != 3) {
        throw std::invalid_argument("rgb_to_y: expected N x 3 x H x W image, got " +
                                    shape_str(img.shape()));
    }
    const std::size_t N = img.extent(0), H = img.extent(2), W = img.extent(3);
    const std::size_t plane = H * W;
    Tensor<Scalar> out = Tensor<Scalar>::zeros({N, 1, H, W});
    const Scalar* src = img.data();
    Scalar* dst = out.data();
    for (std::size_t n = 0; n < N; ++n) {
        const Scalar* r = src + n * 3 * plane;
        const Scalar* g = r + plane;
        const Scalar* b = g + plane;
        Scalar* y = dst + n * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            double v = 0.299 * double(r[i]) + 0.587 * double(g[i]) + 0.114 * double(b[i]);
            if (convention == LumaConvention::kStudioSwing) {
                v = (16.0 + 219.0 * v) / 255.0;
            }
            y[i] = static_cast<Scalar>(v);
        }
    }
    return out;
}

// Crop a C x H x W image to H2 x W2 starting at (top, left).
template <typename Scalar>
Tensor<Scalar> crop_image(const Tensor<Scalar>& img, std::size_t top, std::size_t left,
                          std::size_t h2, std::size_t w2) {
    if (img.rank() != 3) {
        throw std::invalid_argument("crop_image: expected C x H x W image");
    }
    const std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
    if (top + h2 > H || left + w2 > W || h2 == 0 || w2 == 0) {
        throw std::invalid_argument("crop_image: window exceeds image bounds");
    }
    Tensor<Scalar> out = Tensor<Scalar>::zeros({C, h2, w2});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < h2; ++y)
            for (std::size_t x = 0; x < w2; ++x)
                out.data()[(c * h2 + y) * w2 + x] = img.data()[(c * H + top + y) * W + left + x];
    return out;
}

} // namespace gtfmn
