#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "gtfmn/degrade.hpp"
#include "gtfmn/tensor.hpp"

// Fidelity metrics on the BT.601 Y channel: PSNR with peak 255, MSE on the
// 0..255 scale, and single-scale SSIM (11x11 Gaussian window, sigma 1.5,
// K1 0.01, K2 0.03, dynamic range 1). A border of `border_crop` pixels is
// excluded on every side before anything is measured.

namespace gtfmn {

struct MetricReport {
    double psnr = 0.0;  // dB; +inf sentinel when MSE is exactly zero
    double mse = 0.0;   // on the 0..255 scale
    double ssim = 0.0;
    std::size_t border_crop = 0;
};

namespace detail {

// Y plane as doubles after the border crop; accepts 3 x H x W images.
template <typename Scalar>
std::vector<double> luma_plane(const Tensor<Scalar>& img, std::size_t crop, std::size_t& h,
                               std::size_t& w, LumaConvention convention) {
    if (img.rank() != 3 || img.extent(0) != 3) {
        throw std::invalid_argument("metrics: expected 3 x H x W image, got " +
                                    shape_str(img.shape()));
    }
    const std::size_t H = img.extent(1), W = img.extent(2);
    if (H <= 2 * crop || W <= 2 * crop) {
        throw std::invalid_argument("metrics: border crop " + std::to_string(crop) +
                                    " leaves no pixels of " + shape_str(img.shape()));
    }
    h = H - 2 * crop;
    w = W - 2 * crop;
    std::vector<double> y(h * w);
    const Scalar* r = img.data();
    const Scalar* g = r + H * W;
    const Scalar* b = g + H * W;
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t src = (i + crop) * W + (j + crop);
            double v = 0.299 * double(r[src]) + 0.587 * double(g[src]) + 0.114 * double(b[src]);
            if (convention == LumaConvention::kStudioSwing) v = (16.0 + 219.0 * v) / 255.0;
            y[i * w + j] = v;
        }
    }
    return y;
}

inline const std::vector<double>& gaussian_window_11() {
    static const std::vector<double> window = [] {
        std::vector<double> w(11 * 11);
        const double sigma = 1.5;
        double total = 0;
        for (int i = 0; i < 11; ++i) {
            for (int j = 0; j < 11; ++j) {
                const double dy = i - 5, dx = j - 5;
                w[i * 11 + j] = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
                total += w[i * 11 + j];
            }
        }
        for (double& v : w) v /= total;
        return w;
    }();
    return window;
}

} // namespace detail

// PSNR (dB) and MSE on the 0..255 scale, Y channel, cropped. MSE == 0 maps
// to the +infinity PSNR sentinel.
template <typename Scalar>
MetricReport psnr_mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& ref,
                      std::size_t border_crop,
                      LumaConvention convention = LumaConvention::kFullRange) {
    if (pred.shape() != ref.shape()) {
        throw std::invalid_argument("psnr_mse: shape mismatch " + shape_str(pred.shape()) +
                                    " vs " + shape_str(ref.shape()));
    }
    std::size_t h = 0, w = 0;
    const auto yp = detail::luma_plane(pred, border_crop, h, w, convention);
    const auto yr = detail::luma_plane(ref, border_crop, h, w, convention);
    double acc = 0;
    for (std::size_t i = 0; i < yp.size(); ++i) {
        const double d = (yp[i] - yr[i]) * 255.0;
        acc += d * d;
    }
    MetricReport rep;
    rep.border_crop = border_crop;
    rep.mse = acc / double(yp.size());
    rep.psnr = rep.mse == 0.0 ? std::numeric_limits<double>::infinity()
                              : 10.0 * std::log10(255.0 * 255.0 / rep.mse);
    return rep;
}

// Single-scale SSIM on the Y channel over all fully valid window positions.
template <typename Scalar>
double ssim(const Tensor<Scalar>& pred, const Tensor<Scalar>& ref, std::size_t border_crop,
            LumaConvention convention = LumaConvention::kFullRange) {
    if (pred.shape() != ref.shape()) {
        throw std::invalid_argument("ssim: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                    shape_str(ref.shape()));
    }
    std::size_t h = 0, w = 0;
    const auto yp = detail::luma_plane(pred, border_crop, h, w, convention);
    const auto yr = detail::luma_plane(ref, border_crop, h, w, convention);
    if (h < 11 || w < 11) {
        throw std::invalid_argument("ssim: image smaller than the 11x11 window after crop");
    }
    const auto& win = detail::gaussian_window_11();
    constexpr double kC1 = (0.01 * 1.0) * (0.01 * 1.0);
    constexpr double kC2 = (0.03 * 1.0) * (0.03 * 1.0);

    double total = 0;
    std::size_t count = 0;
    for (std::size_t cy = 0; cy + 11 <= h; ++cy) {
        for (std::size_t cx = 0; cx + 11 <= w; ++cx) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < 11; ++i) {
                for (int j = 0; j < 11; ++j) {
                    const double wt = win[i * 11 + j];
                    const double a = yp[(cy + i) * w + (cx + j)];
                    const double b = yr[(cy + i) * w + (cx + j)];
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * (a * b);  // grouped so ssim(a,b) == ssim(b,a) bitwise
                }
            }
            const double vx = sxx - mx * mx;
            const double vy = syy - my * my;
            const double cov = sxy - mx * my;
            const double num = (2 * mx * my + kC1) * (2 * cov + kC2);
            const double den = (mx * mx + my * my + kC1) * (vx + vy + kC2);
            total += num / den;
            ++count;
        }
    }
    return total / double(count);
}

// Full report for one image pair.
template <typename Scalar>
MetricReport evaluate_pair(const Tensor<Scalar>& pred, const Tensor<Scalar>& ref,
                           std::size_t border_crop,
                           LumaConvention convention = LumaConvention::kFullRange) {
    MetricReport rep = psnr_mse(pred, ref, border_crop, convention);
    rep.ssim = ssim(pred, ref, border_crop, convention);
    return rep;
}

} // namespace gtfmn
