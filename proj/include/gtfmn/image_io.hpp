#pragma once

#include <string>

#include "gtfmn/tensor.hpp"

// 8-bit PNG in and out of planar float tensors. Images are 3 x H x W (RGB)
// or 1 x H x W (grayscale) with values in [0,1]; conversion is v/255 on
// read and round(v*255) with clamping on write. Writer settings are pinned
// so identical pixels always produce identical bytes.

namespace gtfmn {

Tensor<float> read_png(const std::string& path);

void write_png(const std::string& path, const Tensor<float>& image);

} // namespace gtfmn
