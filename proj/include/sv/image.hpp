#pragma once

// 8-bit PNG I/O for float images in [0,1]. Images are (H,W,C) tensors with
// C = 1 (gray) or 3 (RGB). Values are clamped and rounded on save.

#include <string>

#include "sv/tensor.hpp"

namespace sv::img {

Tensor load_png(const std::string& path);
void save_png(const std::string& path, const Tensor& image);

}  // namespace sv::img
