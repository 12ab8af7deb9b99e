#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "evq/tensor.hpp"

namespace evq {

/// Dense raster, row-major, channel-interleaved (y, x, c), values nominally in [0, 1].
struct ImageBuffer {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<float> pixels;

  ImageBuffer() = default;
  ImageBuffer(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }

  bool same_shape(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  ImageBuffer clamped() const {
    ImageBuffer r = *this;
    for (auto& p : r.pixels) p = std::clamp(p, 0.0f, 1.0f);
    return r;
  }

  bool operator==(const ImageBuffer&) const = default;
};

/// h x w grid of codebook indices; kMask marks cells still to be generated.
struct TokenGrid {
  static constexpr std::int32_t kMask = -1;

  std::size_t height = 0, width = 0;
  std::vector<std::int32_t> cells;

  TokenGrid() = default;
  TokenGrid(std::size_t h, std::size_t w, std::int32_t fill = kMask) : height(h), width(w), cells(h * w, fill) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return cells[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const { return cells[y * width + x]; }
  std::size_t size() const { return cells.size(); }
  bool is_masked(std::size_t i) const { return cells[i] == kMask; }

  std::size_t mask_count() const {
    return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), kMask));
  }

  bool operator==(const TokenGrid&) const = default;
};

/// Image as a [H*W x C] tensor, pixel-major.
template <typename T>
Tensor<T> image_tensor(const ImageBuffer& img) {
  return Tensor<T>::from({img.height * img.width, img.channels}, img.pixels);
}

}  // namespace evq
