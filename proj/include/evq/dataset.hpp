#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "evq/grid.hpp"
#include "evq/rng.hpp"
#include "evq/tensor.hpp"

namespace evq {

/// Procedural dataset: same spec and seed give the same images and labels.
struct DatasetSpec {
  std::string generator = "shapes";
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t count = 5000;
  std::uint64_t seed = 1;
};

struct Dataset {
  std::vector<ImageBuffer> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
};

namespace shapes {

enum Class : std::size_t { kRectangle = 0, kDisk = 1, kStripes = 2, kNumClasses = 3 };

inline const char* class_name(std::size_t c) {
  switch (c) {
    case kRectangle: return "rectangle";
    case kDisk: return "disk";
    case kStripes: return "stripes";
    default: return "?";
  }
}

/// Renders a coverage function with 4x4 supersampling per pixel.
template <typename Inside>
void rasterize(ImageBuffer& img, const std::vector<float>& color, Inside inside) {
  constexpr int ss = 4;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx)
          hits += inside(static_cast<double>(y) + (sy + 0.5) / ss, static_cast<double>(x) + (sx + 0.5) / ss) ? 1 : 0;
      const float cov = static_cast<float>(hits) / (ss * ss);
      for (std::size_t c = 0; c < img.channels; ++c) img.at(y, x, c) = std::max(img.at(y, x, c), cov * color[c]);
    }
}

/// One image of class `cls` on a black background.
inline ImageBuffer render(std::size_t cls, std::size_t size, std::size_t channels, Rng& rng) {
  ImageBuffer img(size, size, channels, 0.0f);
  const double s = static_cast<double>(size);
  std::vector<float> color(channels, 1.0f);
  if (channels > 1)
    for (auto& c : color) c = static_cast<float>(rng.uniform(0.3, 1.0));
  switch (cls) {
    case kRectangle: {
      const double h = rng.uniform(0.25, 0.7) * s, w = rng.uniform(0.25, 0.7) * s;
      const double y0 = rng.uniform(0.0, s - h), x0 = rng.uniform(0.0, s - w);
      rasterize(img, color, [=](double y, double x) { return y >= y0 && y < y0 + h && x >= x0 && x < x0 + w; });
      break;
    }
    case kDisk: {
      const double r = rng.uniform(0.15, 0.35) * s;
      const double cy = rng.uniform(r, s - r), cx = rng.uniform(r, s - r);
      rasterize(img, color, [=](double y, double x) { return (y - cy) * (y - cy) + (x - cx) * (x - cx) < r * r; });
      break;
    }
    default: {
      const double period = static_cast<double>(4 + 2 * rng.uniform_int(3));
      const double phase = rng.uniform(0.0, period);
      const bool vertical = rng.bernoulli(0.5);
      rasterize(img, color, [=](double y, double x) {
        const double u = (vertical ? x : y) + phase;
        return std::fmod(u, period) < period / 2;
      });
      break;
    }
  }
  return img;
}

}  // namespace shapes

inline Dataset make_dataset(const DatasetSpec& spec) {
  if (spec.generator != "shapes") throw ConfigError("unknown dataset generator: " + spec.generator);
  if (spec.image_size < 4 || (spec.channels != 1 && spec.channels != 3)) throw ConfigError("bad dataset geometry");
  Dataset d;
  d.num_classes = shapes::kNumClasses;
  const Rng base(spec.seed);
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng r = base.split(i);
    const std::size_t cls = static_cast<std::size_t>(r.uniform_int(shapes::kNumClasses));
    d.images.push_back(shapes::render(cls, spec.image_size, spec.channels, r));
    d.labels.push_back(cls);
  }
  return d;
}

}  // namespace evq
