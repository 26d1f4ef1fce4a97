#pragma once

#include "semslam/field.hpp"
#include "semslam/render.hpp"

namespace semslam::test {

/// Small field + camera fixture shared by field/render/loss tests.
inline FieldConfig tiny_field_config() {
  FieldConfig cfg;
  cfg.bounds.lo = Vec3(-2, -2, -2);
  cfg.bounds.hi = Vec3(2, 2, 2);
  cfg.oneblob.bins_per_dim = 4;
  cfg.oneblob.kernel_sigma = 0.25;
  cfg.hash.levels = 2;
  cfg.hash.base_resolution = 4;
  cfg.hash.max_resolution = 16;
  cfg.hash.features_per_level = 2;
  cfg.hash.table_size = 1 << 10;
  cfg.latent_dim = 4;
  cfg.hidden_width = 16;
  cfg.hidden_layers = 2;
  cfg.pooled_dim = 4;
  cfg.image_feature_dim = 4;
  return cfg;
}

inline Intrinsics tiny_K() {
  Intrinsics K;
  K.fx = K.fy = 24.0;
  K.cx = 16.0;
  K.cy = 12.0;
  K.width = 32;
  K.height = 24;
  return K;
}

inline ImageRGB gradient_image(int w, int h) {
  ImageRGB img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(x, y)[0] = static_cast<double>(x) / w;
      img.at(x, y)[1] = static_cast<double>(y) / h;
      img.at(x, y)[2] = 0.5;
    }
  return img;
}

}  // namespace semslam::test
