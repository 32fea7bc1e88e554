#pragma once

// Float image container (CHW), PFM/PPM persistence, resize and blur.
// PFM keeps floats lossless on disk; PPM P6 carries the two-ring masks
// (R channel = inner region, G channel = outer region).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fsda/core/errors.hpp"

namespace fsda {

struct ImageF {
  int c = 0, h = 0, w = 0;
  std::vector<float> v;  // CHW

  ImageF() = default;
  ImageF(int c_, int h_, int w_, float fill = 0.f) : c(c_), h(h_), w(w_), v((size_t)c_ * h_ * w_, fill) {}
  float& at(int ch, int y, int x) { return v[((size_t)ch * h + y) * w + x]; }
  float at(int ch, int y, int x) const { return v[((size_t)ch * h + y) * w + x]; }
  size_t numel() const { return v.size(); }
};

/// Label mask: 0 = background, 1 = outer ring only, 2 = inner region.
/// Encoding label 2 as "inner" makes inner ⊆ outer structural.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> lab;

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), lab((size_t)h_ * w_, 0) {}
  uint8_t& at(int y, int x) { return lab[(size_t)y * w + x]; }
  uint8_t at(int y, int x) const { return lab[(size_t)y * w + x]; }
  bool inner(int y, int x) const { return at(y, x) == 2; }
  bool outer(int y, int x) const { return at(y, x) >= 1; }
};

// ---- PFM ----

inline void write_pfm(const std::filesystem::path& path, const ImageF& img) {
  check_arg(img.c == 1 || img.c == 3, "write_pfm: 1 or 3 channels");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write " + path.string());
  f << (img.c == 3 ? "PF" : "Pf") << "\n" << img.w << " " << img.h << "\n-1.0\n";
  // PFM scanlines run bottom-to-top, samples interleaved.
  std::vector<float> row((size_t)img.w * img.c);
  for (int y = img.h - 1; y >= 0; --y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) row[(size_t)x * img.c + ch] = img.at(ch, y, x);
    f.write(reinterpret_cast<const char*>(row.data()), (std::streamsize)row.size() * 4);
  }
  if (!f) throw MissingArtifactError("write failed: " + path.string());
}

inline ImageF read_pfm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot read " + path.string());
  std::string tag;
  int w = 0, h = 0;
  double scale = 0;
  f >> tag >> w >> h >> scale;
  if (!f || (tag != "PF" && tag != "Pf") || w <= 0 || h <= 0)
    throw MissingInputError("not a PFM file: " + path.string());
  check_cfg(scale < 0, "big-endian PFM unsupported: " + path.string());
  f.get();  // single whitespace after scale
  int c = tag == "PF" ? 3 : 1;
  ImageF img(c, h, w);
  std::vector<float> row((size_t)w * c);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()), (std::streamsize)row.size() * 4);
    if (!f) throw MissingInputError("truncated PFM: " + path.string());
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) img.at(ch, y, x) = row[(size_t)x * c + ch];
  }
  return img;
}

// ---- PPM (masks) ----

inline void write_mask_ppm(const std::filesystem::path& path, const Mask& m) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write " + path.string());
  f << "P6\n" << m.w << " " << m.h << "\n255\n";
  std::vector<uint8_t> row((size_t)m.w * 3);
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      uint8_t l = m.at(y, x);
      row[(size_t)x * 3 + 0] = l == 2 ? 255 : 0;
      row[(size_t)x * 3 + 1] = l >= 1 ? 255 : 0;
      row[(size_t)x * 3 + 2] = 0;
    }
    f.write(reinterpret_cast<const char*>(row.data()), (std::streamsize)row.size());
  }
  if (!f) throw MissingArtifactError("write failed: " + path.string());
}

inline Mask read_mask_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot read " + path.string());
  std::string tag;
  int w = 0, h = 0, maxv = 0;
  f >> tag >> w >> h >> maxv;
  if (!f || tag != "P6" || maxv != 255 || w <= 0 || h <= 0)
    throw MissingInputError("not an 8-bit P6 PPM: " + path.string());
  f.get();
  Mask m(h, w);
  std::vector<uint8_t> row((size_t)w * 3);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), (std::streamsize)row.size());
    if (!f) throw MissingInputError("truncated PPM: " + path.string());
    for (int x = 0; x < w; ++x) {
      bool in = row[(size_t)x * 3 + 0] > 127;
      bool out = row[(size_t)x * 3 + 1] > 127;
      m.at(y, x) = in ? 2 : (out ? 1 : 0);
    }
  }
  return m;
}

// ---- resampling / filtering ----

inline ImageF resize_bilinear(const ImageF& img, int oh, int ow) {
  ImageF out(img.c, oh, ow);
  float sy = (float)img.h / oh, sx = (float)img.w / ow;
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < oh; ++y) {
      float fy = (y + 0.5f) * sy - 0.5f;
      int y0 = (int)std::floor(fy);
      float wy = fy - y0;
      int y0c = std::clamp(y0, 0, img.h - 1), y1c = std::clamp(y0 + 1, 0, img.h - 1);
      for (int x = 0; x < ow; ++x) {
        float fx = (x + 0.5f) * sx - 0.5f;
        int x0 = (int)std::floor(fx);
        float wx = fx - x0;
        int x0c = std::clamp(x0, 0, img.w - 1), x1c = std::clamp(x0 + 1, 0, img.w - 1);
        float a = img.at(ch, y0c, x0c) * (1 - wx) + img.at(ch, y0c, x1c) * wx;
        float b = img.at(ch, y1c, x0c) * (1 - wx) + img.at(ch, y1c, x1c) * wx;
        out.at(ch, y, x) = a * (1 - wy) + b * wy;
      }
    }
  return out;
}

inline Mask resize_mask_nearest(const Mask& m, int oh, int ow) {
  Mask out(oh, ow);
  for (int y = 0; y < oh; ++y) {
    int sy = std::min((int)((y + 0.5f) * m.h / oh), m.h - 1);
    for (int x = 0; x < ow; ++x) {
      int sx = std::min((int)((x + 0.5f) * m.w / ow), m.w - 1);
      out.at(y, x) = m.at(sy, sx);
    }
  }
  return out;
}

/// Separable gaussian blur, reflect padding. sigma <= 0 returns a copy.
inline ImageF gaussian_blur(const ImageF& img, float sigma) {
  if (sigma <= 0.f) return img;
  int r = std::max(1, (int)std::ceil(3.f * sigma));
  std::vector<float> k(2 * r + 1);
  float sum = 0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5f * i * i / (sigma * sigma));
    sum += k[i + r];
  }
  for (auto& v : k) v /= sum;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return std::clamp(i, 0, n - 1);
  };
  ImageF tmp(img.c, img.h, img.w), out(img.c, img.h, img.w);
  for (int ch = 0; ch < img.c; ++ch) {
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        float acc = 0;
        for (int i = -r; i <= r; ++i) acc += img.at(ch, y, reflect(x + i, img.w)) * k[i + r];
        tmp.at(ch, y, x) = acc;
      }
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        float acc = 0;
        for (int i = -r; i <= r; ++i) acc += tmp.at(ch, reflect(y + i, img.h), x) * k[i + r];
        out.at(ch, y, x) = acc;
      }
  }
  return out;
}

inline void clamp01(ImageF& img) {
  for (auto& v : img.v) v = std::clamp(v, 0.f, 1.f);
}

}  // namespace fsda
