#pragma once

// Bridges between ImageF/Mask containers and batched tensors.

#include <vector>

#include "fsda/core/imageio.hpp"
#include "fsda/core/tensor.hpp"

namespace fsda {

template <class T>
Tensor<T> images_to_tensor(const std::vector<ImageF>& imgs) {
  check_arg(!imgs.empty(), "images_to_tensor: empty batch");
  int c = imgs[0].c, h = imgs[0].h, w = imgs[0].w;
  Tensor<T> t = Tensor<T>::zeros({(int)imgs.size(), c, h, w});
  for (size_t i = 0; i < imgs.size(); ++i) {
    check_arg(imgs[i].c == c && imgs[i].h == h && imgs[i].w == w, "images_to_tensor: ragged batch");
    T* dst = t.data() + (int64_t)i * c * h * w;
    for (size_t j = 0; j < imgs[i].v.size(); ++j) dst[j] = (T)imgs[i].v[j];
  }
  return t;
}

template <class T>
std::vector<ImageF> tensor_to_images(const Tensor<T>& t) {
  check_arg(t.ndim() == 4, "tensor_to_images: expect (B,C,H,W)");
  int B = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  std::vector<ImageF> out;
  out.reserve(B);
  for (int i = 0; i < B; ++i) {
    ImageF img(c, h, w);
    const T* src = t.data() + (int64_t)i * c * h * w;
    for (size_t j = 0; j < img.v.size(); ++j) img.v[j] = (float)src[j];
    out.push_back(std::move(img));
  }
  return out;
}

/// Mask (labels {0,1,2}) to a binary 2-channel target: ch0 = inner (cup),
/// ch1 = outer (disc).
template <class T>
Tensor<T> masks_to_tensor(const std::vector<Mask>& masks) {
  check_arg(!masks.empty(), "masks_to_tensor: empty batch");
  int h = masks[0].h, w = masks[0].w;
  Tensor<T> t = Tensor<T>::zeros({(int)masks.size(), 2, h, w});
  for (size_t i = 0; i < masks.size(); ++i) {
    T* cup = t.data() + (int64_t)i * 2 * h * w;
    T* disc = cup + (int64_t)h * w;
    for (int64_t j = 0; j < (int64_t)h * w; ++j) {
      cup[j] = masks[i].lab[j] == 2 ? T(1) : T(0);
      disc[j] = masks[i].lab[j] >= 1 ? T(1) : T(0);
    }
  }
  return t;
}

}  // namespace fsda
