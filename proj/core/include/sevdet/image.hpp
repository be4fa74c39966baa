#pragma once

#include <filesystem>
#include <span>

#include "sevdet/nn/tensor.hpp"

namespace sevdet {

// Images are [3,H,W] tensors with channel-major RGB values in [0,1].

/// Reads a binary (P6, maxval 255) PPM. Values become k/255.
nn::Tensor read_ppm(const std::filesystem::path& path);

/// Writes a binary PPM; values are clamped to [0,1] and rounded to k/255, so
/// images produced by `read_ppm` or `quantize` round-trip exactly.
void write_ppm(const std::filesystem::path& path, const nn::Tensor& image);

/// Rounds every value to the nearest k/255 after clamping to [0,1].
void quantize(nn::Tensor& image);

/// Resizes a square image: integer-factor box averaging when shrinking,
/// nearest-neighbour replication when growing. Identity at equal size.
nn::Tensor resize_square(const nn::Tensor& image, std::size_t size);

nn::Tensor flip_horizontal(const nn::Tensor& image);

/// Parameters of an inverse-mapped affine warp about the image centre.
struct AffineWarp {
  double scale = 1.0;
  double rotate_deg = 0.0;
  double shift_x = 0.0;  ///< fraction of width
  double shift_y = 0.0;  ///< fraction of height
  bool flip = false;
};

/// Bilinear warp with edge replication; identity parameters reproduce the input.
nn::Tensor warp_affine(const nn::Tensor& image, const AffineWarp& warp);

/// Stacks equally shaped [3,H,W] images into [B,3,H,W].
nn::Tensor stack_images(std::span<const nn::Tensor* const> images);

/// Throws InvalidArgument unless `image` is [3,size,size] with values in [0,1].
void expect_image(const nn::Tensor& image, std::size_t size, const char* what);

}  // namespace sevdet
