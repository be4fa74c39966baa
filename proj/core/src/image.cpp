#include "sevdet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "sevdet/error.hpp"

namespace sevdet {

using nn::Tensor;
using nn::shape_numel;
using nn::shape_str;

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

}  // namespace

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path.string() + "'");
  const auto fail = [&](const std::string& why) {
    return IoError("corrupt image '" + path.string() + "': " + why);
  };
  if (header_token(in) != "P6") throw fail("not a binary PPM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(header_token(in));
    h = std::stoul(header_token(in));
    maxval = std::stoul(header_token(in));
  } catch (const std::exception&) {
    throw fail("bad header");
  }
  if (w == 0 || h == 0 || maxval != 255) throw fail("unsupported dimensions or maxval");
  std::vector<unsigned char> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw fail("truncated pixel data");
  Tensor img({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + i] = bytes[i * 3 + c] / 255.0;
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  image.expect_rank(3, "write_ppm");
  if (image.dim(0) != 3) throw ShapeError("write_ppm: expected 3 channels, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::vector<unsigned char> bytes(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) bytes[i * 3 + c] = to_byte(image[c * plane + i]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image '" + path.string() + "'");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void quantize(Tensor& image) {
  for (double& v : image.values()) v = to_byte(v) / 255.0;
}

Tensor resize_square(const Tensor& image, std::size_t size) {
  image.expect_rank(3, "resize_square");
  const std::size_t c = image.dim(0), n = image.dim(1);
  if (image.dim(2) != n) throw ShapeError("resize_square: image is not square " + shape_str(image.shape()));
  if (size == 0) throw InvalidArgument("resize_square: target size must be positive");
  if (size == n) return image;
  Tensor out({c, size, size});
  if (size < n) {
    if (n % size != 0) {
      throw InvalidArgument("resize_square: " + std::to_string(n) + " is not a multiple of " +
                            std::to_string(size));
    }
    const std::size_t f = n / size;
    const double inv = 1.0 / static_cast<double>(f * f);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < f; ++dy) {
            for (std::size_t dx = 0; dx < f; ++dx) s += image[(ch * n + y * f + dy) * n + x * f + dx];
          }
          out[(ch * size + y) * size + x] = s * inv;
        }
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          out[(ch * size + y) * size + x] = image[(ch * n + y * n / size) * n + x * n / size];
        }
      }
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& image) {
  image.expect_rank(3, "flip_horizontal");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
    }
  }
  return out;
}

Tensor warp_affine(const Tensor& image, const AffineWarp& warp) {
  image.expect_rank(3, "warp_affine");
  if (!(warp.scale > 0.0)) throw InvalidArgument("warp_affine: scale must be positive");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double theta = warp.rotate_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta) / warp.scale, sn = std::sin(theta) / warp.scale;
  const double tx = warp.shift_x * static_cast<double>(w);
  const double ty = warp.shift_y * static_cast<double>(h);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Output pixel -> source coordinate (inverse of flip, rotate, scale, shift).
      double ox = static_cast<double>(x) - cx - tx;
      const double oy = static_cast<double>(y) - cy - ty;
      double sx = cs * ox + sn * oy;
      const double sy = -sn * ox + cs * oy;
      if (warp.flip) sx = -sx;
      const double px = std::clamp(sx + cx, 0.0, static_cast<double>(w - 1));
      const double py = std::clamp(sy + cy, 0.0, static_cast<double>(h - 1));
      const std::size_t x0 = static_cast<std::size_t>(px), y0 = static_cast<std::size_t>(py);
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = px - static_cast<double>(x0), fy = py - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = image.data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
        const double bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
        out[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  return out;
}

Tensor stack_images(std::span<const Tensor* const> images) {
  if (images.empty()) throw InvalidArgument("stack_images: empty batch");
  const nn::Shape& s = images.front()->shape();
  if (s.size() != 3) throw ShapeError("stack_images: expected [C,H,W], got " + shape_str(s));
  nn::Shape batch{images.size(), s[0], s[1], s[2]};
  Tensor out(batch);
  const std::size_t per = shape_numel(s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    images[i]->expect_shape(s, "stack_images");
    std::copy(images[i]->values().begin(), images[i]->values().end(), out.data() + i * per);
  }
  return out;
}

void expect_image(const Tensor& image, std::size_t size, const char* what) {
  image.expect_shape({3, size, size}, what);
  for (double v : image.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw InvalidArgument(std::string(what) + ": pixel value outside [0,1]");
    }
  }
}

}  // namespace sevdet
