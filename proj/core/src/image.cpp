#include "megatron/image.hpp"

#include <algorithm>
#include <cmath>

#include "megatron/errors.hpp"

namespace megatron {

Image::Image(int channels, int height, int width, double fill)
    : channels_(channels), height_(height), width_(width) {
  if (channels < 0 || height < 0 || width < 0) throw DimensionError("Image: negative extent");
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

std::string Image::shape_string() const {
  return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

Image clip01(Image img) {
  for (double& v : img.values()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

bool rect_inside(const PixelRect& rect, int height, int width) noexcept {
  return rect.width > 0 && rect.height > 0 && rect.x >= 0 && rect.y >= 0 &&
         rect.x + rect.width <= width && rect.y + rect.height <= height;
}

Image crop(const Image& img, const PixelRect& rect) {
  if (!rect_inside(rect, img.height(), img.width())) throw InputError("crop: rect outside image");
  Image out(img.channels(), rect.height, rect.width);
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < rect.height; ++y)
      for (int x = 0; x < rect.width; ++x) out.at(c, y, x) = img.at(c, rect.y + y, rect.x + x);
  return out;
}

double linf_distance(const Image& a, const Image& b) {
  require_same_shape(a, b, "linf_distance");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.raw()[i] - b.raw()[i]));
  return m;
}

bool on_u8_grid(const Image& img) {
  return std::all_of(img.raw().begin(), img.raw().end(), [](double v) {
    if (!(v >= 0.0 && v <= 1.0)) return false;
    const double q = std::round(v * 255.0);
    return q / 255.0 == v;
  });
}

Image quantize_u8(Image img) {
  for (double& v : img.values()) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

}  // namespace megatron
