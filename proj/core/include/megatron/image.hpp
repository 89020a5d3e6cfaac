#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace megatron {

/// Top-left pixel coordinate: x is the column, y is the row.
struct PixelPoint {
  int x = 0;
  int y = 0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

struct PixelRect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

/// Dense channels x height x width tensor of doubles. Pixel images live in
/// [0,1]; the same type also carries pixel-space gradients, which do not.
class Image {
 public:
  Image() = default;
  Image(int channels, int height, int width, double fill = 0.0);

  int channels() const noexcept { return channels_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& raw() noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  bool same_shape(const Image& other) const noexcept {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }
  std::string shape_string() const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int c, int y, int x) const noexcept {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

struct ImageSample {
  Image pixels;
  int label = 0;
  std::string id;
};

using Dataset = std::vector<ImageSample>;

/// Throws DimensionError naming `what` when shapes differ.
void require_same_shape(const Image& a, const Image& b, const char* what);

Image clip01(Image img);

/// Copy of the rect region.
Image crop(const Image& img, const PixelRect& rect);

bool rect_inside(const PixelRect& rect, int height, int width) noexcept;

/// Max |a - b| over all entries.
double linf_distance(const Image& a, const Image& b);

/// True when every value is an exact multiple of 1/255 in [0,1], i.e. the
/// image survives an 8-bit lossless codec bit-exactly.
bool on_u8_grid(const Image& img);

/// Round every value to the nearest multiple of 1/255 (clamped to [0,1]).
Image quantize_u8(Image img);

inline double u8_to_unit(int v) { return static_cast<double>(v) / 255.0; }

}  // namespace megatron
