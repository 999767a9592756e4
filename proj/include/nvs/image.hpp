#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "nvs/error.hpp"

namespace nvs {

/// Planar C x H x W float image; colour values live in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int channels, int height, int width, float fill = 0.0f);

  int channels() const noexcept { return channels_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }
  bool empty() const noexcept { return data_.empty(); }

  float& at(int c, int y, int x) { return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x]; }
  float at(int c, int y, int x) const { return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x]; }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool same_size(const Image& o) const { return height_ == o.height_ && width_ == o.width_; }
  bool operator==(const Image& o) const = default;

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Single-channel H x W map.
class Plane {
 public:
  Plane() = default;
  Plane(int height, int width, float fill = 0.0f)
      : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, fill) {}

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }

  float& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  float at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool same_size(const Plane& o) const { return height_ == o.height_ && width_ == o.width_; }
  bool same_size(const Image& o) const { return height_ == o.height() && width_ == o.width(); }
  bool operator==(const Plane& o) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Per-pixel camera-frame depth in scene units; 0 marks an invalid pixel.
class DepthMap : public Plane {
 public:
  using Plane::Plane;
  explicit DepthMap(Plane plane) : Plane(std::move(plane)) {}

  /// Throws DataError on negative or non-finite values.
  void validate() const;
  std::size_t valid_count() const;
};

/// Binary {0,1} mask.
class Mask : public Plane {
 public:
  using Plane::Plane;
  explicit Mask(Plane plane) : Plane(std::move(plane)) {}

  bool is_binary() const;
  double mean() const;
};

Image read_png(const std::string& path);
/// Writes 8-bit RGB (3 channels) or grey (1 channel); values are clamped
/// to [0,1] and rounded to the nearest level.
void write_png(const std::string& path, const Image& image);

/// Rounds every value to the nearest multiple of 1/255 so that an 8-bit PNG
/// round trip is lossless.
void quantize_8bit(Image& image);

/// Tiles equally sized images row-major into a grid `columns` wide.
Image contact_sheet(const std::vector<Image>& tiles, int columns, float background = 1.0f);

}  // namespace nvs
