#include "nvs/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace nvs {

Image::Image(int channels, int height, int width, float fill)
    : channels_(channels),
      height_(height),
      width_(width),
      data_(static_cast<std::size_t>(channels) * height * width, fill) {
  if (channels < 0 || height < 0 || width < 0) throw DataError("negative image extent");
}

void DepthMap::validate() const {
  for (float d : data()) {
    if (!std::isfinite(d) || d < 0) throw DataError("depth map holds a negative or non-finite value");
  }
}

std::size_t DepthMap::valid_count() const {
  return static_cast<std::size_t>(std::count_if(data().begin(), data().end(), [](float d) { return d > 0; }));
}

bool Mask::is_binary() const {
  return std::all_of(data().begin(), data().end(), [](float v) { return v == 0.0f || v == 1.0f; });
}

double Mask::mean() const {
  if (data().empty()) return 0.0;
  double s = 0;
  for (float v : data()) s += v;
  return s / static_cast<double>(data().size());
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Image read_png(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path + "' is not a readable PNG");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  buffer.resize(static_cast<std::size_t>(width) * height * channels);
  rows.resize(height);
  for (int y = 0; y < height; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(channels, height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = buffer[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0f;
  return img;
}

void write_png(const std::string& path, const Image& image) {
  if (image.channels() != 1 && image.channels() != 3) throw DataError("write_png: needs 1 or 3 channels");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialisation failed");
  }
  const int channels = image.channels();
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(image.width()) * image.height() * channels);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < channels; ++c)
        buffer[(static_cast<std::size_t>(y) * image.width() + x) * channels + c] = to_byte(image.at(c, y, x));
  std::vector<png_bytep> rows(image.height());
  for (int y = 0; y < image.height(); ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * image.width() * channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing '" + path + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width(), image.height(), 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void quantize_8bit(Image& image) {
  for (float& v : image.data()) v = to_byte(v) / 255.0f;
}

Image contact_sheet(const std::vector<Image>& tiles, int columns, float background) {
  if (tiles.empty()) throw DataError("contact sheet needs at least one tile");
  const Image& first = tiles.front();
  columns = std::max(1, std::min<int>(columns, static_cast<int>(tiles.size())));
  const int rows = (static_cast<int>(tiles.size()) + columns - 1) / columns;
  const int gap = 1;
  Image sheet(first.channels(), rows * (first.height() + gap) - gap, columns * (first.width() + gap) - gap, background);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Image& t = tiles[i];
    if (t.channels() != first.channels() || !t.same_size(first)) throw DataError("contact sheet tiles differ in size");
    const int oy = static_cast<int>(i) / columns * (first.height() + gap);
    const int ox = static_cast<int>(i) % columns * (first.width() + gap);
    for (int c = 0; c < t.channels(); ++c)
      for (int y = 0; y < t.height(); ++y)
        for (int x = 0; x < t.width(); ++x) sheet.at(c, oy + y, ox + x) = t.at(c, y, x);
  }
  return sheet;
}

}  // namespace nvs
