#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace prism {

/// RGB image with channels in [0,1], row-major interleaved storage.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // size height*width*3

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int row, int col, int channel) {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }
  double at(int row, int col, int channel) const {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width;
  }
};

/// Binary PPM (P6). Writing uses maxval 255; reading accepts any 1-byte
/// maxval and scales samples by 1/maxval, rejecting samples above maxval.
std::string encode_ppm(const Image& image);
Image decode_ppm(std::string_view bytes, const std::string& origin = "<memory>");

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

}  // namespace prism
