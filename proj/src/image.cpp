#include "prism/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "prism/common.hpp"

namespace prism {

std::string encode_ppm(const Image& image) {
  if (image.height < 1 || image.width < 1) {
    throw Error(ErrorCode::shape_mismatch, "empty image");
  }
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.data.size());
  for (double value : image.data) {
    if (!std::isfinite(value)) throw Error(ErrorCode::nan_payload, "non-finite pixel");
    const double clamped = std::clamp(value, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  return out;
}

namespace {

// Skips whitespace and '#' comments between PPM header tokens.
std::size_t skip_separators(std::string_view bytes, std::size_t pos, const std::string& origin) {
  bool advanced = false;
  while (pos < bytes.size()) {
    const char c = bytes[pos];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
      advanced = true;
    } else if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  if (!advanced) throw Error(ErrorCode::parse, "malformed PPM header in " + origin);
  return pos;
}

std::size_t read_uint(std::string_view bytes, std::size_t pos, long& value, const std::string& origin) {
  if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    throw Error(ErrorCode::parse, "expected integer in PPM header of " + origin);
  }
  value = 0;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    value = value * 10 + (bytes[pos] - '0');
    if (value > 1'000'000) throw Error(ErrorCode::parse, "oversized PPM field in " + origin);
    ++pos;
  }
  return pos;
}

}  // namespace

Image decode_ppm(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw Error(ErrorCode::parse, "not a P6 PPM: " + origin);
  }
  std::size_t pos = 2;
  long width = 0, height = 0, maxval = 0;
  pos = skip_separators(bytes, pos, origin);
  pos = read_uint(bytes, pos, width, origin);
  pos = skip_separators(bytes, pos, origin);
  pos = read_uint(bytes, pos, height, origin);
  pos = skip_separators(bytes, pos, origin);
  pos = read_uint(bytes, pos, maxval, origin);
  if (width < 1 || height < 1) throw Error(ErrorCode::shape_mismatch, "bad PPM dimensions in " + origin);
  if (maxval < 1 || maxval > 255) throw Error(ErrorCode::parse, "unsupported PPM maxval in " + origin);
  // Exactly one whitespace byte separates the header from the payload.
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw Error(ErrorCode::parse, "malformed PPM header in " + origin);
  }
  ++pos;
  const std::size_t expected = static_cast<std::size_t>(width) * height * 3;
  if (bytes.size() - pos != expected) {
    throw Error(ErrorCode::shape_mismatch, "PPM payload size mismatch in " + origin);
  }
  Image image(static_cast<int>(height), static_cast<int>(width));
  for (std::size_t i = 0; i < expected; ++i) {
    const auto raw = static_cast<unsigned char>(bytes[pos + i]);
    const double value = static_cast<double>(raw) / static_cast<double>(maxval);
    if (value > 1.0) {
      throw Error(ErrorCode::range_violation,
                  "pixel value " + std::to_string(value) + " out of [0,1] in " + origin);
    }
    image.data[i] = value;
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_file(path, encode_ppm(image));
}

Image read_ppm(const std::filesystem::path& path) {
  return decode_ppm(read_file(path), path.string());
}

}  // namespace prism
