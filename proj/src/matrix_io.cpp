#include "prism/matrix_io.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "prism/common.hpp"

namespace prism {

namespace {

void put_u32_le(std::string& out, std::uint32_t value) {
  out.push_back(static_cast<char>(value & 0xff));
  out.push_back(static_cast<char>((value >> 8) & 0xff));
  out.push_back(static_cast<char>((value >> 16) & 0xff));
  out.push_back(static_cast<char>((value >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::string encode_matrix(const Eigen::MatrixXd& matrix) {
  const auto rows = matrix.rows();
  const auto cols = matrix.cols();
  if (rows > std::numeric_limits<std::uint32_t>::max() ||
      cols > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorCode::dimension_mismatch, "matrix exceeds 32-bit header fields");
  }
  if (!matrix.allFinite()) throw Error(ErrorCode::nan_payload, "matrix has non-finite entries");

  std::string out;
  out.reserve(16 + static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 4);
  out.append("PMAT");
  out.push_back(1);  // version
  out.push_back(1);  // dtype f32
  out.push_back(0);
  out.push_back(0);
  put_u32_le(out, static_cast<std::uint32_t>(rows));
  put_u32_le(out, static_cast<std::uint32_t>(cols));
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const float value = static_cast<float>(matrix(r, c));
      char bytes[4];
      std::memcpy(bytes, &value, 4);
      out.append(bytes, 4);
    }
  }
  return out;
}

Eigen::MatrixXd decode_matrix(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "PMAT") {
    throw Error(ErrorCode::parse, "not a PMAT file: " + origin);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (p[4] != 1) throw Error(ErrorCode::parse, "unsupported PMAT version in " + origin);
  if (p[5] != 1) throw Error(ErrorCode::parse, "unsupported PMAT dtype in " + origin);
  const std::uint32_t rows = get_u32_le(p + 8);
  const std::uint32_t cols = get_u32_le(p + 12);
  const std::size_t expected = 16 + static_cast<std::size_t>(rows) * cols * 4;
  if (bytes.size() != expected) {
    throw Error(ErrorCode::shape_mismatch, "PMAT payload size mismatch in " + origin);
  }
  Eigen::MatrixXd matrix(rows, cols);
  std::size_t offset = 16;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      float value;
      std::memcpy(&value, bytes.data() + offset, 4);
      offset += 4;
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::nan_payload, "non-finite value in " + origin);
      }
      matrix(r, c) = value;
    }
  }
  return matrix;
}

void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& matrix) {
  write_file(path, encode_matrix(matrix));
}

Eigen::MatrixXd read_matrix(const std::filesystem::path& path) {
  return decode_matrix(read_file(path), path.string());
}

}  // namespace prism
