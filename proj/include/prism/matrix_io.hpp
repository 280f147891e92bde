#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>

namespace prism {

// PMAT: "PMAT" magic, u8 version=1, u8 dtype=1 (f32), 2 reserved bytes,
// u32 LE rows, u32 LE cols, then rows*cols f32 LE values row-major.
// 16-byte header, payload follows with no padding.

std::string encode_matrix(const Eigen::MatrixXd& matrix);
Eigen::MatrixXd decode_matrix(std::string_view bytes, const std::string& origin = "<memory>");

void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& matrix);
Eigen::MatrixXd read_matrix(const std::filesystem::path& path);

}  // namespace prism
