#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <string>

#include "prism/common.hpp"
#include "prism/image.hpp"
#include "prism/matrix_io.hpp"

using namespace prism;
namespace fs = std::filesystem;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::usage;
}

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "prism_test_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("splitmix64 matches the reference sequence") {
  Rng rng(0);
  // Reference outputs for seed 0.
  CHECK(rng.next_u64() == 0xe220a8397b1dcdafULL);
  CHECK(rng.next_u64() == 0x6e789e6aa1b965f4ULL);
  CHECK(rng.next_u64() == 0x06c45d188009454fULL);
}

TEST_CASE("rng streams are deterministic and well ranged") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.below(13) < 13);
  }

  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.03);
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("seed_stream separates tags and indices") {
  CHECK(seed_stream(1, "noise", 0) == seed_stream(1, "noise", 0));
  CHECK(seed_stream(1, "noise", 0) != seed_stream(1, "noise", 1));
  CHECK(seed_stream(1, "noise", 0) != seed_stream(1, "weights", 0));
  CHECK(seed_stream(1, "noise", 0) != seed_stream(2, "noise", 0));
}

TEST_CASE("fnv1a64 and sha256 match published vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("string helpers") {
  CHECK(to_lower("Spatial Layout") == "spatial layout");
  CHECK(trim("  x y\t\n") == "x y");
  CHECK(trim("") == "");
}

TEST_CASE("smallest matrix serializes to a 16-byte header plus payload") {
  Eigen::MatrixXd m(1, 1);
  m(0, 0) = 0.0;
  const std::string bytes = encode_matrix(m);
  CHECK(bytes.size() == 20);  // 16-byte header + one f32, no padding
  CHECK(bytes.substr(0, 4) == "PMAT");
}

TEST_CASE("header fields round-trip through hand-assembled bytes") {
  // magic, version=1, dtype=1 (f32), two reserved zero bytes, rows=3, cols=2.
  std::string bytes = "PMAT";
  bytes += '\x01';
  bytes += '\x01';
  bytes += std::string(2, '\0');
  bytes += std::string("\x03\x00\x00\x00", 4);
  bytes += std::string("\x02\x00\x00\x00", 4);
  for (int i = 0; i < 6; ++i) {
    const float v = static_cast<float>(i) * 0.5f;
    char raw[4];
    std::memcpy(raw, &v, 4);
    bytes.append(raw, 4);
  }
  const Eigen::MatrixXd m = decode_matrix(bytes, "hand");
  CHECK(m.rows() == 3);
  CHECK(m.cols() == 2);
  CHECK(m(0, 0) == 0.0);
  CHECK(m(0, 1) == 0.5);
  CHECK(m(2, 1) == 2.5);  // row-major payload
}

TEST_CASE("matrix round-trip is bit-exact and re-encoding is stable") {
  Rng rng(123);
  Eigen::MatrixXd m(64, 32);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = static_cast<float>(rng.normal());  // f32-representable values

  const std::string bytes = encode_matrix(m);
  const Eigen::MatrixXd back = decode_matrix(bytes, "mem");
  REQUIRE(back.rows() == m.rows());
  REQUIRE(back.cols() == m.cols());
  CHECK(std::memcmp(back.data(), m.data(), sizeof(double) * m.size()) == 0);
  CHECK(encode_matrix(back) == bytes);

  const fs::path dir = temp_dir();
  write_matrix(dir / "m.pmat", m);
  const Eigen::MatrixXd loaded = read_matrix(dir / "m.pmat");
  CHECK(std::memcmp(loaded.data(), m.data(), sizeof(double) * m.size()) == 0);
}

TEST_CASE("matrix codec rejects malformed input") {
  Eigen::MatrixXd bad(1, 1);
  bad(0, 0) = std::nan("");
  CHECK(code_of([&] { encode_matrix(bad); }) == ErrorCode::nan_payload);

  Eigen::MatrixXd ok(2, 2);
  ok.setZero();
  std::string bytes = encode_matrix(ok);

  std::string wrong_magic = bytes;
  wrong_magic[0] = 'Q';
  CHECK(code_of([&] { decode_matrix(wrong_magic, "t"); }) == ErrorCode::parse);

  std::string wrong_version = bytes;
  wrong_version[4] = '\x02';
  CHECK(code_of([&] { decode_matrix(wrong_version, "t"); }) == ErrorCode::parse);

  std::string truncated = bytes.substr(0, bytes.size() - 2);
  CHECK(code_of([&] { decode_matrix(truncated, "t"); }) == ErrorCode::shape_mismatch);

  // A NaN payload is rejected on read as well.
  std::string poisoned = bytes;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(poisoned.data() + 16, &q, 4);
  CHECK(code_of([&] { decode_matrix(poisoned, "t"); }) == ErrorCode::nan_payload);

  CHECK(code_of([] { read_matrix("/nonexistent/nowhere.pmat"); }) == ErrorCode::missing_file);
}

TEST_CASE("ppm encoding writes maxval 255 bytes") {
  Image img(1, 2);
  img.at(0, 0, 0) = 0.0;
  img.at(0, 0, 1) = 0.5;
  img.at(0, 0, 2) = 1.0;
  img.at(0, 1, 0) = 1.0 / 255.0;
  img.at(0, 1, 1) = 2.0;   // clamped to 1
  img.at(0, 1, 2) = -0.5;  // clamped to 0
  const std::string bytes = encode_ppm(img);
  const std::string header = "P6\n2 1\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(bytes.substr(0, header.size()) == header);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + header.size());
  CHECK(p[0] == 0);
  CHECK(p[1] == 128);  // round(0.5 * 255)
  CHECK(p[2] == 255);
  CHECK(p[3] == 1);
  CHECK(p[4] == 255);
  CHECK(p[5] == 0);
}

TEST_CASE("ppm decode handles comments and scales by maxval") {
  const std::string bytes = std::string("P6 # comment\n# another\n 2\t1\n100\n") +
                            std::string("\x00\x32\x64\x64\x32\x00", 6);
  const Image img = decode_ppm(bytes, "mem");
  CHECK(img.width == 2);
  CHECK(img.height == 1);
  CHECK(img.at(0, 0, 0) == 0.0);
  CHECK(img.at(0, 0, 1) == doctest::Approx(0.5));
  CHECK(img.at(0, 0, 2) == doctest::Approx(1.0));
}

TEST_CASE("ppm round-trip stays within quantization error") {
  Rng rng(9);
  Image img(8, 8);
  for (double& v : img.data) v = rng.uniform();
  const Image back = decode_ppm(encode_ppm(img), "mem");
  REQUIRE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5 / 255.0 + 1e-12);
  }

  const fs::path dir = temp_dir();
  write_ppm(dir / "img.ppm", img);
  const Image loaded = read_ppm(dir / "img.ppm");
  CHECK(loaded.data == back.data);
}

TEST_CASE("ppm sample above maxval is a range violation") {
  // maxval 100 with a sample byte of 150 encodes the out-of-range value 1.5.
  std::string bytes = "P6\n1 1\n100\n";
  bytes += '\x96';
  bytes += '\x32';
  bytes += '\x32';
  CHECK(code_of([&] { decode_ppm(bytes, "t"); }) == ErrorCode::range_violation);
}

TEST_CASE("ppm decode rejects malformed files") {
  CHECK(code_of([] { decode_ppm("P5\n1 1\n255\nxyz", "t"); }) == ErrorCode::parse);
  CHECK(code_of([] { decode_ppm("P6\n1 1\n255\nxy", "t"); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([] { decode_ppm("P6\n1 1\n70000\n", "t"); }) == ErrorCode::parse);
  CHECK(code_of([] { read_ppm("/nonexistent/nowhere.ppm"); }) == ErrorCode::missing_file);
}

TEST_CASE("write_file creates parent directories") {
  const fs::path dir = temp_dir();
  write_file(dir / "a" / "b" / "c.txt", "payload");
  CHECK(read_file(dir / "a" / "b" / "c.txt") == "payload");
}
