#include "prism/common.hpp"

#include <openssl/evp.h>

#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace prism {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::usage: return "usage error";
    case ErrorCode::io: return "i/o error";
    case ErrorCode::missing_file: return "missing file";
    case ErrorCode::shape_mismatch: return "shape mismatch";
    case ErrorCode::nan_payload: return "nan payload";
    case ErrorCode::range_violation: return "range violation";
    case ErrorCode::parse: return "parse error";
    case ErrorCode::unknown_location: return "unknown location";
    case ErrorCode::duplicate_location: return "duplicate location";
    case ErrorCode::wrong_arity: return "wrong arity";
    case ErrorCode::degenerate_bandwidth: return "degenerate bandwidth";
    case ErrorCode::constant_input: return "constant input";
    case ErrorCode::rank_deficient: return "rank deficient";
    case ErrorCode::dimension_mismatch: return "dimension mismatch";
    case ErrorCode::diverged: return "training diverged";
    case ErrorCode::truncation: return "truncation";
    case ErrorCode::transport: return "transport error";
    case ErrorCode::oracle_format: return "oracle format error";
    case ErrorCode::insufficient_candidates: return "insufficient candidates";
    case ErrorCode::search_collapsed: return "search collapsed";
    case ErrorCode::composition: return "composition error";
  }
  return "unknown error";
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t value = next_u64();
  while (value >= limit) value = next_u64();
  return value % n;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  spare_ = radius * std::sin(angle);
  have_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t seed_stream(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
  std::uint64_t h = fnv1a64(tag);
  h ^= seed + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h ^= index + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * length);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

namespace {
constexpr char kBase64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    std::uint32_t triple = (static_cast<unsigned char>(bytes[i]) << 16) |
                           (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                           static_cast<unsigned char>(bytes[i + 2]);
    out.push_back(kBase64Alphabet[(triple >> 18) & 0x3f]);
    out.push_back(kBase64Alphabet[(triple >> 12) & 0x3f]);
    out.push_back(kBase64Alphabet[(triple >> 6) & 0x3f]);
    out.push_back(kBase64Alphabet[triple & 0x3f]);
  }
  std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    std::uint32_t triple = static_cast<unsigned char>(bytes[i]) << 16;
    out.push_back(kBase64Alphabet[(triple >> 18) & 0x3f]);
    out.push_back(kBase64Alphabet[(triple >> 12) & 0x3f]);
    out.append("==");
  } else if (rest == 2) {
    std::uint32_t triple = (static_cast<unsigned char>(bytes[i]) << 16) |
                           (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out.push_back(kBase64Alphabet[(triple >> 18) & 0x3f]);
    out.push_back(kBase64Alphabet[(triple >> 12) & 0x3f]);
    out.push_back(kBase64Alphabet[(triple >> 6) & 0x3f]);
    out.push_back('=');
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  std::array<int, 256> inverse;
  inverse.fill(-1);
  for (int i = 0; i < 64; ++i) inverse[static_cast<unsigned char>(kBase64Alphabet[i])] = i;
  if (text.size() % 4 != 0) throw Error(ErrorCode::parse, "base64 length not a multiple of 4");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      char c = text[i + j];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        vals[j] = 0;
        ++pad;
        continue;
      }
      vals[j] = inverse[static_cast<unsigned char>(c)];
      if (vals[j] < 0 || pad > 0) throw Error(ErrorCode::parse, "invalid base64 input");
    }
    std::uint32_t triple = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
    out.push_back(static_cast<char>((triple >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<char>((triple >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<char>(triple & 0xff));
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::missing_file, path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (!in.good() && !in.eof()) throw Error(ErrorCode::io, "read failed: " + path.string());
  return buffer.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open for write: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed: " + path.string());
}

std::string to_lower(std::string_view text) {
  std::string out(text);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view text) {
  std::size_t begin = 0;
  std::size_t end = text.size();
  while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
  while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
  return std::string(text.substr(begin, end - begin));
}

}  // namespace prism
