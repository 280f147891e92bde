#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace prism {

enum class ErrorCode {
  usage,
  io,
  missing_file,
  shape_mismatch,
  nan_payload,
  range_violation,
  parse,
  unknown_location,
  duplicate_location,
  wrong_arity,
  degenerate_bandwidth,
  constant_input,
  rank_deficient,
  dimension_mismatch,
  diverged,
  truncation,
  transport,
  oracle_format,
  insufficient_candidates,
  search_collapsed,
  composition,
};

const char* error_code_name(ErrorCode code);

/// Exception carrying a machine-readable code; the CLI maps codes to exit
/// statuses (1 usage, 2 I/O, 3 oracle, 4 numeric divergence).
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const { return code_; }

private:
  ErrorCode code_;
};

/// SplitMix64 with Box-Muller normals. All randomness in the artifact goes
/// through this generator so that reruns produce identical bytes.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  double normal();

private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Stable 64-bit string hash (FNV-1a), used to derive per-key seeds.
std::uint64_t fnv1a64(std::string_view text);

/// Combines a base seed with a tag and index into a fresh stream seed.
std::uint64_t seed_stream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

/// SHA-256 hex digest of a byte string (content addressing, manifests).
std::string sha256_hex(std::string_view bytes);

/// RFC 4648 base64 (with padding), used on the oracle wire.
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// Lowercase ASCII copy.
std::string to_lower(std::string_view text);

/// Strips leading/trailing ASCII whitespace.
std::string trim(std::string_view text);

}  // namespace prism
