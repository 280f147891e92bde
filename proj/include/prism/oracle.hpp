#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "prism/descriptions.hpp"
#include "prism/image.hpp"

namespace prism {

/// Description and keyword generator behind prompt search. Implementations
/// must be deterministic for identical inputs (the HTTP client delegates that
/// burden to the endpoint).
class Oracle {
public:
  virtual ~Oracle() = default;

  /// Structured scene description of image under the given keyword lens.
  virtual StructuredDescription describe(const Image& image, const std::string& keyword) = 0;

  /// Exactly k2 fresh keywords, none matching a seed case-insensitively.
  virtual std::vector<std::string> propose_keywords(const std::vector<std::string>& seeds,
                                                    int k2) = 0;
};

/// Deterministic keyword score: stems intersecting {spatial, position,
/// layout, location, arrangement} land in [0.8,1.0], everything else in
/// [0,0.6], the empty keyword at 0. Drives how much location detail the mock
/// oracle lets through.
double mock_keyword_quality(std::string_view keyword);

/// Fixed synonym neighbors of a keyword (case-insensitive key; empty when
/// the keyword has no table entry).
std::vector<std::string> mock_synonyms(std::string_view keyword);

/// Pure template oracle over rendered scenes. describe() reads the scene
/// back from pixels and emits the ground-truth description, degraded by
/// keyword quality: below 0.8 locations rotate onto the wrong axis and the
/// relational clause is dropped; below 0.5 the two locations are swapped as
/// well and only the color survives.
class MockOracle : public Oracle {
public:
  StructuredDescription describe(const Image& image, const std::string& keyword) override;
  std::vector<std::string> propose_keywords(const std::vector<std::string>& seeds,
                                            int k2) override;
};

struct OracleEndpoint {
  std::string base_url;
  double timeout_seconds = 10.0;
  int max_retries = 2;
  std::optional<std::string> auth_token;
  int max_concurrency = 4;
};

/// JSON-over-HTTP client: POST /describe {"image_ppm_b64","prompt"} and
/// POST /propose {"seeds","k"}. Connection failures, timeouts and 5xx are
/// retried up to max_retries; unparseable replies raise oracle-format errors
/// carrying the raw text.
class HttpOracle : public Oracle {
public:
  explicit HttpOracle(OracleEndpoint endpoint);

  StructuredDescription describe(const Image& image, const std::string& keyword) override;
  std::vector<std::string> propose_keywords(const std::vector<std::string>& seeds,
                                            int k2) override;

private:
  std::string post_json(const std::string& route, const std::string& body);

  OracleEndpoint endpoint_;
  std::counting_semaphore<> gate_;  // bounds concurrent in-flight requests
};

/// Content-addressed disk cache in front of any oracle. Keys hash the
/// canonical wire request; values persist as one JSON file per key, written
/// atomically, evicted only by hand. Corrupt entries surface as oracle-format
/// errors naming the file.
class CachedOracle : public Oracle {
public:
  CachedOracle(std::shared_ptr<Oracle> inner, std::filesystem::path cache_dir);

  StructuredDescription describe(const Image& image, const std::string& keyword) override;
  std::vector<std::string> propose_keywords(const std::vector<std::string>& seeds,
                                            int k2) override;

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

private:
  std::string cached_or_fetch(const std::string& kind, const std::string& canonical_request,
                              const std::function<std::string()>& fetch);

  std::shared_ptr<Oracle> inner_;
  std::filesystem::path dir_;
  std::mutex mutex_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

}  // namespace prism
