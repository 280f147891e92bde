#include "prism/oracle.hpp"

#include <array>
#include <cctype>
#include <map>
#include <set>
#include <utility>

// Eigen must precede httplib: resolv.h (pulled via httplib) macro-defines
// _res, which Eigen uses as a parameter name.
#include "prism/common.hpp"
#include "prism/dataio.hpp"

#include "httplib.h"
#include "json.hpp"

namespace prism {

namespace {

using nlohmann::json;

std::vector<std::string> lower_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char raw : text) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isalnum(static_cast<unsigned char>(c))) {
      current.push_back(c);
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

constexpr std::array<std::string_view, 5> kSpatialStems = {"spatial", "position", "layout",
                                                           "location", "arrangement"};

bool has_spatial_stem(std::string_view keyword) {
  for (const std::string& word : lower_words(keyword)) {
    for (std::string_view stem : kSpatialStems) {
      if (word.rfind(stem, 0) == 0) return true;
    }
  }
  return false;
}

/// Wrong-axis rotation used when a keyword scores below full fidelity.
LocationLabel rotate_location(LocationLabel loc) {
  switch (loc) {
    case LocationLabel::left_half: return LocationLabel::top_half;
    case LocationLabel::right_half: return LocationLabel::bottom_half;
    case LocationLabel::top_half: return LocationLabel::left_half;
    case LocationLabel::bottom_half: return LocationLabel::right_half;
    case LocationLabel::full: return LocationLabel::full;
  }
  return loc;
}

const std::map<std::string, std::vector<std::string>>& synonym_table() {
  static const std::map<std::string, std::vector<std::string>> table = {
      {"semantic relation", {"Conceptual Link", "Meaning Association"}},
      {"conceptual link", {"Semantic Context", "Concept Web"}},
      {"meaning association", {"Semantic Context"}},
      {"semantic context", {"Concept Web"}},
      {"positional relation", {"Spatial Layout", "Relative Position"}},
      {"spatial configuration", {"Spatial Layout", "Spatial Arrangement"}},
      {"relative position", {"Object Position", "Spatial Layout"}},
      {"object location", {"Scene Layout", "Location Map"}},
      {"spatial layout", {"Spatial Arrangement", "Scene Layout"}},
      {"spatial arrangement", {"Arrangement Pattern", "Spatial Order"}},
      {"scene layout", {"Layout Structure"}},
      {"object position", {"Position Map"}},
      {"functional relation", {"Action Affordance", "Usage Context"}},
      {"action affordance", {"Functional Role"}},
      {"usage context", {"Functional Role"}},
      {"causal relation", {"Cause And Effect", "Event Sequence"}},
      {"cause and effect", {"Causal Link"}},
      {"event sequence", {"Causal Link"}},
      {"emotional relation", {"Affective Tone", "Mood Association"}},
      {"affective tone", {"Emotional Context"}},
      {"mood association", {"Emotional Context"}},
      {"part-whole relation", {"Component Structure", "Part Composition"}},
      {"component structure", {"Structural Hierarchy"}},
      {"part composition", {"Structural Hierarchy"}},
  };
  return table;
}

// Filters candidate keywords down to trimmed, case-insensitively novel ones.
std::vector<std::string> filter_novel(const std::vector<std::string>& candidates,
                                      const std::vector<std::string>& seeds, int k2,
                                      const std::string& origin) {
  std::set<std::string> seen;
  for (const std::string& seed : seeds) seen.insert(to_lower(trim(seed)));
  std::vector<std::string> out;
  for (const std::string& candidate : candidates) {
    std::string t = trim(candidate);
    if (t.empty()) continue;
    if (!seen.insert(to_lower(t)).second) continue;
    out.push_back(std::move(t));
    if (out.size() == static_cast<std::size_t>(k2)) break;
  }
  if (out.size() < static_cast<std::size_t>(k2)) {
    throw Error(ErrorCode::insufficient_candidates,
                origin + " yielded " + std::to_string(out.size()) + " novel keywords, needed " +
                    std::to_string(k2));
  }
  return out;
}

void check_propose_args(const std::vector<std::string>& seeds, int k2) {
  if (seeds.empty()) throw Error(ErrorCode::usage, "keyword proposal needs at least one seed");
  for (const std::string& seed : seeds) {
    if (trim(seed).empty()) throw Error(ErrorCode::usage, "blank seed keyword");
  }
  if (k2 < 1) throw Error(ErrorCode::usage, "keyword proposal needs k2 >= 1");
}

std::string check_keyword(const std::string& keyword) {
  std::string t = trim(keyword);
  if (t.empty()) throw Error(ErrorCode::usage, "describe needs a non-empty keyword");
  return t;
}

}  // namespace

double mock_keyword_quality(std::string_view keyword) {
  const std::string lowered = to_lower(trim(keyword));
  if (lowered.empty()) return 0.0;
  // Hash spreads keywords across the band deterministically.
  const double unit = static_cast<double>(fnv1a64(lowered) >> 11) * 0x1.0p-53;
  return has_spatial_stem(lowered) ? 0.8 + 0.2 * unit : 0.6 * unit;
}

std::vector<std::string> mock_synonyms(std::string_view keyword) {
  const auto& table = synonym_table();
  auto it = table.find(to_lower(trim(keyword)));
  return it == table.end() ? std::vector<std::string>{} : it->second;
}

StructuredDescription MockOracle::describe(const Image& image, const std::string& keyword) {
  const std::string key = check_keyword(keyword);
  const SyntheticScene scene = decode_scene(image);
  const StructuredDescription full = ground_truth_description(scene);
  const double quality = mock_keyword_quality(key);
  if (quality >= 0.8) return full;

  // Degraded view: locations land on the wrong axis, relational clauses are
  // dropped, and below 0.5 the two locations are also swapped and the
  // texture word is lost.
  StructuredDescription out = full;
  for (int j = 0; j < 2; ++j) {
    const SceneObject& obj = scene.objects[j];
    out.objects[j].loc = rotate_location(obj.loc);
    out.objects[j].desc = color_name(obj.color);
    if (quality >= 0.5) {
      out.objects[j].desc += std::string(" ") + texture_name(obj.texture);
    }
  }
  if (quality < 0.5) std::swap(out.objects[0].loc, out.objects[1].loc);
  return out;
}

std::vector<std::string> MockOracle::propose_keywords(const std::vector<std::string>& seeds,
                                                      int k2) {
  check_propose_args(seeds, k2);
  static constexpr std::array<const char*, 6> kQualifiers = {"Global", "Local",  "Fine",
                                                             "Coarse", "Inner", "Outer"};
  std::set<std::string> seen;
  std::vector<std::string> queue;
  for (const std::string& seed : seeds) {
    std::string t = trim(seed);
    if (seen.insert(to_lower(t)).second) queue.push_back(std::move(t));
  }
  // Breadth-first over table neighbors, then qualified variants, so the
  // supply of novel keywords never runs dry.
  std::vector<std::string> out;
  for (std::size_t head = 0; head < queue.size() && out.size() < static_cast<std::size_t>(k2);
       ++head) {
    std::vector<std::string> candidates = mock_synonyms(queue[head]);
    for (const char* qualifier : kQualifiers) {
      candidates.push_back(std::string(qualifier) + " " + queue[head]);
    }
    for (std::string& candidate : candidates) {
      if (out.size() == static_cast<std::size_t>(k2)) break;
      if (!seen.insert(to_lower(candidate)).second) continue;
      queue.push_back(candidate);
      out.push_back(std::move(candidate));
    }
  }
  if (out.size() < static_cast<std::size_t>(k2)) {
    throw Error(ErrorCode::insufficient_candidates,
                "synonym expansion exhausted at " + std::to_string(out.size()) + " of " +
                    std::to_string(k2));
  }
  return out;
}

HttpOracle::HttpOracle(OracleEndpoint endpoint)
    : endpoint_(std::move(endpoint)), gate_(endpoint_.max_concurrency) {
  if (endpoint_.base_url.empty()) throw Error(ErrorCode::usage, "oracle base_url is empty");
  if (endpoint_.timeout_seconds <= 0) throw Error(ErrorCode::usage, "oracle timeout must be > 0");
  if (endpoint_.max_retries < 0 || endpoint_.max_retries > 5) {
    throw Error(ErrorCode::usage, "oracle max_retries must be in [0,5]");
  }
  if (endpoint_.max_concurrency < 1) {
    throw Error(ErrorCode::usage, "oracle concurrency must be >= 1");
  }
}

std::string HttpOracle::post_json(const std::string& route, const std::string& body) {
  gate_.acquire();
  struct Release {
    std::counting_semaphore<>& gate;
    ~Release() { gate.release(); }
  } release{gate_};

  const auto whole = static_cast<time_t>(endpoint_.timeout_seconds);
  const auto micros =
      static_cast<time_t>((endpoint_.timeout_seconds - static_cast<double>(whole)) * 1e6);
  std::string last_failure = "no attempt made";
  for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
    httplib::Client client(endpoint_.base_url);
    client.set_connection_timeout(whole, micros);
    client.set_read_timeout(whole, micros);
    client.set_write_timeout(whole, micros);
    httplib::Headers headers;
    if (endpoint_.auth_token) {
      headers.emplace("Authorization", "Bearer " + *endpoint_.auth_token);
    }
    auto result = client.Post(route, headers, body, "application/json");
    if (!result) {
      last_failure = httplib::to_string(result.error());
      continue;
    }
    if (result->status == 200) return result->body;
    if (result->status >= 500) {
      // Server-side hiccups are worth retrying; client errors are not.
      last_failure = "status " + std::to_string(result->status);
      continue;
    }
    throw Error(ErrorCode::transport,
                route + " returned status " + std::to_string(result->status));
  }
  throw Error(ErrorCode::transport, route + " failed after " +
                                        std::to_string(endpoint_.max_retries + 1) +
                                        " attempts: " + last_failure);
}

StructuredDescription HttpOracle::describe(const Image& image, const std::string& keyword) {
  const std::string key = check_keyword(keyword);
  const json request = {{"image_ppm_b64", base64_encode(encode_ppm(image))},
                        {"prompt", build_prompt(key)}};
  const std::string raw = post_json("/describe", request.dump());
  const json reply = json::parse(raw, nullptr, false);
  if (reply.is_discarded() || !reply.is_object() || !reply.contains("description") ||
      !reply["description"].is_string()) {
    throw Error(ErrorCode::oracle_format, "bad /describe reply: " + raw);
  }
  try {
    return parse_description_any(reply["description"].get<std::string>());
  } catch (const Error& err) {
    throw Error(ErrorCode::oracle_format,
                std::string("unusable /describe reply (") + err.what() + "): " + raw);
  }
}

std::vector<std::string> HttpOracle::propose_keywords(const std::vector<std::string>& seeds,
                                                      int k2) {
  check_propose_args(seeds, k2);
  const json request = {{"seeds", seeds}, {"k", k2}};
  const std::string raw = post_json("/propose", request.dump());
  const json reply = json::parse(raw, nullptr, false);
  if (reply.is_discarded() || !reply.is_object() || !reply.contains("keywords") ||
      !reply["keywords"].is_array()) {
    throw Error(ErrorCode::oracle_format, "bad /propose reply: " + raw);
  }
  std::vector<std::string> candidates;
  for (const json& item : reply["keywords"]) {
    if (!item.is_string()) {
      throw Error(ErrorCode::oracle_format, "bad /propose reply: " + raw);
    }
    candidates.push_back(item.get<std::string>());
  }
  return filter_novel(candidates, seeds, k2, "/propose");
}

CachedOracle::CachedOracle(std::shared_ptr<Oracle> inner, std::filesystem::path cache_dir)
    : inner_(std::move(inner)), dir_(std::move(cache_dir)) {
  if (!inner_) throw Error(ErrorCode::usage, "cache needs an inner oracle");
  std::filesystem::create_directories(dir_);
}

std::string CachedOracle::cached_or_fetch(const std::string& kind,
                                          const std::string& canonical_request,
                                          const std::function<std::string()>& fetch) {
  const std::filesystem::path file = dir_ / (kind + "-" + sha256_hex(canonical_request) + ".json");
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (std::filesystem::exists(file)) {
      ++hits_;
      return read_file(file);
    }
  }
  const std::string value = fetch();
  std::lock_guard<std::mutex> lock(mutex_);
  ++misses_;
  // Write-then-rename keeps each key atomic.
  std::filesystem::path tmp = file;
  tmp += ".tmp";
  write_file(tmp, value);
  std::filesystem::rename(tmp, file);
  return value;
}

StructuredDescription CachedOracle::describe(const Image& image, const std::string& keyword) {
  const std::string key = check_keyword(keyword);
  const json request = {{"image_ppm_b64", base64_encode(encode_ppm(image))},
                        {"prompt", build_prompt(key)}};
  const std::string reply = cached_or_fetch("describe", request.dump(), [&] {
    return json{{"description", serialize_description(inner_->describe(image, key))}}.dump();
  });
  const json parsed = json::parse(reply, nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object() || !parsed.contains("description") ||
      !parsed["description"].is_string()) {
    throw Error(ErrorCode::oracle_format, "corrupt cache entry for describe request");
  }
  return parse_description_any(parsed["description"].get<std::string>());
}

std::vector<std::string> CachedOracle::propose_keywords(const std::vector<std::string>& seeds,
                                                        int k2) {
  check_propose_args(seeds, k2);
  const json request = {{"seeds", seeds}, {"k", k2}};
  const std::string reply = cached_or_fetch("propose", request.dump(), [&] {
    return json{{"keywords", inner_->propose_keywords(seeds, k2)}}.dump();
  });
  const json parsed = json::parse(reply, nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object() || !parsed.contains("keywords") ||
      !parsed["keywords"].is_array()) {
    throw Error(ErrorCode::oracle_format, "corrupt cache entry for propose request");
  }
  std::vector<std::string> out;
  for (const json& item : parsed["keywords"]) {
    if (!item.is_string()) {
      throw Error(ErrorCode::oracle_format, "corrupt cache entry for propose request");
    }
    out.push_back(item.get<std::string>());
  }
  return out;
}

}  // namespace prism
