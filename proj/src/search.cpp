#include "prism/search.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <utility>

#include "json.hpp"
#include "prism/alignment.hpp"
#include "prism/common.hpp"
#include "prism/metrics.hpp"

namespace prism {

namespace {

using nlohmann::json;

// Rank order: objective descending, keyword ascending on ties.
bool ranks_before(const KeywordCandidate& a, const KeywordCandidate& b) {
  if (a.recon_score != b.recon_score) return a.recon_score > b.recon_score;
  return a.keyword < b.keyword;
}

std::string audit_line(const AuditRecord& record) {
  return json{{"round", record.round},
              {"keyword", record.keyword},
              {"cka", record.cka},
              {"recon", record.recon},
              {"admitted", record.admitted}}
      .dump();
}

class AuditLog {
public:
  AuditLog(std::vector<AuditRecord>& records, const std::optional<std::filesystem::path>& path)
      : records_(records) {
    if (!path) return;
    if (path->has_parent_path()) std::filesystem::create_directories(path->parent_path());
    file_.open(*path, std::ios::trunc);
    if (!file_) throw Error(ErrorCode::io, "cannot open audit log: " + path->string());
  }

  void append(const AuditRecord& record) {
    records_.push_back(record);
    if (!file_.is_open()) return;
    // Flush per record so aborted searches keep a usable partial log.
    file_ << audit_line(record) << '\n' << std::flush;
    if (!file_) throw Error(ErrorCode::io, "audit log write failed");
  }

private:
  std::vector<AuditRecord>& records_;
  std::ofstream file_;
};

}  // namespace

std::vector<std::string> initial_pool() {
  return {
      "Semantic Relation",   "Conceptual Link",       "Meaning Association", "Semantic Context",
      "Positional Relation", "Spatial Configuration", "Relative Position",   "Object Location",
      "Functional Relation", "Action Affordance",     "Usage Context",       "Functional Role",
      "Causal Relation",     "Cause And Effect",      "Event Sequence",      "Causal Link",
      "Emotional Relation",  "Affective Tone",        "Mood Association",    "Emotional Context",
      "Part-Whole Relation", "Component Structure",   "Part Composition",    "Structural Hierarchy",
  };
}

KeywordCandidate score_keyword(const std::string& keyword, const std::vector<Image>& images,
                               const Eigen::MatrixXd& voxels, Oracle& oracle,
                               const Reconstructor& reconstructor,
                               const DescriptionEmbedder& embedder, int round_found) {
  const std::string key = trim(keyword);
  if (key.empty()) throw Error(ErrorCode::usage, "cannot score a blank keyword");
  if (images.size() < 3) {
    throw Error(ErrorCode::usage, "keyword scoring needs at least 3 samples");
  }
  if (voxels.rows() != static_cast<Eigen::Index>(images.size())) {
    throw Error(ErrorCode::shape_mismatch, "images and voxel rows are misaligned");
  }

  KeywordCandidate candidate;
  candidate.keyword = key;
  candidate.round_found = round_found;

  Eigen::MatrixXd embedded;
  double total = 0.0;
  try {
    for (std::size_t i = 0; i < images.size(); ++i) {
      const StructuredDescription description = oracle.describe(images[i], key);
      const Eigen::VectorXd k_i = embedder(serialize_description(description));
      if (embedded.size() == 0) {
        embedded.resize(static_cast<Eigen::Index>(images.size()), k_i.size());
      } else if (k_i.size() != embedded.cols()) {
        throw Error(ErrorCode::dimension_mismatch, "embedder changed output width");
      }
      embedded.row(static_cast<Eigen::Index>(i)) = k_i;
      const Image recon = reconstructor(description);
      total += 1.0 - perceptual_distance(images[i], recon);
    }
    candidate.cka_score = cka(voxels, embedded);
  } catch (const Error& err) {
    throw Error(err.code(), "keyword '" + key + "': " + err.what());
  }
  candidate.recon_score = total / static_cast<double>(images.size());
  return candidate;
}

SearchResult run_search(const SearchConfig& cfg, const std::vector<Image>& images,
                        const Eigen::MatrixXd& voxels, Oracle& oracle,
                        const Reconstructor& reconstructor, const DescriptionEmbedder& embedder,
                        const std::optional<std::filesystem::path>& audit_path) {
  if (cfg.initial_keywords.empty()) {
    throw Error(ErrorCode::usage, "search needs a non-empty initial keyword pool");
  }
  if (cfg.epsilon < 0.0 || cfg.epsilon > 1.0) {
    throw Error(ErrorCode::usage, "epsilon must lie in [0,1]");
  }
  if (cfg.k1 < 1 || cfg.k2 < 1 || cfg.rounds < 0) {
    throw Error(ErrorCode::usage, "search needs k1 >= 1, k2 >= 1, rounds >= 0");
  }

  SearchResult result;
  AuditLog log(result.audit, audit_path);
  Rng rng(seed_stream(cfg.seed, "search"));

  // scored_ keys are lowercase keywords; re-proposed candidates are never
  // scored twice, whether or not they passed the constraint.
  std::set<std::string> scored;
  std::vector<KeywordCandidate> pool;

  // Initialization: score the whole starting pool, freeze the constraint
  // threshold at its minimum cka, admit strictly-above candidates.
  std::vector<KeywordCandidate> initial;
  for (const std::string& keyword : cfg.initial_keywords) {
    const std::string key = trim(keyword);
    if (key.empty()) throw Error(ErrorCode::usage, "blank keyword in the initial pool");
    if (!scored.insert(to_lower(key)).second) continue;
    initial.push_back(score_keyword(key, images, voxels, oracle, reconstructor, embedder, 0));
  }
  double beta = initial.front().cka_score;
  for (const KeywordCandidate& candidate : initial) beta = std::min(beta, candidate.cka_score);
  result.beta_threshold = beta;
  for (const KeywordCandidate& candidate : initial) {
    const bool admitted = candidate.cka_score > beta;
    log.append({0, candidate.keyword, candidate.cka_score, candidate.recon_score, admitted});
    if (admitted) pool.push_back(candidate);
  }

  const auto ranked_pool = [&] {
    std::vector<KeywordCandidate> view = pool;
    std::sort(view.begin(), view.end(), ranks_before);
    return view;
  };

  for (int round = 1; round <= cfg.rounds; ++round) {
    if (pool.empty()) {
      throw Error(ErrorCode::search_collapsed,
                  "constraint filter emptied the pool at round " + std::to_string(round));
    }
    std::vector<KeywordCandidate> ranked = ranked_pool();
    const std::size_t parent_count = std::min<std::size_t>(cfg.k1, ranked.size());

    std::vector<std::string> parents;
    if (rng.uniform() < cfg.epsilon) {
      // Exploration: uniform sample without replacement.
      std::vector<std::size_t> indices(ranked.size());
      for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
      for (std::size_t i = 0; i < parent_count; ++i) {
        const std::size_t j = i + rng.below(indices.size() - i);
        std::swap(indices[i], indices[j]);
        parents.push_back(ranked[indices[i]].keyword);
      }
    } else {
      for (std::size_t i = 0; i < parent_count; ++i) parents.push_back(ranked[i].keyword);
    }

    const std::vector<std::string> children = oracle.propose_keywords(parents, cfg.k2);
    for (const std::string& child : children) {
      if (!scored.insert(to_lower(trim(child))).second) continue;  // set-union semantics
      const KeywordCandidate candidate =
          score_keyword(child, images, voxels, oracle, reconstructor, embedder, round);
      const bool admitted = candidate.cka_score > beta;
      log.append({round, candidate.keyword, candidate.cka_score, candidate.recon_score, admitted});
      if (admitted) pool.push_back(candidate);
    }
  }

  if (pool.empty()) {
    throw Error(ErrorCode::search_collapsed, "constraint filter left no candidate to return");
  }
  result.pool = ranked_pool();
  result.best = result.pool.front();
  return result;
}

}  // namespace prism
