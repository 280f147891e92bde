#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prism/descriptions.hpp"
#include "prism/image.hpp"
#include "prism/oracle.hpp"

namespace prism {

struct KeywordCandidate {
  std::string keyword;
  double cka_score = 0.0;    // constraint value: cka(voxels, keyword embeddings)
  double recon_score = 0.0;  // objective: mean 1 - perceptual distance
  int round_found = 0;

  bool operator==(const KeywordCandidate&) const = default;
};

struct SearchConfig {
  double epsilon = 0.5;
  int k1 = 8;  // parents per round
  int k2 = 2;  // children per round
  int rounds = 40;
  std::uint64_t seed = 0;
  std::vector<std::string> initial_keywords;
};

/// Turns a structured description into a candidate reconstruction.
using Reconstructor = std::function<Image(const StructuredDescription&)>;

/// Embeds serialized description text for the alignment constraint.
using DescriptionEmbedder = std::function<Eigen::VectorXd(const std::string&)>;

/// The 24 built-in candidate keywords: six relation families, four
/// phrasings each.
std::vector<std::string> initial_pool();

/// Scores one keyword: describe every image, reconstruct from each
/// description (objective = mean 1 - perceptual distance), embed the
/// description texts and take cka against the voxels (constraint). Oracle and
/// reconstructor errors are rethrown tagged with the keyword.
KeywordCandidate score_keyword(const std::string& keyword, const std::vector<Image>& images,
                               const Eigen::MatrixXd& voxels, Oracle& oracle,
                               const Reconstructor& reconstructor,
                               const DescriptionEmbedder& embedder, int round_found = 0);

/// One line of the JSON-lines audit log.
struct AuditRecord {
  int round = 0;
  std::string keyword;
  double cka = 0.0;
  double recon = 0.0;
  bool admitted = false;

  bool operator==(const AuditRecord&) const = default;
};

struct SearchResult {
  KeywordCandidate best;
  std::vector<KeywordCandidate> pool;  // final filtered pool, ranked
  std::vector<AuditRecord> audit;
  double beta_threshold = 0.0;
};

/// Epsilon-greedy keyword expansion. The constraint threshold is frozen at
/// the minimum initial cka score; every round the pool is filtered to
/// candidates strictly above it, ranked by recon score (descending, ties by
/// keyword), and either the top k1 or, with probability epsilon, a uniform
/// random k1 become parents whose k2 proposed children are scored and
/// admitted when they pass the constraint. Returns the recon argmax of the
/// final filtered pool. When audit_path is set, each scoring event is
/// appended and flushed immediately so aborted runs keep a partial log.
SearchResult run_search(const SearchConfig& cfg, const std::vector<Image>& images,
                        const Eigen::MatrixXd& voxels, Oracle& oracle,
                        const Reconstructor& reconstructor, const DescriptionEmbedder& embedder,
                        const std::optional<std::filesystem::path>& audit_path = std::nullopt);

}  // namespace prism
