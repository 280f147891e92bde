#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "prism/common.hpp"
#include "prism/descriptions.hpp"
#include "prism/image.hpp"
#include "prism/text.hpp"

namespace prism {

enum class Shape { circle, square, triangle };
enum class ObjectColor { red, green, blue, yellow, gray };
enum class Texture { solid, striped };

const char* shape_name(Shape s);
const char* color_name(ObjectColor c);
const char* texture_name(Texture t);

/// RGB for object colors plus the background colors "white" and "black".
std::array<double, 3> color_rgb(std::string_view name);

struct SceneObject {
  Shape shape;
  ObjectColor color;
  Texture texture;
  LocationLabel loc;

  bool operator==(const SceneObject&) const = default;
};

/// Two objects on a plain background. Objects are kept in canonical order
/// (sorted by location label) so render/decode round-trips compare equal.
struct SyntheticScene {
  std::array<SceneObject, 2> objects;
  std::string background;  // color name, "white" or "black"

  bool operator==(const SyntheticScene&) const = default;
};

/// Samples a scene whose locations partition the frame ({left,right} or
/// {top,bottom}) with distinct object colors.
SyntheticScene random_scene(Rng& rng);

/// Deterministic raster of a scene. Requires height, width >= 8.
Image render_scene(const SyntheticScene& scene, int height, int width);

/// Exact inverse of render_scene for partitioning scenes (the corpus layout);
/// tolerant of 8-bit quantization. Throws composition error when the image
/// does not look like a rendered scene.
SyntheticScene decode_scene(const Image& image);

/// The canonical description the oracle would emit at full fidelity: per
/// object "<color> <texture>, <relation> the <other name>", background
/// "<color> background".
StructuredDescription ground_truth_description(const SyntheticScene& scene);

/// Template inverse of ground_truth_description: shape from the object name,
/// color from the first descriptor word, texture from a "striped" mention,
/// background from its first word. Throws composition error on tokens outside
/// the scene vocabulary.
SyntheticScene scene_from_description(const StructuredDescription& d);

struct CorpusConfig {
  std::uint64_t seed = 0;
  int n_train = 16;
  int n_test = 8;
  int v = 64;  // voxels per sample, >= 8
  int height = 64;
  int width = 64;
  double noise_sigma = 0.02;
  std::uint64_t embed_seed = kDefaultTextEmbedSeed;
};

struct CorpusEntry {
  std::string id;
  Eigen::VectorXd voxels;
  Image image;
  std::string description;  // serialized surface form, may be empty
};

struct Corpus {
  std::string split;
  std::uint64_t seed = 0;
  std::vector<CorpusEntry> entries;

  Eigen::MatrixXd voxel_matrix() const;  // N x v
  std::vector<std::string> descriptions() const;
};

/// The fixed linear brain-from-text map the generator mixes with. Exposed so
/// alignment tests can reconstruct the noiseless structure.
Eigen::MatrixXd corpus_mixing_matrix(std::uint64_t seed, int v, int d_e);

/// Renders scenes, writes voxels/images/descriptions and two manifests under
/// out_dir; returns (train manifest path, test manifest path). Voxels are
/// mixing_matrix * embed(description) + noise_sigma * N(0, I).
std::pair<std::filesystem::path, std::filesystem::path> generate_corpus(
    const CorpusConfig& config, const std::filesystem::path& out_dir);

/// Loads and validates a manifest: unique ids, files present, shapes
/// consistent, finite voxels, pixels in range, descriptions parseable.
Corpus load_corpus(const std::filesystem::path& manifest_path);

}  // namespace prism
