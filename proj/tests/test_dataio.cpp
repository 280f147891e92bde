#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "prism/dataio.hpp"
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

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Digest of every file under a directory, keyed by relative path.
std::map<std::string, std::string> tree_digest(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    out[fs::relative(entry.path(), root).generic_string()] = sha256_hex(read_file(entry.path()));
  }
  return out;
}

}  // namespace

TEST_CASE("rendered scenes decode back to themselves") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const SyntheticScene scene = random_scene(rng);
    const Image image = render_scene(scene, 64, 64);
    CHECK(decode_scene(image) == scene);
    // 8-bit quantization through the PPM codec must not break decoding.
    CHECK(decode_scene(decode_ppm(encode_ppm(image), "mem")) == scene);
  }
}

TEST_CASE("decoding survives non-square rasters") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const SyntheticScene scene = random_scene(rng);
    CHECK(decode_scene(render_scene(scene, 48, 96)) == scene);
  }
}

TEST_CASE("render guards the minimum raster size") {
  Rng rng(1);
  const SyntheticScene scene = random_scene(rng);
  CHECK(code_of([&] { render_scene(scene, 4, 64); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([&] { decode_scene(Image(16, 16)); }) == ErrorCode::composition);
}

TEST_CASE("ground-truth description of the red-circle blue-square scene") {
  SyntheticScene scene;
  scene.objects[0] = {Shape::circle, ObjectColor::red, Texture::solid, LocationLabel::left_half};
  scene.objects[1] = {Shape::square, ObjectColor::blue, Texture::solid, LocationLabel::right_half};
  scene.background = "white";
  CHECK(serialize_description(ground_truth_description(scene)) ==
        "(circle: red solid, left of the square: left-half), "
        "(square: blue solid, right of the circle: right-half), white background");

  scene.objects[0].loc = LocationLabel::top_half;
  scene.objects[1].loc = LocationLabel::bottom_half;
  scene.objects[0].texture = Texture::striped;
  CHECK(serialize_description(ground_truth_description(scene)) ==
        "(circle: red striped, above the square: top-half), "
        "(square: blue solid, below the circle: bottom-half), white background");
}

TEST_CASE("corpus generation is deterministic") {
  CorpusConfig config;
  config.seed = 7;
  config.n_train = 4;
  config.n_test = 2;
  config.v = 16;
  config.height = config.width = 32;

  const fs::path a = fresh_dir("prism_corpus_a");
  const fs::path b = fresh_dir("prism_corpus_b");
  generate_corpus(config, a);
  generate_corpus(config, b);
  const auto da = tree_digest(a);
  CHECK(da.size() == 3 * 6 + 2);  // voxels, images, descs per sample + 2 manifests
  CHECK(da == tree_digest(b));
}

TEST_CASE("noiseless voxels equal the mixing matrix applied to embeddings") {
  CorpusConfig config;
  config.seed = 3;
  config.n_train = 3;
  config.n_test = 1;
  config.v = 24;
  config.height = config.width = 32;
  config.noise_sigma = 0.0;

  const fs::path dir = fresh_dir("prism_corpus_noiseless");
  const auto [train_manifest, test_manifest] = generate_corpus(config, dir);
  const Corpus corpus = load_corpus(train_manifest);
  REQUIRE(corpus.entries.size() == 3);

  const TextEmbedder embedder(config.embed_seed);
  const Eigen::MatrixXd mixing = corpus_mixing_matrix(config.seed, config.v, embedder.dim());
  for (const CorpusEntry& e : corpus.entries) {
    const Eigen::VectorXd expected = mixing * embedder.embed_text(e.description);
    for (int k = 0; k < config.v; ++k) {
      // On-disk storage is f32; the loaded value is the float-cast exact value.
      CHECK(e.voxels[k] == static_cast<double>(static_cast<float>(expected[k])));
    }
  }
}

TEST_CASE("split sizes land on disk") {
  CorpusConfig config;
  config.seed = 1;
  config.n_train = 12;
  config.n_test = 5;
  config.v = 16;
  config.height = config.width = 32;
  const fs::path dir = fresh_dir("prism_corpus_counts");
  generate_corpus(config, dir);

  int voxels = 0, images = 0, descs = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    voxels += ext == ".pmat";
    images += ext == ".ppm";
    descs += ext == ".txt";
  }
  CHECK(voxels == 17);
  CHECK(images == 17);
  CHECK(descs == 17);
}

TEST_CASE("loaded corpus satisfies every invariant") {
  CorpusConfig config;
  config.seed = 9;
  config.n_train = 6;
  config.n_test = 3;
  config.v = 16;
  config.height = config.width = 32;
  const fs::path dir = fresh_dir("prism_corpus_ok");
  const auto [train_manifest, test_manifest] = generate_corpus(config, dir);

  const Corpus train = load_corpus(train_manifest);
  const Corpus test = load_corpus(test_manifest);
  CHECK(train.split == "train");
  CHECK(test.split == "test");
  CHECK(train.entries.size() == 6);
  CHECK(test.entries.size() == 3);
  CHECK(train.voxel_matrix().rows() == 6);
  CHECK(train.voxel_matrix().cols() == 16);
  for (const CorpusEntry& e : train.entries) {
    CHECK(e.voxels.allFinite());
    CHECK(e.image.height == 32);
    const StructuredDescription d = parse_description(e.description);
    CHECK(d.objects[0].loc != d.objects[1].loc);
    // Images decode to the scene the description talks about.
    const SyntheticScene scene = decode_scene(e.image);
    CHECK(serialize_description(ground_truth_description(scene)) == e.description);
  }
}

TEST_CASE("load failures are distinct error values") {
  CorpusConfig config;
  config.seed = 5;
  config.n_train = 2;
  config.n_test = 1;
  config.v = 16;
  config.height = config.width = 32;
  const fs::path dir = fresh_dir("prism_corpus_bad");
  const auto [train_manifest, test_manifest] = generate_corpus(config, dir);

  SUBCASE("deleted voxel file") {
    fs::remove(dir / "voxels" / "train-0001.pmat");
    try {
      load_corpus(train_manifest);
      FAIL("expected an Error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::missing_file);
      CHECK(std::string(e.what()).find("train-0001.pmat") != std::string::npos);
    }
  }

  SUBCASE("NaN voxel payload") {
    // Corrupt one f32 in place (header is 16 bytes).
    std::string bytes = read_file(dir / "voxels" / "train-0000.pmat");
    bytes[16] = '\x00';
    bytes[17] = '\x00';
    bytes[18] = '\xc0';
    bytes[19] = '\x7f';
    write_file(dir / "voxels" / "train-0000.pmat", bytes);
    CHECK(code_of([&] { load_corpus(train_manifest); }) == ErrorCode::nan_payload);
  }

  SUBCASE("image with a sample above maxval") {
    std::string bad = "P6\n8 8\n100\n";
    bad.append(8 * 8 * 3, '\x96');  // 150/100 = 1.5
    write_file(dir / "images" / "train-0000.ppm", bad);
    CHECK(code_of([&] { load_corpus(train_manifest); }) == ErrorCode::range_violation);
  }

  SUBCASE("duplicate sample ids") {
    std::string manifest = read_file(train_manifest);
    const std::string id_field = "\"id\": \"train-0001\"";
    const std::size_t pos = manifest.find(id_field);
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, id_field.size(), "\"id\": \"train-0000\"");
    write_file(train_manifest, manifest);
    CHECK(code_of([&] { load_corpus(train_manifest); }) == ErrorCode::parse);
  }

  SUBCASE("undersized voxel rows") {
    Eigen::MatrixXd tiny(1, 4);
    tiny.setZero();
    write_matrix(dir / "voxels" / "train-0000.pmat", tiny);
    CHECK(code_of([&] { load_corpus(train_manifest); }) == ErrorCode::shape_mismatch);
  }
}

TEST_CASE("corpus generation rejects bad configs") {
  CorpusConfig config;
  config.n_train = 0;
  CHECK(code_of([&] { generate_corpus(config, "unused"); }) == ErrorCode::usage);
  config.n_train = 1;
  config.v = 4;
  CHECK(code_of([&] { generate_corpus(config, "unused"); }) == ErrorCode::usage);
  config.v = 16;
  config.noise_sigma = -1;
  CHECK(code_of([&] { generate_corpus(config, "unused"); }) == ErrorCode::usage);
}

TEST_CASE("descriptions invert back to scenes") {
  Rng rng(91);
  for (int i = 0; i < 50; ++i) {
    const SyntheticScene scene = random_scene(rng);
    CHECK(scene_from_description(ground_truth_description(scene)) == scene);
  }

  // Degraded descriptors still carry enough for a template render.
  StructuredDescription d;
  d.objects[0] = {"square", "yellow striped", LocationLabel::bottom_half};
  d.objects[1] = {"Circle", "gray", LocationLabel::top_half};
  d.background = "black background";
  const SyntheticScene scene = scene_from_description(d);
  // Canonical order sorts by location, so the circle (top) comes first.
  CHECK(scene.objects[0] ==
        SceneObject{Shape::circle, ObjectColor::gray, Texture::solid, LocationLabel::top_half});
  CHECK(scene.objects[1] ==
        SceneObject{Shape::square, ObjectColor::yellow, Texture::striped,
                    LocationLabel::bottom_half});
  CHECK(scene.background == "black");

  StructuredDescription bad = d;
  bad.objects[0].name = "hexagon";
  CHECK(code_of([&] { scene_from_description(bad); }) == ErrorCode::composition);
  bad = d;
  bad.objects[0].desc = "purple solid";
  CHECK(code_of([&] { scene_from_description(bad); }) == ErrorCode::composition);
  bad = d;
  bad.objects[0].loc = d.objects[1].loc;
  CHECK(code_of([&] { scene_from_description(bad); }) == ErrorCode::composition);
  bad = d;
  bad.background = "plaid";
  CHECK(code_of([&] { scene_from_description(bad); }) == ErrorCode::composition);
}
