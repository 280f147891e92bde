#include "prism/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>

#include "json.hpp"
#include "prism/matrix_io.hpp"

namespace prism {

namespace fs = std::filesystem;

const char* shape_name(Shape s) {
  switch (s) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
  }
  throw Error(ErrorCode::parse, "corrupt shape enum");
}

const char* color_name(ObjectColor c) {
  switch (c) {
    case ObjectColor::red: return "red";
    case ObjectColor::green: return "green";
    case ObjectColor::blue: return "blue";
    case ObjectColor::yellow: return "yellow";
    case ObjectColor::gray: return "gray";
  }
  throw Error(ErrorCode::parse, "corrupt color enum");
}

const char* texture_name(Texture t) {
  return t == Texture::solid ? "solid" : "striped";
}

std::array<double, 3> color_rgb(std::string_view name) {
  if (name == "red") return {0.90, 0.15, 0.15};
  if (name == "green") return {0.15, 0.80, 0.20};
  if (name == "blue") return {0.15, 0.25, 0.90};
  if (name == "yellow") return {0.95, 0.85, 0.20};
  if (name == "gray") return {0.55, 0.55, 0.55};
  if (name == "white") return {1.0, 1.0, 1.0};
  if (name == "black") return {0.0, 0.0, 0.0};
  throw Error(ErrorCode::parse, "unknown color name '" + std::string(name) + "'");
}

namespace {

constexpr double kStripeDarken = 0.55;  // second stripe tone = darken * color
constexpr int kStripeRows = 2;

constexpr ObjectColor kObjectColors[5] = {ObjectColor::red, ObjectColor::green, ObjectColor::blue,
                                          ObjectColor::yellow, ObjectColor::gray};
constexpr Shape kShapes[3] = {Shape::circle, Shape::square, Shape::triangle};

// Relation wording per location, used in ground-truth descriptions.
const char* relation_phrase(LocationLabel loc) {
  switch (loc) {
    case LocationLabel::left_half: return "left of";
    case LocationLabel::right_half: return "right of";
    case LocationLabel::top_half: return "above";
    case LocationLabel::bottom_half: return "below";
    case LocationLabel::full: return nullptr;
  }
  return nullptr;
}

bool inside_shape(Shape shape, double dx, double dy, double r) {
  switch (shape) {
    case Shape::circle:
      return dx * dx + dy * dy <= r * r;
    case Shape::square:
      return std::abs(dx) <= 0.9 * r && std::abs(dy) <= 0.9 * r;
    case Shape::triangle: {
      // Upward triangle: apex (0,-r), base corners (±0.95r, 0.75r).
      const double ax = 0.0, ay = -r;
      const double bx = -0.95 * r, by = 0.75 * r;
      const double cx = 0.95 * r, cy = 0.75 * r;
      const auto side = [&](double x1, double y1, double x2, double y2) {
        return (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
      };
      const double s1 = side(ax, ay, bx, by);
      const double s2 = side(bx, by, cx, cy);
      const double s3 = side(cx, cy, ax, ay);
      return (s1 <= 0 && s2 <= 0 && s3 <= 0) || (s1 >= 0 && s2 >= 0 && s3 >= 0);
    }
  }
  return false;
}

}  // namespace

SyntheticScene random_scene(Rng& rng) {
  SyntheticScene scene;
  const bool horizontal = rng.uniform() < 0.5;
  scene.objects[0].loc = horizontal ? LocationLabel::left_half : LocationLabel::top_half;
  scene.objects[1].loc = horizontal ? LocationLabel::right_half : LocationLabel::bottom_half;
  scene.objects[0].color = kObjectColors[rng.below(5)];
  do {
    scene.objects[1].color = kObjectColors[rng.below(5)];
  } while (scene.objects[1].color == scene.objects[0].color);
  for (SceneObject& obj : scene.objects) {
    obj.shape = kShapes[rng.below(3)];
    obj.texture = rng.uniform() < 0.5 ? Texture::striped : Texture::solid;
  }
  scene.background = rng.uniform() < 0.5 ? "white" : "black";
  return scene;
}

Image render_scene(const SyntheticScene& scene, int height, int width) {
  if (height < 8 || width < 8) {
    throw Error(ErrorCode::shape_mismatch, "stimulus images require height, width >= 8");
  }
  const auto bg = color_rgb(scene.background);
  Image image(height, width);
  for (int row = 0; row < height; ++row) {
    for (int col = 0; col < width; ++col) {
      for (int ch = 0; ch < 3; ++ch) image.at(row, col, ch) = bg[ch];
    }
  }
  for (const SceneObject& obj : scene.objects) {
    const Rect rect = location_rect(obj.loc);
    const double cx = (rect.x0 + rect.x1) / 2.0 * width;
    const double cy = (rect.y0 + rect.y1) / 2.0 * height;
    const double r = 0.35 * std::min((rect.x1 - rect.x0) * width, (rect.y1 - rect.y0) * height);
    const auto base = color_rgb(color_name(obj.color));
    for (int row = 0; row < height; ++row) {
      for (int col = 0; col < width; ++col) {
        const double dx = (col + 0.5) - cx;
        const double dy = (row + 0.5) - cy;
        if (!inside_shape(obj.shape, dx, dy, r)) continue;
        const bool dark =
            obj.texture == Texture::striped && (row / kStripeRows) % 2 == 1;
        for (int ch = 0; ch < 3; ++ch) {
          image.at(row, col, ch) = dark ? kStripeDarken * base[ch] : base[ch];
        }
      }
    }
  }
  return image;
}

namespace {

struct RegionStats {
  int count = 0;
  int min_row = 1 << 30, max_row = -1, min_col = 1 << 30, max_col = -1;
  std::array<double, 3> bright = {0, 0, 0};  // brightest tone seen
  double tone_spread = 0;                    // max L-inf distance between tones

  void add(int row, int col, const std::array<double, 3>& rgb) {
    ++count;
    min_row = std::min(min_row, row);
    max_row = std::max(max_row, row);
    min_col = std::min(min_col, col);
    max_col = std::max(max_col, col);
    const auto sum = [](const std::array<double, 3>& c) { return c[0] + c[1] + c[2]; };
    if (count == 1 || sum(rgb) > sum(bright)) {
      if (count > 1) {
        double d = 0;
        for (int ch = 0; ch < 3; ++ch) d = std::max(d, std::abs(rgb[ch] - bright[ch]));
        tone_spread = std::max(tone_spread, d);
      }
      bright = rgb;
    } else {
      double d = 0;
      for (int ch = 0; ch < 3; ++ch) d = std::max(d, std::abs(rgb[ch] - bright[ch]));
      tone_spread = std::max(tone_spread, d);
    }
  }
};

SceneObject classify_region(const RegionStats& s, LocationLabel loc) {
  if (s.count == 0) throw Error(ErrorCode::composition, "empty object region");
  SceneObject obj;
  obj.loc = loc;
  obj.texture = s.tone_spread > 0.1 ? Texture::striped : Texture::solid;

  double best = 1e9;
  for (ObjectColor c : kObjectColors) {
    const auto rgb = color_rgb(color_name(c));
    double d = 0;
    for (int ch = 0; ch < 3; ++ch) d = std::max(d, std::abs(rgb[ch] - s.bright[ch]));
    if (d < best) {
      best = d;
      obj.color = c;
    }
  }
  if (best > 0.15) throw Error(ErrorCode::composition, "object color outside the palette");

  const double box = static_cast<double>(s.max_row - s.min_row + 1) * (s.max_col - s.min_col + 1);
  const double fill = s.count / box;
  if (fill > 0.9) {
    obj.shape = Shape::square;
  } else if (fill > 0.64) {
    obj.shape = Shape::circle;
  } else {
    obj.shape = Shape::triangle;
  }
  return obj;
}

}  // namespace

SyntheticScene decode_scene(const Image& image) {
  const int H = image.height, W = image.width;
  const std::array<double, 3> corner = {image.at(0, 0, 0), image.at(0, 0, 1), image.at(0, 0, 2)};
  const std::string background = corner[0] + corner[1] + corner[2] > 1.5 ? "white" : "black";
  const auto bg = color_rgb(background);

  const auto is_object = [&](int row, int col) {
    for (int ch = 0; ch < 3; ++ch) {
      if (std::abs(image.at(row, col, ch) - bg[ch]) > 0.15) return true;
    }
    return false;
  };

  // Layout detection: a partitioning pair leaves the central strip of its
  // split axis untouched.
  bool mid_cols_clear = true, mid_rows_clear = true;
  for (int row = 0; row < H && mid_cols_clear; ++row) {
    for (int col = W / 2 - 1; col <= W / 2 && mid_cols_clear; ++col) {
      if (is_object(row, col)) mid_cols_clear = false;
    }
  }
  for (int col = 0; col < W && mid_rows_clear; ++col) {
    for (int row = H / 2 - 1; row <= H / 2 && mid_rows_clear; ++row) {
      if (is_object(row, col)) mid_rows_clear = false;
    }
  }
  if (mid_cols_clear == mid_rows_clear) {
    throw Error(ErrorCode::composition, "image does not show a partitioned two-object scene");
  }
  const bool horizontal = mid_cols_clear;

  RegionStats first, second;
  for (int row = 0; row < H; ++row) {
    for (int col = 0; col < W; ++col) {
      if (!is_object(row, col)) continue;
      const std::array<double, 3> rgb = {image.at(row, col, 0), image.at(row, col, 1),
                                         image.at(row, col, 2)};
      const bool in_first = horizontal ? col < W / 2 : row < H / 2;
      (in_first ? first : second).add(row, col, rgb);
    }
  }

  SyntheticScene scene;
  scene.background = background;
  scene.objects[0] = classify_region(
      first, horizontal ? LocationLabel::left_half : LocationLabel::top_half);
  scene.objects[1] = classify_region(
      second, horizontal ? LocationLabel::right_half : LocationLabel::bottom_half);
  return scene;
}

StructuredDescription ground_truth_description(const SyntheticScene& scene) {
  StructuredDescription d;
  for (int j = 0; j < 2; ++j) {
    const SceneObject& obj = scene.objects[j];
    const SceneObject& other = scene.objects[1 - j];
    std::string desc = std::string(color_name(obj.color)) + " " + texture_name(obj.texture);
    if (const char* rel = relation_phrase(obj.loc)) {
      desc += std::string(", ") + rel + " the " + shape_name(other.shape);
    }
    d.objects[j] = {shape_name(obj.shape), desc, obj.loc};
  }
  d.background = scene.background + " background";
  return d;
}

namespace {

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '-') {
      current.push_back(c);
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

}  // namespace

SyntheticScene scene_from_description(const StructuredDescription& d) {
  SyntheticScene scene;
  for (int j = 0; j < 2; ++j) {
    const ObjectTuple& tuple = d.objects[j];
    SceneObject obj;
    obj.loc = tuple.loc;

    const std::string name = to_lower(trim(tuple.name));
    bool shape_found = false;
    for (Shape s : kShapes) {
      if (name == shape_name(s)) {
        obj.shape = s;
        shape_found = true;
      }
    }
    if (!shape_found) {
      throw Error(ErrorCode::composition, "unknown object shape '" + tuple.name + "'");
    }

    const std::vector<std::string> words = words_of(to_lower(strip_relation_header(tuple.desc)));
    if (words.empty()) {
      throw Error(ErrorCode::composition, "object descriptor names no color");
    }
    bool color_found = false;
    for (ObjectColor c : {ObjectColor::red, ObjectColor::green, ObjectColor::blue,
                          ObjectColor::yellow, ObjectColor::gray}) {
      if (words.front() == color_name(c)) {
        obj.color = c;
        color_found = true;
      }
    }
    if (!color_found) {
      throw Error(ErrorCode::composition, "unknown object color '" + words.front() + "'");
    }
    obj.texture = Texture::solid;
    for (const std::string& word : words) {
      if (word == "striped") obj.texture = Texture::striped;
    }
    scene.objects[j] = obj;
  }
  if (scene.objects[0].loc == scene.objects[1].loc) {
    throw Error(ErrorCode::composition, "objects share a location");
  }
  // Canonical object order; draw order for overlapping rects stays fixed.
  if (static_cast<int>(scene.objects[0].loc) > static_cast<int>(scene.objects[1].loc)) {
    std::swap(scene.objects[0], scene.objects[1]);
  }

  const std::vector<std::string> bg = words_of(to_lower(d.background));
  if (bg.empty() || (bg.front() != "white" && bg.front() != "black")) {
    throw Error(ErrorCode::composition, "background must name white or black");
  }
  scene.background = bg.front();
  return scene;
}

Eigen::MatrixXd Corpus::voxel_matrix() const {
  if (entries.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(entries.size()), entries[0].voxels.size());
  for (std::size_t i = 0; i < entries.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = entries[i].voxels;
  return m;
}

std::vector<std::string> Corpus::descriptions() const {
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (const CorpusEntry& e : entries) out.push_back(e.description);
  return out;
}

Eigen::MatrixXd corpus_mixing_matrix(std::uint64_t seed, int v, int d_e) {
  Rng rng(seed_stream(seed, "brain-mix"));
  Eigen::MatrixXd w(v, d_e);
  for (int r = 0; r < v; ++r) {
    for (int c = 0; c < d_e; ++c) w(r, c) = rng.normal();
  }
  return w / std::sqrt(static_cast<double>(d_e));
}

namespace {

std::string sample_id(const std::string& split, int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", index);
  return split + "-" + buf;
}

void write_split(const CorpusConfig& config, const fs::path& out_dir, const std::string& split,
                 int count, const TextEmbedder& embedder, const Eigen::MatrixXd& mixing) {
  nlohmann::json manifest;
  manifest["split"] = split;
  manifest["seed"] = config.seed;
  manifest["entries"] = nlohmann::json::array();
  for (int i = 0; i < count; ++i) {
    Rng scene_rng(seed_stream(config.seed, "scene-" + split, i));
    const SyntheticScene scene = random_scene(scene_rng);
    const std::string desc = serialize_description(ground_truth_description(scene));
    const Image image = render_scene(scene, config.height, config.width);

    Eigen::VectorXd voxels = mixing * embedder.embed_text(desc);
    if (config.noise_sigma > 0) {
      Rng noise(seed_stream(config.seed, "noise-" + split, i));
      for (int k = 0; k < voxels.size(); ++k) voxels[k] += config.noise_sigma * noise.normal();
    }

    const std::string id = sample_id(split, i);
    const std::string voxel_rel = "voxels/" + id + ".pmat";
    const std::string image_rel = "images/" + id + ".ppm";
    const std::string desc_rel = "descs/" + id + ".txt";
    write_matrix(out_dir / voxel_rel, voxels.transpose());
    write_ppm(out_dir / image_rel, image);
    write_file(out_dir / desc_rel, desc + "\n");
    manifest["entries"].push_back({{"id", id},
                                   {"voxels", voxel_rel},
                                   {"image", image_rel},
                                   {"description", desc_rel}});
  }
  write_file(out_dir / ("manifest_" + split + ".json"), manifest.dump(2) + "\n");
}

}  // namespace

std::pair<fs::path, fs::path> generate_corpus(const CorpusConfig& config, const fs::path& out_dir) {
  if (config.n_train < 1 || config.n_test < 1) {
    throw Error(ErrorCode::usage, "corpus needs at least one sample per split");
  }
  if (config.v < 8) throw Error(ErrorCode::usage, "voxel count must be >= 8");
  if (config.noise_sigma < 0) throw Error(ErrorCode::usage, "noise_sigma must be >= 0");

  const TextEmbedder embedder(config.embed_seed);
  const Eigen::MatrixXd mixing = corpus_mixing_matrix(config.seed, config.v, embedder.dim());
  write_split(config, out_dir, "train", config.n_train, embedder, mixing);
  write_split(config, out_dir, "test", config.n_test, embedder, mixing);
  return {out_dir / "manifest_train.json", out_dir / "manifest_test.json"};
}

Corpus load_corpus(const fs::path& manifest_path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "bad manifest JSON: " + std::string(e.what()));
  }

  Corpus corpus;
  const fs::path base = manifest_path.parent_path();
  try {
    corpus.split = doc.at("split").get<std::string>();
    corpus.seed = doc.at("seed").get<std::uint64_t>();
    std::set<std::string> ids;
    for (const auto& entry : doc.at("entries")) {
      CorpusEntry e;
      e.id = entry.at("id").get<std::string>();
      if (!ids.insert(e.id).second) {
        throw Error(ErrorCode::parse, "duplicate sample id '" + e.id + "'");
      }
      const Eigen::MatrixXd row = read_matrix(base / entry.at("voxels").get<std::string>());
      if (row.rows() != 1 || row.cols() < 8) {
        throw Error(ErrorCode::shape_mismatch,
                    "voxel file for '" + e.id + "' must be a 1 x v row with v >= 8");
      }
      e.voxels = row.row(0).transpose();
      e.image = read_ppm(base / entry.at("image").get<std::string>());
      if (e.image.height < 8 || e.image.width < 8) {
        throw Error(ErrorCode::shape_mismatch, "stimulus image for '" + e.id + "' is too small");
      }
      if (!entry.at("description").is_null()) {
        e.description = trim(read_file(base / entry.at("description").get<std::string>()));
        parse_description_any(e.description);  // validation only
      }
      if (!corpus.entries.empty() && e.voxels.size() != corpus.entries[0].voxels.size()) {
        throw Error(ErrorCode::shape_mismatch, "voxel length differs across samples");
      }
      corpus.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, "bad manifest JSON: " + std::string(e.what()));
  }
  return corpus;
}

}  // namespace prism
