#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>

#include <nlohmann/json.hpp>

#include "crqat/tensor.hpp"

namespace crqat {

inline constexpr std::uint32_t kGeneratorVersion = 1;

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (w <= 0 || h <= 0) return 0.0;
  const double inter = w * h;
  return inter / (a.area() + b.area() - inter);
}

struct Annotation {
  Box box;
  std::size_t category = 0;
  bool operator==(const Annotation&) const = default;
};

struct Category {
  std::size_t id = 0;
  std::size_t shape = 0;
  std::size_t color = 0;
  bool novel = false;
  std::string name;
};

/// Compositional (shape, color) vocabulary with a held-out novel split.
class CategoryTable {
 public:
  CategoryTable() = default;
  CategoryTable(std::vector<std::string> shapes, std::vector<std::string> colors,
                const std::vector<std::pair<std::string, std::string>>& novel_pairs)
      : shapes_(std::move(shapes)), colors_(std::move(colors)) {
    if (std::set<std::string>(shapes_.begin(), shapes_.end()).size() != shapes_.size() ||
        std::set<std::string>(colors_.begin(), colors_.end()).size() != colors_.size()) {
      throw std::invalid_argument("category table: duplicate shape or color names");
    }
    std::set<std::pair<std::size_t, std::size_t>> novel;
    for (const auto& [s, c] : novel_pairs) {
      const auto si = find(shapes_, s), ci = find(colors_, c);
      if (!si || !ci) throw std::invalid_argument("category table: novel pair (" + s + ", " + c + ") not in shapes x colors");
      if (!novel.emplace(*si, *ci).second) throw std::invalid_argument("category table: duplicate novel pair (" + s + ", " + c + ")");
    }
    for (std::size_t s = 0; s < shapes_.size(); ++s)
      for (std::size_t c = 0; c < colors_.size(); ++c) {
        const std::size_t id = categories_.size();
        categories_.push_back(Category{id, s, c, novel.count({s, c}) > 0, colors_[c] + " " + shapes_[s]});
      }
    if (base_ids().size() < 2) throw std::invalid_argument("category table: need at least two base categories");
  }

  const std::vector<std::string>& shapes() const { return shapes_; }
  const std::vector<std::string>& colors() const { return colors_; }
  const std::vector<Category>& categories() const { return categories_; }
  std::size_t size() const { return categories_.size(); }
  const Category& operator[](std::size_t id) const { return categories_.at(id); }

  std::vector<std::size_t> base_ids() const { return ids_where(false); }
  std::vector<std::size_t> novel_ids() const { return ids_where(true); }
  std::vector<std::size_t> all_ids() const {
    std::vector<std::size_t> v(categories_.size());
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  }
  std::vector<std::pair<std::string, std::string>> novel_pairs() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& c : categories_)
      if (c.novel) out.emplace_back(shapes_[c.shape], colors_[c.color]);
    return out;
  }

 private:
  static std::optional<std::size_t> find(const std::vector<std::string>& v, const std::string& x) {
    const auto it = std::find(v.begin(), v.end(), x);
    if (it == v.end()) return std::nullopt;
    return static_cast<std::size_t>(it - v.begin());
  }
  std::vector<std::size_t> ids_where(bool novel) const {
    std::vector<std::size_t> v;
    for (const auto& c : categories_)
      if (c.novel == novel) v.push_back(c.id);
    return v;
  }

  std::vector<std::string> shapes_, colors_;
  std::vector<Category> categories_;
};

inline CategoryTable default_category_table() {
  return CategoryTable({"circle", "square", "triangle"}, {"red", "green", "blue", "yellow"},
                       {{"circle", "blue"}, {"square", "yellow"}, {"triangle", "red"}});
}

inline std::array<double, 3> color_rgb(const std::string& name) {
  static const std::map<std::string, std::array<double, 3>> table{
      {"red", {0.90, 0.12, 0.10}},   {"green", {0.12, 0.78, 0.15}}, {"blue", {0.12, 0.25, 0.92}},
      {"yellow", {0.95, 0.88, 0.10}}, {"cyan", {0.10, 0.85, 0.88}},  {"magenta", {0.88, 0.12, 0.85}},
      {"white", {0.97, 0.97, 0.97}}, {"black", {0.03, 0.03, 0.03}}};
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown color '" + name + "'");
  return it->second;
}

/// One object to rasterize: a shape filling the square [x0, x0+size] x [y0, y0+size].
struct ObjectSpec {
  std::string shape;
  std::string color;
  double x0 = 0, y0 = 0, size = 0;
  Box box() const { return Box{x0, y0, x0 + size, y0 + size}; }
};

struct DetectionSample {
  std::size_t channels = 3, height = 64, width = 64;
  std::vector<double> image;  // row-major [3 x H x W] in [0, 1]
  std::vector<Annotation> annotations;
  bool operator==(const DetectionSample&) const = default;
};

/// Checks the sample invariants: finite pixels in [0,1], boxes in bounds with positive area.
inline void validate_sample(const DetectionSample& s) {
  if (s.image.size() != s.channels * s.height * s.width) throw std::invalid_argument("sample: image size mismatch");
  for (double v : s.image)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("sample: pixel outside [0, 1]");
  for (const auto& a : s.annotations) {
    const Box& b = a.box;
    if (!(b.x1 > b.x0 && b.y1 > b.y0)) throw std::invalid_argument("sample: degenerate box");
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > static_cast<double>(s.width) || b.y1 > static_cast<double>(s.height)) {
      throw std::invalid_argument("sample: box outside image bounds");
    }
  }
}

namespace detail {
inline bool shape_contains(const std::string& shape, double x, double y, const ObjectSpec& o) {
  const double r = 0.5 * o.size, cx = o.x0 + r, cy = o.y0 + r;
  if (shape == "circle") return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
  if (shape == "square") return std::abs(x - cx) <= r && std::abs(y - cy) <= r;
  if (shape == "triangle") {
    // apex at top center, base along the bottom edge
    if (y < o.y0 || y > o.y0 + o.size) return false;
    return std::abs(x - cx) <= 0.5 * (y - o.y0);
  }
  throw std::invalid_argument("unknown shape '" + shape + "'");
}
}  // namespace detail

/// Textured background with additive noise, then each object composited with
/// 4x4-supersampled coverage. Specs overlapping with IoU > 0.7 are rejected.
inline DetectionSample render_sample(const std::vector<ObjectSpec>& specs, const CategoryTable& table,
                                     std::uint64_t background_seed, std::size_t image_size = 64, double noise_sigma = 0.02) {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Box b = specs[i].box();
    if (specs[i].size <= 0 || b.x0 < 0 || b.y0 < 0 || b.x1 > static_cast<double>(image_size) || b.y1 > static_cast<double>(image_size)) {
      throw std::invalid_argument("render_sample: object outside image bounds");
    }
    for (std::size_t j = 0; j < i; ++j)
      if (iou(b, specs[j].box()) > 0.7) throw std::invalid_argument("render_sample: objects overlap with IoU > 0.7");
  }

  DetectionSample s;
  s.height = s.width = image_size;
  const std::size_t HW = image_size * image_size;
  s.image.assign(3 * HW, 0.0);

  Rng rng(background_seed);
  // Low-frequency texture: per-channel base level plus two oriented sinusoids.
  std::array<double, 3> base{};
  for (auto& b : base) b = rng.uniform(0.30, 0.55);
  const double f1 = rng.uniform(0.05, 0.25), f2 = rng.uniform(0.05, 0.25);
  const double p1 = rng.uniform(0.0, 2 * M_PI), p2 = rng.uniform(0.0, 2 * M_PI);
  const double theta = rng.uniform(0.0, M_PI), amp = rng.uniform(0.02, 0.08);
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x) {
      const double u = std::cos(theta) * x + std::sin(theta) * y;
      const double v = -std::sin(theta) * x + std::cos(theta) * y;
      const double tex = amp * (std::sin(f1 * u + p1) + std::sin(f2 * v + p2));
      for (std::size_t c = 0; c < 3; ++c) s.image[c * HW + y * image_size + x] = base[c] + tex;
    }

  for (const auto& o : specs) {
    const auto rgb = color_rgb(o.color);
    const bool known_shape = std::find(table.shapes().begin(), table.shapes().end(), o.shape) != table.shapes().end();
    const bool known_color = std::find(table.colors().begin(), table.colors().end(), o.color) != table.colors().end();
    if (!known_shape || !known_color) throw std::invalid_argument("render_sample: object not in category table");
    const auto xa = static_cast<std::size_t>(std::floor(o.x0)), ya = static_cast<std::size_t>(std::floor(o.y0));
    const auto xb = std::min(image_size, static_cast<std::size_t>(std::ceil(o.x0 + o.size)));
    const auto yb = std::min(image_size, static_cast<std::size_t>(std::ceil(o.y0 + o.size)));
    for (std::size_t y = ya; y < yb; ++y)
      for (std::size_t x = xa; x < xb; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx)
            hits += detail::shape_contains(o.shape, x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0, o) ? 1 : 0;
        if (!hits) continue;
        const double a = hits / 16.0;
        for (std::size_t c = 0; c < 3; ++c) {
          double& px = s.image[c * HW + y * image_size + x];
          px = (1.0 - a) * px + a * rgb[c];
        }
      }
    const std::size_t shape_idx = static_cast<std::size_t>(std::find(table.shapes().begin(), table.shapes().end(), o.shape) - table.shapes().begin());
    const std::size_t color_idx = static_cast<std::size_t>(std::find(table.colors().begin(), table.colors().end(), o.color) - table.colors().begin());
    s.annotations.push_back(Annotation{o.box(), shape_idx * table.colors().size() + color_idx});
  }

  for (double& px : s.image) px = std::clamp(px + noise_sigma * rng.normal(), 0.0, 1.0);
  return s;
}

enum class Split { train = 0, val_base = 1, val_novel = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val_base: return "val_base";
    case Split::val_novel: return "val_novel";
  }
  return "?";
}

struct DatasetConfig {
  std::size_t n_train = 4000;
  std::size_t n_val_base = 500;
  std::size_t n_val_novel = 500;
  std::size_t image_size = 64;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  double min_size = 14.0;
  double max_size = 26.0;
  /// Placement rejection threshold; stricter than the renderer's hard 0.7 limit.
  double max_overlap_iou = 0.2;
  double noise_sigma = 0.02;
  std::uint64_t seed = 7;
};

/// Deterministic dataset handle. Samples are rendered on demand from a per-sample
/// seed, so any index of any split is reproducible without storing images.
class SyntheticDataset {
 public:
  SyntheticDataset(DatasetConfig config, CategoryTable table) : config_(config), table_(std::move(table)) {
    if (table_.novel_ids().empty()) throw std::invalid_argument("dataset: novel_pairs must be nonempty");
    if (config_.min_objects < 1 || config_.max_objects < config_.min_objects) throw std::invalid_argument("dataset: bad object count range");
    if (config_.min_size <= 0 || config_.max_size < config_.min_size || config_.max_size > static_cast<double>(config_.image_size)) {
      throw std::invalid_argument("dataset: bad object size range");
    }
  }

  const DatasetConfig& config() const { return config_; }
  const CategoryTable& table() const { return table_; }

  std::size_t size(Split split) const {
    switch (split) {
      case Split::train: return config_.n_train;
      case Split::val_base: return config_.n_val_base;
      case Split::val_novel: return config_.n_val_novel;
    }
    return 0;
  }

  DetectionSample sample(Split split, std::size_t index) const {
    if (index >= size(split)) throw std::out_of_range(std::string("dataset: index out of range for ") + split_name(split));
    const std::uint64_t seed = derive_seed(config_.seed, (static_cast<std::uint64_t>(split) << 40) | index);
    Rng rng(seed);
    const auto pool = split == Split::val_novel ? table_.novel_ids() : table_.base_ids();
    const std::size_t count = config_.min_objects + rng.index(config_.max_objects - config_.min_objects + 1);
    std::vector<ObjectSpec> specs;
    for (std::size_t k = 0; k < count; ++k) {
      const Category& cat = table_[pool[rng.index(pool.size())]];
      for (int attempt = 0; attempt < 200; ++attempt) {
        ObjectSpec o{table_.shapes()[cat.shape], table_.colors()[cat.color], 0, 0, 0};
        o.size = std::round(rng.uniform(config_.min_size, config_.max_size));
        o.x0 = std::round(rng.uniform(0.0, static_cast<double>(config_.image_size) - o.size));
        o.y0 = std::round(rng.uniform(0.0, static_cast<double>(config_.image_size) - o.size));
        const bool clash = std::any_of(specs.begin(), specs.end(), [&](const ObjectSpec& p) { return iou(p.box(), o.box()) > config_.max_overlap_iou; });
        if (!clash) {
          specs.push_back(o);
          break;
        }
      }
    }
    return render_sample(specs, table_, rng.next(), config_.image_size, config_.noise_sigma);
  }

  /// Images of the given samples stacked as [B x 3 x H x W].
  static Tensor batch_images(const std::vector<DetectionSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("batch_images: empty batch");
    const auto& f = samples.front();
    std::vector<double> v;
    v.reserve(samples.size() * f.image.size());
    for (const auto& s : samples) v.insert(v.end(), s.image.begin(), s.image.end());
    return Tensor(Shape{samples.size(), f.channels, f.height, f.width}, std::move(v));
  }

 private:
  DatasetConfig config_;
  CategoryTable table_;
};

// ---------------------------------------------------------------------------
// On-disk layout: manifest.json plus <split>/<index>.bin records.
// Record: "CRQS" | u32 version | u32 C | u32 H | u32 W | u32 n_ann |
//         C*H*W f64 pixels (row-major) | n_ann x (4 f64 box corners, u32 category)
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("unexpected end of file");
  return v;
}
}  // namespace detail

inline void write_sample_record(const DetectionSample& s, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("CRQS", 4);
  detail::put<std::uint32_t>(os, kGeneratorVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.channels));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.height));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.width));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.annotations.size()));
  os.write(reinterpret_cast<const char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(double)));
  for (const auto& a : s.annotations) {
    for (double v : {a.box.x0, a.box.y0, a.box.x1, a.box.y1}) detail::put<double>(os, v);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.category));
  }
}

inline DetectionSample read_sample_record(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CRQS", 4) != 0) throw std::runtime_error(path.string() + ": bad record magic");
  if (detail::get<std::uint32_t>(is) != kGeneratorVersion) throw std::runtime_error(path.string() + ": unsupported record version");
  DetectionSample s;
  s.channels = detail::get<std::uint32_t>(is);
  s.height = detail::get<std::uint32_t>(is);
  s.width = detail::get<std::uint32_t>(is);
  const auto n = detail::get<std::uint32_t>(is);
  s.image.resize(s.channels * s.height * s.width);
  if (!is.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(double)))) {
    throw std::runtime_error(path.string() + ": truncated image data");
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    Annotation a;
    a.box.x0 = detail::get<double>(is);
    a.box.y0 = detail::get<double>(is);
    a.box.x1 = detail::get<double>(is);
    a.box.y1 = detail::get<double>(is);
    a.category = detail::get<std::uint32_t>(is);
    s.annotations.push_back(a);
  }
  return s;
}

inline nlohmann::json dataset_manifest(const SyntheticDataset& ds) {
  const auto& c = ds.config();
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& cat : ds.table().categories()) {
    cats.push_back({{"id", cat.id}, {"name", cat.name}, {"shape", ds.table().shapes()[cat.shape]},
                    {"color", ds.table().colors()[cat.color]}, {"split", cat.novel ? "novel" : "base"}});
  }
  nlohmann::json novel = nlohmann::json::array();
  for (const auto& [s, col] : ds.table().novel_pairs()) novel.push_back({s, col});
  return {{"generator_version", kGeneratorVersion},
          {"seed", c.seed},
          {"image_size", c.image_size},
          {"objects", {c.min_objects, c.max_objects}},
          {"object_size", {c.min_size, c.max_size}},
          {"max_overlap_iou", c.max_overlap_iou},
          {"noise_sigma", c.noise_sigma},
          {"shapes", ds.table().shapes()},
          {"colors", ds.table().colors()},
          {"novel_pairs", novel},
          {"categories", cats},
          {"splits", {{"train", c.n_train}, {"val_base", c.n_val_base}, {"val_novel", c.n_val_novel}}}};
}

inline std::filesystem::path record_path(const std::filesystem::path& dir, Split split, std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06zu.bin", index);
  return dir / split_name(split) / name;
}

/// Writes the manifest and every record of every split.
inline void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "manifest.json");
    os << dataset_manifest(ds).dump(2) << '\n';
  }
  for (Split split : {Split::train, Split::val_base, Split::val_novel}) {
    std::filesystem::create_directories(dir / split_name(split));
    for (std::size_t i = 0; i < ds.size(split); ++i) write_sample_record(ds.sample(split, i), record_path(dir, split, i));
  }
}

/// Rebuilds the dataset handle from a manifest (records are not needed to regenerate).
inline SyntheticDataset load_dataset_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("missing " + (dir / "manifest.json").string());
  const auto m = nlohmann::json::parse(is);
  if (m.at("generator_version").get<std::uint32_t>() != kGeneratorVersion) throw std::runtime_error("dataset generator version mismatch");
  DatasetConfig c;
  c.seed = m.at("seed").get<std::uint64_t>();
  c.image_size = m.at("image_size").get<std::size_t>();
  c.min_objects = m.at("objects")[0].get<std::size_t>();
  c.max_objects = m.at("objects")[1].get<std::size_t>();
  c.min_size = m.at("object_size")[0].get<double>();
  c.max_size = m.at("object_size")[1].get<double>();
  c.max_overlap_iou = m.at("max_overlap_iou").get<double>();
  c.noise_sigma = m.at("noise_sigma").get<double>();
  c.n_train = m.at("splits").at("train").get<std::size_t>();
  c.n_val_base = m.at("splits").at("val_base").get<std::size_t>();
  c.n_val_novel = m.at("splits").at("val_novel").get<std::size_t>();
  std::vector<std::pair<std::string, std::string>> novel;
  for (const auto& p : m.at("novel_pairs")) novel.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
  return SyntheticDataset(c, CategoryTable(m.at("shapes").get<std::vector<std::string>>(), m.at("colors").get<std::vector<std::string>>(), novel));
}

}  // namespace crqat
