#pragma once

#include <array>
#include <map>

#include "crqat/data.hpp"
#include "crqat/quant.hpp"

namespace crqat {

// ---------------------------------------------------------------------------
// Text bank
// ---------------------------------------------------------------------------

/// Category rows selected from a text bank, in query (column) order.
struct TextQueries {
  std::vector<std::size_t> ids;
  Tensor embeddings;  // [N x D], unit rows
};

/// Frozen compositional text embeddings: t(shape, color) = normalize(e_shape + e_color).
class TextBank {
 public:
  TextBank(CategoryTable table, std::size_t dim, std::uint64_t seed) : table_(std::move(table)), dim_(dim) {
    if (dim == 0) throw std::invalid_argument("text bank: dimension must be positive");
    Rng rng(seed);
    auto unit = [&] {
      std::vector<double> v(dim);
      double n = 0.0;
      for (double& x : v) {
        x = rng.normal();
        n += x * x;
      }
      n = std::sqrt(n);
      for (double& x : v) x /= n;
      return v;
    };
    std::vector<std::vector<double>> shape_vecs, color_vecs;
    for (std::size_t i = 0; i < table_.shapes().size(); ++i) shape_vecs.push_back(unit());
    for (std::size_t i = 0; i < table_.colors().size(); ++i) color_vecs.push_back(unit());
    std::vector<double> rows;
    for (const auto& cat : table_.categories()) {
      std::vector<double> t(dim);
      double n = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        t[d] = shape_vecs[cat.shape][d] + color_vecs[cat.color][d];
        n += t[d] * t[d];
      }
      n = std::sqrt(n);
      for (double& x : t) x /= n;
      rows.insert(rows.end(), t.begin(), t.end());
    }
    embeddings_ = Tensor(Shape{table_.size(), dim}, std::move(rows));
  }

  const CategoryTable& table() const { return table_; }
  std::size_t dim() const { return dim_; }
  const Tensor& embeddings() const { return embeddings_; }
  std::span<const double> embedding(std::size_t id) const { return embeddings_.values().subspan(id * dim_, dim_); }

  TextQueries queries(const std::vector<std::size_t>& ids) const {
    std::vector<double> rows;
    for (std::size_t id : ids) {
      if (id >= table_.size()) throw std::out_of_range("text bank: unknown category id");
      const auto e = embedding(id);
      rows.insert(rows.end(), e.begin(), e.end());
    }
    return TextQueries{ids, Tensor(Shape{ids.size(), dim_}, std::move(rows))};
  }
  TextQueries base_queries() const { return queries(table_.base_ids()); }
  TextQueries all_queries() const { return queries(table_.all_ids()); }

 private:
  CategoryTable table_;
  std::size_t dim_;
  Tensor embeddings_;
};

inline TextBank make_text_bank(std::vector<std::string> shapes, std::vector<std::string> colors,
                               const std::vector<std::pair<std::string, std::string>>& novel_pairs, std::uint64_t seed,
                               std::size_t dim = 16) {
  return TextBank(CategoryTable(std::move(shapes), std::move(colors), novel_pairs), dim, seed);
}

// ---------------------------------------------------------------------------
// Grid geometry
// ---------------------------------------------------------------------------

struct ScaleGeometry {
  std::size_t stride = 8, height = 8, width = 8, row_offset = 0;
};

/// Row layout of per-cell outputs: scale-major, then (image, y, x).
struct GridLayout {
  std::size_t batch = 0;
  std::size_t image_size = 64;
  std::vector<ScaleGeometry> scales;

  static GridLayout make(std::size_t batch, std::size_t image_size, const std::vector<std::size_t>& strides) {
    GridLayout g{batch, image_size, {}};
    std::size_t offset = 0;
    for (std::size_t s : strides) {
      if (s == 0 || image_size % s != 0) throw std::invalid_argument("grid: stride must divide the image size");
      g.scales.push_back({s, image_size / s, image_size / s, offset});
      offset += batch * (image_size / s) * (image_size / s);
    }
    return g;
  }

  std::size_t rows() const {
    std::size_t n = 0;
    for (const auto& s : scales) n += batch * s.height * s.width;
    return n;
  }
  std::size_t row(std::size_t image, std::size_t scale, std::size_t y, std::size_t x) const {
    const auto& s = scales[scale];
    return s.row_offset + (image * s.height + y) * s.width + x;
  }

  struct Cell {
    std::size_t image, scale, y, x;
    double cx, cy, stride;
  };
  Cell cell(std::size_t row) const {
    for (std::size_t k = scales.size(); k-- > 0;) {
      const auto& s = scales[k];
      if (row >= s.row_offset) {
        const std::size_t local = row - s.row_offset, per_image = s.height * s.width;
        const std::size_t image = local / per_image, y = (local % per_image) / s.width, x = local % s.width;
        const double st = static_cast<double>(s.stride);
        return Cell{image, k, y, x, (static_cast<double>(x) + 0.5) * st, (static_cast<double>(y) + 0.5) * st, st};
      }
    }
    throw std::out_of_range("grid: row out of range");
  }

  bool operator==(const GridLayout& o) const {
    if (batch != o.batch || image_size != o.image_size || scales.size() != o.scales.size()) return false;
    for (std::size_t i = 0; i < scales.size(); ++i)
      if (scales[i].stride != o.scales[i].stride || scales[i].height != o.scales[i].height) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Functional units used by the curriculum. The two-stage partition merges neck and head.
enum class ModuleGroup { backbone = 0, neck = 1, head = 2 };

inline const char* group_name(ModuleGroup g) {
  switch (g) {
    case ModuleGroup::backbone: return "backbone";
    case ModuleGroup::neck: return "neck";
    case ModuleGroup::head: return "head";
  }
  return "?";
}

struct ArchConfig {
  std::array<std::size_t, 4> channels{8, 16, 32, 32};
  /// Whether block i carries a stride-1 refinement conv after its stride-2 conv.
  std::array<bool, 4> refine{false, true, true, false};
  std::size_t neck_channels = 32;
  std::size_t heads = 2;
  std::size_t embed_dim = 16;
  std::size_t image_size = 64;

  void validate() const {
    for (std::size_t c : channels)
      if (c == 0) throw std::invalid_argument("arch: channel widths must be positive");
    if (heads == 0 || neck_channels == 0 || neck_channels % heads != 0) throw std::invalid_argument("arch: neck width must be a positive multiple of the head count");
    if (embed_dim == 0) throw std::invalid_argument("arch: embedding dimension must be positive");
    if (image_size == 0 || image_size % 16 != 0) throw std::invalid_argument("arch: image size must be a positive multiple of 16");
  }
};

/// Bit triple (weight-activation-attention) plus activation granularity.
struct QuantSetting {
  int weight_bits = 4;
  int act_bits = 4;
  int attn_bits = 8;
  bool per_channel_act = false;
  bool learnable = true;
};

/// An optional fake-quant wrapper around one tensor.
struct QuantSlot {
  bool active = false;
  QuantSpec spec;
  QuantParams params;
  std::vector<Tensor>* observer = nullptr;

  Tensor operator()(const Tensor& x) const {
    if (observer) observer->push_back(x.detach());
    return active ? fake_quant(x, params, spec) : x;
  }
};

enum class LayerKind { conv, linear };

struct Layer {
  std::string id;
  LayerKind kind = LayerKind::conv;
  ModuleGroup group = ModuleGroup::backbone;
  bool exempt = false;
  Tensor weight, bias;
  std::size_t stride = 1, pad = 0;
  QuantSlot weight_q, input_q;

  Tensor forward(const Tensor& x) const {
    const Tensor in = input_q(x);
    const Tensor w = weight_q(weight);
    return kind == LayerKind::conv ? conv2d(in, w, bias, stride, pad) : linear(in, w, bias);
  }
};

struct DetectionOutputs {
  std::vector<Tensor> features;  // backbone maps at strides 8 and 16
  Tensor embeddings;             // region embeddings v [rows x D]
  Tensor logits;                 // alpha * cos(v, t) + beta [rows x N]
  Tensor scores;                 // sigmoid(logits)
  Tensor boxes;                  // (l, t, r, b) pixel distances [rows x 4]
  GridLayout grid;
  std::vector<std::size_t> categories;  // category id of each score column
};

/// Trainable tensor with its owner and partition group.
struct ParamRef {
  std::string name;
  Tensor tensor;
  ModuleGroup group;
  bool quant_param = false;
};

class Model {
 public:
  static constexpr std::array<std::size_t, 2> kStrides{8, 16};

  static Model build(const ArchConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    Rng rng(seed);
    const auto& c = config.channels;
    auto conv = [&](std::string id, std::size_t in, std::size_t out, std::size_t k, std::size_t stride, bool exempt) {
      Layer l{std::move(id), LayerKind::conv, ModuleGroup::backbone, exempt, {}, {}, stride, k / 2, {}, {}};
      l.weight = init_weight(rng, Shape{out, in, k, k}, in * k * k, 2.0);
      l.bias = Tensor(Shape{out}, 0.0, true);
      m.layers_.push_back(std::move(l));
    };
    auto lin = [&](std::string id, ModuleGroup g, std::size_t in, std::size_t out, bool exempt, double gain = 2.0) {
      Layer l{std::move(id), LayerKind::linear, g, exempt, {}, {}, 1, 0, {}, {}};
      l.weight = init_weight(rng, Shape{out, in}, in, gain);
      l.bias = Tensor(Shape{out}, 0.0, true);
      m.layers_.push_back(std::move(l));
    };

    conv("b1.conv", 3, c[0], 3, 2, true);
    for (std::size_t b = 1; b < 4; ++b) {
      conv("b" + std::to_string(b + 1) + ".conv", c[b - 1], c[b], 3, 2, false);
      if (config.refine[b]) conv("b" + std::to_string(b + 1) + ".refine", c[b], c[b], 3, 1, false);
    }
    if (config.refine[0]) {
      throw std::invalid_argument("arch: the first block cannot carry a refinement conv");
    }
    const std::size_t C = config.neck_channels, D = config.embed_dim;
    lin("neck.proj_s8", ModuleGroup::neck, c[2], C, false);
    lin("neck.proj_s16", ModuleGroup::neck, c[3], C, false);
    lin("attn.q", ModuleGroup::neck, C, C, false, 1.0);
    lin("attn.k", ModuleGroup::neck, D, C, false, 1.0);
    lin("attn.v", ModuleGroup::neck, D, C, false, 1.0);
    lin("attn.o", ModuleGroup::neck, C, C, false, 0.5);
    lin("neck.mlp", ModuleGroup::neck, C, C, false);
    lin("head.embed_hidden", ModuleGroup::head, C, C, false);
    lin("head.embed_out", ModuleGroup::head, C, D, true, 1.0);
    lin("head.box_hidden", ModuleGroup::head, C, C, false);
    lin("head.box_out", ModuleGroup::head, C, 4, true, 0.1);
    for (double& b : m.layer("head.box_out").bias.values_mut()) b = 1.0;

    m.alpha_ = Tensor::scalar(10.0, true);
    m.beta_ = Tensor::scalar(-5.0, true);
    return m;
  }

  const ArchConfig& config() const { return config_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  Layer& layer(const std::string& id) { return const_cast<Layer&>(std::as_const(*this).layer(id)); }
  const Layer& layer(const std::string& id) const {
    for (const auto& l : layers_)
      if (l.id == id) return l;
    throw std::out_of_range("model: no layer '" + id + "'");
  }
  Tensor& alpha() { return alpha_; }
  Tensor& beta() { return beta_; }
  const Tensor& alpha() const { return alpha_; }
  const Tensor& beta() const { return beta_; }
  QuantSlot& attn_scores_q() { return attn_scores_q_; }
  QuantSlot& attn_probs_q() { return attn_probs_q_; }
  const QuantSlot& attn_scores_q() const { return attn_scores_q_; }
  const QuantSlot& attn_probs_q() const { return attn_probs_q_; }

  /// Every quantizer slot of the model with its owner id and partition group.
  struct SlotRef {
    std::string name;
    QuantSlot* slot;
    ModuleGroup group;
    bool is_weight;
  };
  std::vector<SlotRef> slots() {
    std::vector<SlotRef> out;
    for (auto& l : layers_) {
      if (l.exempt) continue;
      out.push_back({l.id + ".weight_q", &l.weight_q, l.group, true});
      out.push_back({l.id + ".input_q", &l.input_q, l.group, false});
    }
    out.push_back({"attn.scores_q", &attn_scores_q_, ModuleGroup::neck, false});
    out.push_back({"attn.probs_q", &attn_probs_q_, ModuleGroup::neck, false});
    return out;
  }

  /// All trainable tensors, including active learnable quantizer scales.
  std::vector<ParamRef> parameters() const {
    std::vector<ParamRef> out;
    for (const auto& l : layers_) {
      out.push_back({l.id + ".weight", l.weight, l.group, false});
      out.push_back({l.id + ".bias", l.bias, l.group, false});
    }
    out.push_back({"head.alpha", alpha_, ModuleGroup::head, false});
    out.push_back({"head.beta", beta_, ModuleGroup::head, false});
    auto self = const_cast<Model*>(this)->slots();
    for (const auto& s : self) {
      if (s.slot->active && s.slot->spec.learnable && s.slot->params.scale.defined()) {
        out.push_back({s.name + ".scale", s.slot->params.scale, s.group, true});
      }
    }
    return out;
  }

  /// Deep copy: no tensor storage is shared with the original.
  Model clone() const {
    Model m = *this;
    auto copy = [](Tensor& t) {
      if (t.defined()) {
        const bool rg = t.requires_grad();
        t = t.detach();
        t.set_requires_grad(rg);
      }
    };
    for (auto& l : m.layers_) {
      copy(l.weight);
      copy(l.bias);
      copy(l.weight_q.params.scale);
      copy(l.input_q.params.scale);
      l.input_q.observer = l.weight_q.observer = nullptr;
    }
    copy(m.alpha_);
    copy(m.beta_);
    copy(m.attn_scores_q_.params.scale);
    copy(m.attn_probs_q_.params.scale);
    m.attn_scores_q_.observer = m.attn_probs_q_.observer = nullptr;
    return m;
  }

  /// Turns off every quantizer (the full-precision configuration).
  void disable_quant() {
    for (auto& s : slots()) s.slot->active = false;
  }

  DetectionOutputs forward(const Tensor& images, const TextQueries& queries) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.image_size || images.dim(3) != config_.image_size) {
      throw ShapeError("model: expected images [B x 3 x " + std::to_string(config_.image_size) + " x " +
                       std::to_string(config_.image_size) + "], got " + shape_str(images.shape()));
    }
    const Tensor& text = queries.embeddings;
    if (text.rank() != 2 || text.dim(1) != config_.embed_dim) {
      throw ShapeError("model: text bank dimension " + (text.rank() == 2 ? std::to_string(text.dim(1)) : shape_str(text.shape())) +
                       " does not match embedding dimension " + std::to_string(config_.embed_dim));
    }
    const std::size_t B = images.dim(0);
    DetectionOutputs out;
    out.grid = GridLayout::make(B, config_.image_size, {kStrides[0], kStrides[1]});
    out.categories = queries.ids;

    Tensor h = silu(layer("b1.conv").forward(images));
    for (std::size_t b = 2; b <= 4; ++b) {
      h = silu(layer("b" + std::to_string(b) + ".conv").forward(h));
      if (config_.refine[b - 1]) h = silu(layer("b" + std::to_string(b) + ".refine").forward(h));
      if (b >= 3) out.features.push_back(h);
    }

    Tensor cells = concat_rows({silu(layer("neck.proj_s8").forward(nchw_to_rows(out.features[0]))),
                                silu(layer("neck.proj_s16").forward(nchw_to_rows(out.features[1])))});
    const Tensor q = layer("attn.q").forward(cells);
    const Tensor k = layer("attn.k").forward(text);
    const Tensor v = layer("attn.v").forward(text);
    const Tensor attn = attn_probs_q_(softmax_last(attn_scores_q_(attention_scores(q, k, config_.heads))));
    cells = add(cells, layer("attn.o").forward(attention_mix(attn, v)));
    cells = add(cells, silu(layer("neck.mlp").forward(cells)));

    out.embeddings = layer("head.embed_out").forward(silu(layer("head.embed_hidden").forward(cells)));
    const Tensor raw_box = layer("head.box_out").forward(silu(layer("head.box_hidden").forward(cells)));
    std::vector<double> stride_scale(raw_box.size());
    for (std::size_t r = 0; r < out.grid.rows(); ++r) {
      const double st = out.grid.cell(r).stride;
      for (std::size_t j = 0; j < 4; ++j) stride_scale[r * 4 + j] = st;
    }
    out.boxes = mul_const(softplus(raw_box), std::move(stride_scale));

    const Tensor cos = matmul_nt(l2_normalize_rows(out.embeddings), l2_normalize_rows(text));
    out.logits = affine_scalar(cos, alpha_, beta_);
    out.scores = sigmoid(out.logits);
    return out;
  }

 private:
  static Tensor init_weight(Rng& rng, Shape shape, std::size_t fan_in, double gain) {
    const double sd = std::sqrt(gain / static_cast<double>(fan_in));
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = sd * rng.normal();
    return Tensor(std::move(shape), std::move(v), true);
  }

  ArchConfig config_;
  std::vector<Layer> layers_;
  Tensor alpha_, beta_;
  QuantSlot attn_scores_q_, attn_probs_q_;
};

/// Order-independent FNV-1a digest over the raw bytes of the selected parameters.
inline std::uint64_t parameter_checksum(const Model& model, const std::function<bool(const ParamRef&)>& select) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : model.parameters()) {
    if (!select(p)) continue;
    for (char ch : p.name) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ULL;
    for (double v : p.tensor.values()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) h = (h ^ b) * 1099511628211ULL;
    }
  }
  return h;
}

inline std::uint64_t parameter_checksum(const Model& model) {
  return parameter_checksum(model, [](const ParamRef&) { return true; });
}

// ---------------------------------------------------------------------------
// Positive assignment (geometric surrogate for task-aligned assignment)
// ---------------------------------------------------------------------------

struct PositiveRegion {
  std::size_t row = 0, image = 0, gt = 0, category = 0;
  bool operator==(const PositiveRegion&) const = default;
};

/// Positive rows of one (image, category) pair, ascending.
struct RegionGroup {
  std::size_t image = 0, category = 0;
  std::vector<std::size_t> rows;
};

struct Assignment {
  GridLayout grid;
  std::vector<PositiveRegion> positives;  // ascending by row

  std::vector<RegionGroup> groups() const {
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> m;
    for (const auto& p : positives) m[{p.image, p.category}].push_back(p.row);
    std::vector<RegionGroup> out;
    for (auto& [key, rows] : m) {
      std::sort(rows.begin(), rows.end());
      out.push_back({key.first, key.second, std::move(rows)});
    }
    return out;
  }

  /// N_c for one image.
  std::size_t count(std::size_t image, std::size_t category) const {
    return static_cast<std::size_t>(std::count_if(positives.begin(), positives.end(), [&](const PositiveRegion& p) {
      return p.image == image && p.category == category;
    }));
  }

  bool operator==(const Assignment& o) const { return grid == o.grid && positives == o.positives; }
};

/// A cell is positive for a box when its center lies inside the box and within
/// radius_cells * stride of the box center. Overlaps resolve to the smallest box,
/// then the lowest annotation index.
inline Assignment assign_positives(const std::vector<std::vector<Annotation>>& gts, const GridLayout& grid, double radius_cells = 1.5) {
  if (gts.size() != grid.batch) throw std::invalid_argument("assign_positives: annotation batch does not match grid");
  for (const auto& image : gts)
    for (const auto& a : image)
      if (!(a.box.area() > 0)) throw std::invalid_argument("assign_positives: degenerate ground-truth box");
  Assignment out{grid, {}};
  for (std::size_t row = 0; row < grid.rows(); ++row) {
    const auto cell = grid.cell(row);
    const auto& boxes = gts[cell.image];
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const Box& b = boxes[i].box;
      if (cell.cx < b.x0 || cell.cx > b.x1 || cell.cy < b.y0 || cell.cy > b.y1) continue;
      const double dx = cell.cx - b.cx(), dy = cell.cy - b.cy();
      if (std::sqrt(dx * dx + dy * dy) > radius_cells * cell.stride) continue;
      if (!best || b.area() < boxes[*best].box.area()) best = i;
    }
    if (best) out.positives.push_back({row, cell.image, *best, boxes[*best].category});
  }
  return out;
}

/// Ground-truth (l, t, r, b) distances from a cell center to a box.
inline std::array<double, 4> ltrb_target(const GridLayout::Cell& cell, const Box& box) {
  return {cell.cx - box.x0, cell.cy - box.y0, box.x1 - cell.cx, box.y1 - cell.cy};
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct Detection {
  Box box;
  std::size_t category = 0;
  double confidence = 0;
};

inline Box decode_box(const GridLayout::Cell& cell, std::span<const double> ltrb) {
  return Box{cell.cx - ltrb[0], cell.cy - ltrb[1], cell.cx + ltrb[2], cell.cy + ltrb[3]};
}

/// Per image: decode boxes, class-wise greedy NMS by descending confidence, keep the
/// max_detections most confident survivors.
inline std::vector<std::vector<Detection>> decode_and_nms(const DetectionOutputs& out, double score_threshold, double iou_threshold,
                                                          std::size_t max_detections) {
  const std::size_t N = out.categories.size(), rows = out.grid.rows();
  std::vector<std::vector<Detection>> per_image(out.grid.batch);
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> candidates(out.grid.batch * N);  // (row, column)
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t img = out.grid.cell(r).image;
    for (std::size_t j = 0; j < N; ++j)
      if (out.scores[r * N + j] > score_threshold) candidates[img * N + j].emplace_back(r, j);
  }
  for (std::size_t img = 0; img < out.grid.batch; ++img) {
    auto& dets = per_image[img];
    for (std::size_t j = 0; j < N; ++j) {
      auto& cand = candidates[img * N + j];
      std::stable_sort(cand.begin(), cand.end(), [&](const auto& a, const auto& b) {
        return out.scores[a.first * N + a.second] > out.scores[b.first * N + b.second];
      });
      std::vector<Detection> kept;
      for (const auto& [r, col] : cand) {
        const Box box = decode_box(out.grid.cell(r), out.boxes.values().subspan(r * 4, 4));
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& d) { return iou(d.box, box) > iou_threshold; });
        if (!suppressed) kept.push_back(Detection{box, out.categories[col], out.scores[r * N + col]});
      }
      dets.insert(dets.end(), kept.begin(), kept.end());
    }
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    if (dets.size() > max_detections) dets.resize(max_detections);
  }
  return per_image;
}

}  // namespace crqat
