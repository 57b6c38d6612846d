#pragma once

#include <optional>

#include "crqat/model.hpp"

namespace crqat {

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Per category: greedy matching by descending confidence (one detection per gt,
/// best unmatched IoU at or above the threshold), 101-point interpolated PR area.
/// Returns the mean over categories present in the ground truth.
inline double average_precision(const std::vector<std::vector<Detection>>& detections, const std::vector<std::vector<Annotation>>& gts,
                                double iou_threshold = 0.5, std::map<std::size_t, double>* per_category = nullptr) {
  if (detections.size() != gts.size()) throw std::invalid_argument("average_precision: detection/ground-truth image count mismatch");
  std::set<std::size_t> categories;
  for (const auto& img : gts)
    for (const auto& a : img) categories.insert(a.category);
  if (categories.empty()) return 0.0;

  double total = 0.0;
  for (std::size_t c : categories) {
    struct Cand {
      double conf;
      std::size_t image, index;
    };
    std::vector<Cand> cands;
    std::size_t n_gt = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& a : gts[i]) n_gt += a.category == c;
      for (std::size_t d = 0; d < detections[i].size(); ++d)
        if (detections[i][d].category == c) cands.push_back({detections[i][d].confidence, i, d});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.conf > b.conf; });

    std::vector<std::vector<bool>> matched(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) matched[i].assign(gts[i].size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const auto& cand : cands) {
      const Box& box = detections[cand.image][cand.index].box;
      double best = iou_threshold;
      std::optional<std::size_t> hit;
      for (std::size_t g = 0; g < gts[cand.image].size(); ++g) {
        const auto& a = gts[cand.image][g];
        if (a.category != c || matched[cand.image][g]) continue;
        const double o = iou(box, a.box);
        if (o >= best) {
          best = o;
          hit = g;
        }
      }
      if (hit) {
        matched[cand.image][*hit] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    // Make precision monotone non-increasing from the right, then sample 101 recall levels.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0;
    for (int k = 0; k <= 100; ++k) {
      const double r = k / 100.0;
      const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
      if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    ap /= 101.0;
    if (per_category) (*per_category)[c] = ap;
    total += ap;
  }
  return total / static_cast<double>(categories.size());
}

/// AP averaged over IoU thresholds 0.50:0.05:0.95.
inline double average_precision_coco(const std::vector<std::vector<Detection>>& detections, const std::vector<std::vector<Annotation>>& gts) {
  double acc = 0.0;
  for (int k = 0; k < 10; ++k) acc += average_precision(detections, gts, 0.5 + 0.05 * k);
  return acc / 10.0;
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// Pearson correlation; no value when either sequence is constant.
inline std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("pearson: need two equal-length sequences of length >= 2");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Fractional ranks (ties share their average rank), 1-based.
inline std::vector<double> fractional_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("spearman: need two equal-length sequences of length >= 2");
  const auto rx = fractional_ranks(xs), ry = fractional_ranks(ys);
  return pearson(rx, ry);
}

// ---------------------------------------------------------------------------
// Distortion diagnostics
// ---------------------------------------------------------------------------

namespace detail {
inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double d = std::sqrt(aa) * std::sqrt(bb);
  return d > 0 ? ab / d : 0.0;
}

/// Off-diagonal upper-triangle pairwise cosines among the given rows of a [R x C] matrix.
inline std::vector<double> pairwise_cosines(const Tensor& m, const std::vector<std::size_t>& rows) {
  const std::size_t C = m.dim(1);
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      out.push_back(cosine(m.values().subspan(rows[i] * C, C), m.values().subspan(rows[j] * C, C)));
  return out;
}

inline void require_comparable(const DetectionOutputs& model, const DetectionOutputs& reference, const Assignment& assignment) {
  if (!(model.grid == reference.grid) || !(assignment.grid == model.grid)) throw std::invalid_argument("distortion: outputs and assignment must share one grid");
  if (model.embeddings.shape() != reference.embeddings.shape() || model.scores.shape() != reference.scores.shape()) {
    throw ShapeError("distortion: output shapes differ");
  }
}
}  // namespace detail

struct AlignmentResult {
  double mae = 0.0;
  std::size_t pairs = 0;
  bool no_positives = false;
};

/// Mean over (positive region, its text) of |sim_model(v, t) - sim_ref(v, t)|.
inline AlignmentResult alignment_mae(const DetectionOutputs& model, const DetectionOutputs& reference, const Assignment& assignment,
                                     const TextBank& bank) {
  detail::require_comparable(model, reference, assignment);
  const std::size_t D = model.embeddings.dim(1);
  AlignmentResult r;
  for (const auto& p : assignment.positives) {
    const auto t = bank.embedding(p.category);
    const double a = detail::cosine(model.embeddings.values().subspan(p.row * D, D), t);
    const double b = detail::cosine(reference.embeddings.values().subspan(p.row * D, D), t);
    r.mae += std::abs(a - b);
    ++r.pairs;
  }
  if (r.pairs == 0) {
    r.no_positives = true;
    return r;
  }
  r.mae /= static_cast<double>(r.pairs);
  return r;
}

/// Distortion of one (image, category) group of positive regions.
struct GroupDistortion {
  std::size_t image = 0, category = 0, regions = 0;
  double embedding_mae = 0.0;
  std::optional<double> embedding_pearson;
  double confidence_mae = 0.0;
};

namespace detail {
template <typename Fn>
void for_each_group(const Assignment& assignment, std::size_t min_regions, Fn&& fn) {
  if (min_regions < 2) throw std::invalid_argument("distortion: min_regions must be at least 2");
  for (const auto& g : assignment.groups())
    if (g.rows.size() >= min_regions) fn(g);
}

inline double mean_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}
}  // namespace detail

/// Region-region cosine matrices of model vs reference: off-diagonal MAE and Pearson r.
inline std::vector<GroupDistortion> relational_mae_and_pearson(const DetectionOutputs& model, const DetectionOutputs& reference,
                                                               const Assignment& assignment, std::size_t min_regions = 10) {
  detail::require_comparable(model, reference, assignment);
  std::vector<GroupDistortion> out;
  detail::for_each_group(assignment, min_regions, [&](const RegionGroup& g) {
    const auto a = detail::pairwise_cosines(model.embeddings, g.rows);
    const auto b = detail::pairwise_cosines(reference.embeddings, g.rows);
    GroupDistortion d{g.image, g.category, g.rows.size(), detail::mean_abs_diff(a, b), std::nullopt, 0.0};
    if (a.size() >= 2) d.embedding_pearson = pearson(a, b);
    out.push_back(d);
  });
  return out;
}

/// Same construction over each region's full confidence vector (scores across all queries).
inline std::vector<GroupDistortion> confidence_relational_mae(const DetectionOutputs& model, const DetectionOutputs& reference,
                                                              const Assignment& assignment, std::size_t min_regions = 10) {
  detail::require_comparable(model, reference, assignment);
  std::vector<GroupDistortion> out;
  detail::for_each_group(assignment, min_regions, [&](const RegionGroup& g) {
    const auto a = detail::pairwise_cosines(model.scores, g.rows);
    const auto b = detail::pairwise_cosines(reference.scores, g.rows);
    out.push_back(GroupDistortion{g.image, g.category, g.rows.size(), 0.0, std::nullopt, detail::mean_abs_diff(a, b)});
  });
  return out;
}

struct DistortionReport {
  double alignment_mae = 0.0;
  double relational_mae = 0.0;
  double relational_pearson = 1.0;
  double confidence_relational_mae = 0.0;
  /// Spearman rho between per-group embedding and confidence relational MAE.
  std::optional<double> embedding_confidence_spearman;
  std::size_t groups = 0;
  bool no_positives = false;
  std::vector<GroupDistortion> per_group;
};

/// Accumulates distortion statistics over batches of one evaluation set.
class DistortionAccumulator {
 public:
  explicit DistortionAccumulator(std::size_t min_regions) : min_regions_(min_regions) {}

  void add(const DetectionOutputs& model, const DetectionOutputs& reference, const Assignment& assignment, const TextBank& bank,
           std::size_t image_offset) {
    const auto al = alignment_mae(model, reference, assignment, bank);
    align_sum_ += al.mae * static_cast<double>(al.pairs);
    align_pairs_ += al.pairs;
    auto emb = relational_mae_and_pearson(model, reference, assignment, min_regions_);
    const auto conf = confidence_relational_mae(model, reference, assignment, min_regions_);
    for (std::size_t i = 0; i < emb.size(); ++i) {
      emb[i].image += image_offset;
      emb[i].confidence_mae = conf[i].confidence_mae;
      groups_.push_back(emb[i]);
    }
  }

  DistortionReport report() const {
    DistortionReport r;
    r.no_positives = align_pairs_ == 0;
    r.alignment_mae = align_pairs_ ? align_sum_ / static_cast<double>(align_pairs_) : 0.0;
    r.groups = groups_.size();
    r.per_group = groups_;
    if (!groups_.empty()) {
      double mae = 0, conf = 0, pr = 0;
      std::size_t n_r = 0;
      std::vector<double> xs, ys;
      for (const auto& g : groups_) {
        mae += g.embedding_mae;
        conf += g.confidence_mae;
        if (g.embedding_pearson) {
          pr += *g.embedding_pearson;
          ++n_r;
        }
        xs.push_back(g.embedding_mae);
        ys.push_back(g.confidence_mae);
      }
      r.relational_mae = mae / static_cast<double>(groups_.size());
      r.confidence_relational_mae = conf / static_cast<double>(groups_.size());
      r.relational_pearson = n_r ? pr / static_cast<double>(n_r) : 1.0;
      if (xs.size() >= 2) r.embedding_confidence_spearman = spearman(xs, ys);
    }
    return r;
  }

 private:
  std::size_t min_regions_;
  double align_sum_ = 0.0;
  std::size_t align_pairs_ = 0;
  std::vector<GroupDistortion> groups_;
};

/// Mean post-sigmoid confidence of each category's positive regions against its own text.
inline std::map<std::size_t, double> mean_positive_confidence(const DetectionOutputs& out, const Assignment& assignment) {
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  const std::size_t N = out.categories.size();
  for (const auto& p : assignment.positives) {
    const auto it = std::find(out.categories.begin(), out.categories.end(), p.category);
    if (it == out.categories.end()) continue;
    auto& [s, n] = acc[p.category];
    s += out.scores[p.row * N + static_cast<std::size_t>(it - out.categories.begin())];
    ++n;
  }
  std::map<std::size_t, double> out_map;
  for (const auto& [c, sn] : acc) out_map[c] = sn.first / static_cast<double>(sn.second);
  return out_map;
}

}  // namespace crqat
