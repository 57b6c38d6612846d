#pragma once

#include "crqat/model.hpp"

namespace crqat {

struct TaskLoss {
  Tensor total, cls, loc;
};

/// cls: BCE over every (cell, query) pair, normalized by max(1, positives).
/// loc: mean (1 - IoU) of decoded boxes over positive cells (0 without positives).
inline TaskLoss task_loss(const DetectionOutputs& out, const Assignment& assignment, const std::vector<std::vector<Annotation>>& gts) {
  if (!(assignment.grid == out.grid)) throw std::invalid_argument("task_loss: assignment grid does not match outputs");
  const std::size_t N = out.categories.size();
  std::map<std::size_t, std::size_t> column;
  for (std::size_t j = 0; j < N; ++j) column[out.categories[j]] = j;

  std::vector<double> targets(out.logits.size(), 0.0);
  std::vector<std::size_t> pos_rows;
  std::vector<double> pos_targets;
  for (const auto& p : assignment.positives) {
    const auto it = column.find(p.category);
    if (it != column.end()) targets[p.row * N + it->second] = 1.0;
    pos_rows.push_back(p.row);
    const auto t = ltrb_target(out.grid.cell(p.row), gts.at(p.image).at(p.gt).box);
    pos_targets.insert(pos_targets.end(), t.begin(), t.end());
  }
  const double norm = std::max<double>(1.0, static_cast<double>(pos_rows.size()));
  TaskLoss loss;
  loss.cls = scale(bce_with_logits_sum(out.logits, std::move(targets)), 1.0 / norm);
  if (pos_rows.empty()) {
    loss.loc = Tensor::scalar(0.0);
  } else {
    loss.loc = mean(iou_loss_ltrb(gather_rows(out.boxes, pos_rows), std::move(pos_targets)));
  }
  loss.total = add(loss.cls, loss.loc);
  return loss;
}

/// Per scale and channel, standardize both maps over spatial positions and take
/// the MSE; averaged over channels and scales. Gradients reach only the student.
inline Tensor feature_kd_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher) {
  if (student.size() != teacher.size() || student.empty()) throw ShapeError("feature_kd_loss: scale count mismatch");
  std::vector<Tensor> terms;
  for (std::size_t s = 0; s < student.size(); ++s) {
    if (student[s].shape() != teacher[s].shape()) {
      throw ShapeError("feature_kd_loss: scale " + std::to_string(s) + " shape " + shape_str(student[s].shape()) + " vs " +
                       shape_str(teacher[s].shape()));
    }
    Tensor zt;
    {
      NoGradGuard ng;
      zt = standardize_spatial(teacher[s].detach());
    }
    const Tensor d = sub(standardize_spatial(student[s]), zt);
    terms.push_back(mean(mul(d, d)));
  }
  return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

/// Text-anchored pairwise cosine matrix S = X^ X^T with X = [t; v_1; ...; v_N].
struct RelationalMatrix {
  std::size_t category = 0;
  std::size_t size = 0;  // 1 + N
  std::vector<double> values;
  std::vector<std::size_t> regions;

  double operator()(std::size_t i, std::size_t j) const { return values[i * size + j]; }
};

/// Differentiable S for a constant anchor row and region rows [N x D].
inline Tensor relational_matrix(std::span<const double> anchor, const Tensor& regions) {
  if (regions.rank() != 2 || regions.dim(1) != anchor.size()) throw ShapeError("relational_matrix: region/anchor dimension mismatch");
  if (regions.dim(0) == 0) throw std::invalid_argument("relational_matrix: no regions for this text");
  const Tensor t(Shape{1, anchor.size()}, std::vector<double>(anchor.begin(), anchor.end()));
  const Tensor x = l2_normalize_rows(concat_rows({t, regions}));
  return matmul_nt(x, x);
}

inline RelationalMatrix build_relational_matrix(std::span<const double> text, const Tensor& regions, std::size_t category = 0,
                                                std::vector<std::size_t> region_ids = {}) {
  NoGradGuard ng;
  const Tensor s = relational_matrix(text, regions.detach());
  return RelationalMatrix{category, s.dim(0), s.vec(), std::move(region_ids)};
}

enum class TrkdVariant { full, region_text, region_region };

inline const char* trkd_variant_name(TrkdVariant v) {
  switch (v) {
    case TrkdVariant::full: return "full";
    case TrkdVariant::region_text: return "region-text";
    case TrkdVariant::region_region: return "region-region";
  }
  return "?";
}

/// Averaging weights over the entries of a (1+N)x(1+N) matrix that a variant distills.
inline std::vector<double> trkd_entry_weights(std::size_t n_regions, TrkdVariant variant) {
  const std::size_t m = n_regions + 1;
  std::vector<double> w(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const bool anchor_entry = (i == 0) != (j == 0);
      const bool interior = i > 0 && j > 0;
      switch (variant) {
        case TrkdVariant::full: w[i * m + j] = 1.0 / static_cast<double>(m * m); break;
        case TrkdVariant::region_text: w[i * m + j] = anchor_entry ? 1.0 / static_cast<double>(2 * n_regions) : 0.0; break;
        case TrkdVariant::region_region: w[i * m + j] = interior ? 1.0 / static_cast<double>(n_regions * n_regions) : 0.0; break;
      }
    }
  return w;
}

/// Smooth-L1 distance between student and teacher relational matrices, averaged
/// over entries per text, then over the texts of each image, then over images.
/// Texts without assigned regions are skipped; the teacher and the text anchors
/// receive no gradient.
inline Tensor trkd_loss(const DetectionOutputs& teacher, const DetectionOutputs& student, const Assignment& assignment,
                        const TextBank& bank, double delta = 1.0, TrkdVariant variant = TrkdVariant::full) {
  if (!(teacher.grid == student.grid) || !(assignment.grid == student.grid)) {
    throw std::invalid_argument("trkd_loss: teacher, student and assignment must share one grid");
  }
  if (teacher.embeddings.shape() != student.embeddings.shape()) throw ShapeError("trkd_loss: embedding shape mismatch");
  if (student.embeddings.dim(1) != bank.dim()) throw ShapeError("trkd_loss: text bank dimension mismatch");

  std::map<std::size_t, std::vector<Tensor>> per_image;
  for (const auto& g : assignment.groups()) {
    const auto anchor = bank.embedding(g.category);
    Tensor target;
    {
      NoGradGuard ng;
      target = relational_matrix(anchor, gather_rows(teacher.embeddings.detach(), g.rows));
    }
    const Tensor s = relational_matrix(anchor, gather_rows(student.embeddings, g.rows));
    per_image[g.image].push_back(weighted_sum(smooth_l1(s, target, delta), trkd_entry_weights(g.rows.size(), variant)));
  }
  if (per_image.empty()) return Tensor::scalar(0.0);
  std::vector<Tensor> image_terms;
  for (auto& [img, terms] : per_image) image_terms.push_back(scale(add_n(terms), 1.0 / static_cast<double>(terms.size())));
  return scale(add_n(image_terms), 1.0 / static_cast<double>(image_terms.size()));
}

/// task + sum_i lambda_i * kd_i.
inline Tensor combine_losses(const Tensor& task, const std::vector<Tensor>& kd_values, const std::vector<double>& lambdas) {
  if (kd_values.size() != lambdas.size()) throw std::invalid_argument("combine_losses: kd/lambda length mismatch");
  std::vector<Tensor> terms{task};
  for (std::size_t i = 0; i < kd_values.size(); ++i) terms.push_back(scale(kd_values[i], lambdas[i]));
  return add_n(terms);
}

/// Stage-k objective: the task loss plus the k module-wise distillation terms.
inline Tensor stage_loss(std::size_t k, const Tensor& task, const std::vector<Tensor>& kd_values, const std::vector<double>& lambdas) {
  if (kd_values.size() != lambdas.size()) throw std::invalid_argument("stage_loss: kd/lambda length mismatch");
  if (kd_values.size() != k) throw std::invalid_argument("stage_loss: stage " + std::to_string(k) + " expects " + std::to_string(k) + " kd terms");
  return combine_losses(task, kd_values, lambdas);
}

inline double stage_loss(std::size_t k, double task, const std::vector<double>& kd_values, const std::vector<double>& lambdas) {
  std::vector<Tensor> kd;
  for (double v : kd_values) kd.push_back(Tensor::scalar(v));
  return stage_loss(k, Tensor::scalar(task), kd, lambdas).item();
}

}  // namespace crqat
