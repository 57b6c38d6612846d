#pragma once

#include <set>

#include "crqat/losses.hpp"

namespace crqat {

enum class KdKind { feature, trkd };

inline const char* kd_name(KdKind k) { return k == KdKind::feature ? "feature_kd" : "trkd"; }

struct KdTerm {
  KdKind kind = KdKind::feature;
  double lambda = 6.0;
  bool operator==(const KdTerm&) const = default;
};

using GroupSet = std::set<ModuleGroup>;

struct StagePlan {
  GroupSet quantized;
  GroupSet trainable;
  std::vector<KdTerm> kd;
  std::size_t iterations = 0;
  double data_fraction = 0.0;
};

struct CurriculumSchedule {
  std::vector<GroupSet> partition;  // M_1..M_K
  std::vector<StagePlan> stages;

  std::size_t stage_count() const { return stages.size(); }

  std::size_t total_iterations() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.iterations;
    return n;
  }

  /// Global iteration index at which stage k (0-based) starts.
  std::size_t stage_offset(std::size_t k) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < k; ++i) n += stages.at(i).iterations;
    return n;
  }

  void validate() const {
    if (stages.empty() || stages.size() != partition.size()) throw std::invalid_argument("schedule: stage count must equal partition size");
    GroupSet seen, prev_quant;
    std::vector<KdTerm> prev_kd;
    double frac = 0.0;
    for (std::size_t k = 0; k < stages.size(); ++k) {
      for (ModuleGroup g : partition[k]) {
        if (!seen.insert(g).second) throw std::invalid_argument("schedule: module group listed in two partitions");
      }
      const auto& st = stages[k];
      if (st.quantized != seen) throw std::invalid_argument("schedule: stage " + std::to_string(k + 1) + " must quantize exactly M_1..M_k");
      if (!std::includes(st.quantized.begin(), st.quantized.end(), prev_quant.begin(), prev_quant.end())) {
        throw std::invalid_argument("schedule: quantization scope must grow monotonically");
      }
      for (const auto& term : prev_kd) {
        if (std::find(st.kd.begin(), st.kd.end(), term) == st.kd.end()) throw std::invalid_argument("schedule: a stage dropped an earlier KD term");
      }
      for (ModuleGroup g : st.trainable) {
        if (!st.quantized.contains(g)) throw std::invalid_argument("schedule: full-precision groups must stay frozen");
      }
      if (st.iterations == 0) throw std::invalid_argument("schedule: every stage needs at least one iteration");
      prev_quant = st.quantized;
      prev_kd = st.kd;
      frac += st.data_fraction;
    }
    if (std::abs(frac - 1.0) > 1e-9) throw std::invalid_argument("schedule: data fractions must sum to 1");
  }
};

namespace detail {
inline CurriculumSchedule build_schedule(std::vector<GroupSet> partition, const std::vector<std::size_t>& iterations,
                                         const std::vector<std::vector<KdTerm>>& kd) {
  CurriculumSchedule s;
  s.partition = std::move(partition);
  const std::size_t total = std::accumulate(iterations.begin(), iterations.end(), std::size_t{0});
  GroupSet scope;
  for (std::size_t k = 0; k < s.partition.size(); ++k) {
    scope.insert(s.partition[k].begin(), s.partition[k].end());
    s.stages.push_back(StagePlan{scope, scope, kd[k], iterations[k], static_cast<double>(iterations[k]) / static_cast<double>(total)});
  }
  s.validate();
  return s;
}
}  // namespace detail

/// Backbone first on floor(total/3) iterations, then neck and head together on the rest.
/// Stage 1 distills features; stage 2 keeps feature KD and adds TRKD.
inline CurriculumSchedule make_two_stage_schedule(std::size_t total, std::vector<double> lambdas = {6.0, 6.0}, bool use_feature_kd = true,
                                                  bool use_trkd = true) {
  if (total < 3) throw std::invalid_argument("two-stage schedule: total iterations must be at least 3");
  if (lambdas.size() != 2) throw std::invalid_argument("two-stage schedule: expects two lambdas");
  std::vector<KdTerm> s1, s2;
  if (use_feature_kd) s1.push_back({KdKind::feature, lambdas[0]});
  s2 = s1;
  if (use_trkd) s2.push_back({KdKind::trkd, lambdas[1]});
  const std::size_t first = total / 3;
  return detail::build_schedule({{ModuleGroup::backbone}, {ModuleGroup::neck, ModuleGroup::head}}, {first, total - first}, {s1, s2});
}

/// Backbone, then neck, then head, each on a third of the iterations. TRKD joins once
/// the neck is quantized.
inline CurriculumSchedule make_three_stage_schedule(std::size_t total, std::vector<double> lambdas = {6.0, 6.0}, bool use_feature_kd = true,
                                                    bool use_trkd = true) {
  if (total < 3) throw std::invalid_argument("three-stage schedule: total iterations must be at least 3");
  if (lambdas.size() != 2) throw std::invalid_argument("three-stage schedule: expects two lambdas");
  std::vector<KdTerm> s1, s2;
  if (use_feature_kd) s1.push_back({KdKind::feature, lambdas[0]});
  s2 = s1;
  if (use_trkd) s2.push_back({KdKind::trkd, lambdas[1]});
  const std::size_t third = total / 3;
  return detail::build_schedule({{ModuleGroup::backbone}, {ModuleGroup::neck}, {ModuleGroup::head}}, {third, third, total - 2 * third},
                                {s1, s2, s2});
}

/// Everything quantized and trained at once (the naive QAT configuration when kd is empty).
inline CurriculumSchedule make_single_stage_schedule(std::size_t total, std::vector<KdTerm> kd = {}) {
  if (total < 1) throw std::invalid_argument("single-stage schedule: total iterations must be positive");
  return detail::build_schedule({{ModuleGroup::backbone, ModuleGroup::neck, ModuleGroup::head}}, {total}, {std::move(kd)});
}

// ---------------------------------------------------------------------------
// Stage activation
// ---------------------------------------------------------------------------

enum class Calibrator { minmax, percentile, mse };

inline const char* calibrator_name(Calibrator c) {
  switch (c) {
    case Calibrator::minmax: return "minmax";
    case Calibrator::percentile: return "percentile";
    case Calibrator::mse: return "mse";
  }
  return "?";
}

inline Calibrator parse_calibrator(const std::string& s) {
  if (s == "minmax") return Calibrator::minmax;
  if (s == "percentile") return Calibrator::percentile;
  if (s == "mse") return Calibrator::mse;
  throw std::invalid_argument("unknown calibrator '" + s + "'");
}

inline QuantParams calibrate(Calibrator c, std::span<const Tensor> batches, const QuantSpec& spec, double percentile = 99.99) {
  switch (c) {
    case Calibrator::minmax: return calibrate_minmax(batches, spec);
    case Calibrator::percentile: return calibrate_percentile(batches, percentile, spec);
    case Calibrator::mse: return calibrate_mse(batches, spec);
  }
  throw std::invalid_argument("calibrate: bad calibrator");
}

/// Quantizer spec each slot receives under a quant setting.
inline QuantSpec slot_spec(const Model::SlotRef& slot, const QuantSetting& q, std::size_t heads) {
  if (slot.is_weight) return weight_spec(q.weight_bits, q.learnable);
  if (slot.name.starts_with("attn.scores_q") || slot.name.starts_with("attn.probs_q")) return attention_spec(q.attn_bits, heads, q.learnable);
  return activation_spec(q.act_bits, q.per_channel_act, 1, q.learnable);
}

struct CalibrationSet {
  Tensor images;  // [n x 3 x H x W]
  TextQueries queries;
  std::size_t chunk = 32;
};

struct QuantizeOptions {
  QuantSetting setting;
  Calibrator weight_calibrator = Calibrator::minmax;
  Calibrator act_calibrator = Calibrator::minmax;
  double percentile = 99.99;
};

namespace detail {
inline Tensor slice_batch(const Tensor& images, std::size_t begin, std::size_t end) {
  const std::size_t per = images.size() / images.dim(0);
  std::vector<double> v(images.values().begin() + static_cast<std::ptrdiff_t>(begin * per),
                        images.values().begin() + static_cast<std::ptrdiff_t>(end * per));
  Shape s = images.shape();
  s[0] = end - begin;
  return Tensor(std::move(s), std::move(v));
}
}  // namespace detail

/// Turns on the quantizers of `groups`: weights from the current weights, activation and
/// attention tensors from observations of the current model on the calibration images.
/// Gradients are disabled throughout. Already active slots are left untouched.
inline void quantize_groups(Model& model, const GroupSet& groups, const CalibrationSet& calib, const QuantizeOptions& opt) {
  NoGradGuard ng;
  auto slots = model.slots();
  std::vector<Model::SlotRef> fresh;
  for (auto& s : slots)
    if (groups.contains(s.group) && !s.slot->active) fresh.push_back(s);

  for (auto& s : fresh) {
    s.slot->spec = slot_spec(s, opt.setting, model.config().heads);
    if (!s.is_weight) continue;
    const Layer& owner = model.layer(s.name.substr(0, s.name.size() - std::string(".weight_q").size()));
    const Tensor w = owner.weight.detach();
    s.slot->params = calibrate(opt.weight_calibrator, std::span<const Tensor>(&w, 1), s.slot->spec, opt.percentile);
    s.slot->active = true;
  }

  std::vector<std::vector<Tensor>> observed(fresh.size());
  for (std::size_t i = 0; i < fresh.size(); ++i)
    if (!fresh[i].is_weight) fresh[i].slot->observer = &observed[i];
  const std::size_t n = calib.images.dim(0);
  if (n == 0) throw std::invalid_argument("quantize_groups: empty calibration set");
  try {
    for (std::size_t b = 0; b < n; b += calib.chunk) model.forward(detail::slice_batch(calib.images, b, std::min(n, b + calib.chunk)), calib.queries);
  } catch (...) {
    for (auto& s : fresh) s.slot->observer = nullptr;
    throw;
  }
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    auto& s = fresh[i];
    if (s.is_weight) continue;
    s.slot->observer = nullptr;
    // The text path sees the same queries on every forward; one observation suffices.
    auto& obs = observed[i];
    s.slot->params = calibrate(opt.act_calibrator, obs, s.slot->spec, opt.percentile);
    s.slot->active = true;
  }
  for (auto& s : fresh) s.slot->params.scale.set_requires_grad(s.slot->spec.learnable);
}

struct StageContext {
  std::size_t stage = 0;  // 1-based
  std::vector<ParamRef> trainable;
  std::vector<KdTerm> kd;
  GroupSet newly_quantized;
};

/// Enters stage k (1-based): quantizers active exactly on M_1..M_k (newly added groups
/// calibrated first), gradients enabled exactly on the stage's trainable groups.
inline StageContext apply_stage(Model& model, const CurriculumSchedule& schedule, std::size_t k, const CalibrationSet& calib,
                                const QuantizeOptions& opt) {
  if (k < 1 || k > schedule.stage_count()) {
    throw std::out_of_range("apply_stage: stage " + std::to_string(k) + " outside 1.." + std::to_string(schedule.stage_count()));
  }
  const StagePlan& plan = schedule.stages[k - 1];
  for (auto& s : model.slots())
    if (!plan.quantized.contains(s.group)) s.slot->active = false;

  StageContext ctx{k, {}, plan.kd, {}};
  for (ModuleGroup g : plan.quantized) {
    const bool any_inactive = std::ranges::any_of(model.slots(), [&](const Model::SlotRef& s) { return s.group == g && !s.slot->active; });
    if (any_inactive) ctx.newly_quantized.insert(g);
  }
  quantize_groups(model, ctx.newly_quantized, calib, opt);

  for (auto& p : model.parameters()) {
    const bool train = plan.trainable.contains(p.group) && (!p.quant_param || opt.setting.learnable);
    p.tensor.set_requires_grad(train);
    p.tensor.zero_grad();
    if (train) ctx.trainable.push_back(p);
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  std::string kind = "sgd";  // sgd | adam
  double base_lr = 1.5e-5;
  double lr_multiplier = 1.0;
  double momentum = 0.9;
  double quant_lr_ratio = 0.1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables

  double lr() const { return base_lr * lr_multiplier; }
  double quant_lr() const { return lr() * quant_lr_ratio; }
};

/// SGD with momentum or Adam over a fixed parameter list. Quantizer scales use the
/// reduced learning rate and are projected onto the positive floor after each step.
class Optimizer {
 public:
  Optimizer(std::vector<ParamRef> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(std::move(cfg)) {
    if (cfg_.kind != "sgd" && cfg_.kind != "adam") throw std::invalid_argument("optimizer: unknown kind '" + cfg_.kind + "'");
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(cfg_.kind == "adam" ? p.tensor.size() : 0, 0.0);
    }
  }

  const std::vector<ParamRef>& params() const { return params_; }
  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++t_;
    double clip = 1.0;
    if (cfg_.grad_clip > 0) {
      double sq = 0.0;
      for (auto& p : params_)
        if (p.tensor.has_grad())
          for (double g : p.tensor.grad()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.tensor.has_grad()) continue;
      const double lr = p.quant_param ? cfg_.quant_lr() : cfg_.lr();
      auto w = p.tensor.values_mut();
      const auto g = p.tensor.grad();
      if (cfg_.kind == "sgd") {
        for (std::size_t j = 0; j < w.size(); ++j) {
          m_[i][j] = cfg_.momentum * m_[i][j] + clip * g[j];
          w[j] -= lr * m_[i][j];
        }
      } else {
        const double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double gj = clip * g[j];
          m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * gj;
          v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * gj * gj;
          w[j] -= lr * (m_[i][j] / b1t) / (std::sqrt(v_[i][j] / b2t) + cfg_.eps);
        }
      }
      if (p.quant_param)
        for (double& s : w) s = std::max(s, kScaleFloor);
    }
  }

  /// Named buffers for checkpointing.
  std::map<std::string, std::vector<double>> state() const {
    std::map<std::string, std::vector<double>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out["m/" + params_[i].name] = m_[i];
      if (!v_[i].empty()) out["v/" + params_[i].name] = v_[i];
    }
    out["step"] = {static_cast<double>(t_)};
    return out;
  }

  void load_state(const std::map<std::string, std::vector<double>>& st) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto take = [&](const std::string& key, std::vector<double>& dst) {
        const auto it = st.find(key);
        if (it == st.end()) return;
        if (it->second.size() != dst.size()) throw std::invalid_argument("optimizer state: size mismatch for " + key);
        dst = it->second;
      };
      take("m/" + params_[i].name, m_[i]);
      take("v/" + params_[i].name, v_[i]);
    }
    if (const auto it = st.find("step"); it != st.end() && !it->second.empty()) t_ = static_cast<std::size_t>(it->second[0]);
  }

 private:
  std::vector<ParamRef> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Data stream
// ---------------------------------------------------------------------------

struct Batch {
  Tensor images;
  std::vector<std::vector<Annotation>> gts;
};

/// Fixed-order mini-batches over one split: `passes` shuffled epochs laid end to end.
/// Batch i is always the same samples, so stages receive disjoint consecutive slices.
class DataStream {
 public:
  DataStream(const SyntheticDataset& dataset, Split split, std::size_t batch_size, std::size_t passes, std::uint64_t order_seed)
      : dataset_(&dataset), split_(split), batch_size_(batch_size) {
    if (batch_size == 0 || passes == 0) throw std::invalid_argument("data stream: batch size and passes must be positive");
    const std::size_t n = dataset.size(split);
    for (std::size_t p = 0; p < passes; ++p) {
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      Rng rng(derive_seed(order_seed, p));
      rng.shuffle(idx);
      order_.insert(order_.end(), idx.begin(), idx.end());
    }
  }

  std::size_t capacity() const { return order_.size() / batch_size_; }
  std::size_t batch_size() const { return batch_size_; }

  Batch batch(std::size_t i) const {
    if (i >= capacity()) throw std::out_of_range("data stream: batch " + std::to_string(i) + " beyond capacity " + std::to_string(capacity()));
    std::vector<DetectionSample> samples;
    Batch b;
    for (std::size_t k = 0; k < batch_size_; ++k) {
      samples.push_back(dataset_->sample(split_, order_[i * batch_size_ + k]));
      b.gts.push_back(samples.back().annotations);
    }
    b.images = SyntheticDataset::batch_images(samples);
    return b;
  }

 private:
  const SyntheticDataset* dataset_;
  Split split_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  OptimizerConfig optimizer;
  QuantizeOptions quant;
  TrkdVariant trkd_variant = TrkdVariant::full;
  double trkd_delta = 1.0;
  double assign_radius = 1.5;
};

struct IterationRecord {
  std::size_t iteration = 0;  // global
  std::size_t stage = 0;      // 1-based
  double total = 0, task = 0, cls = 0, loc = 0;
  std::vector<std::pair<std::string, double>> kd;
  double lr = 0, quant_lr = 0;
};

struct StageReport {
  std::size_t stage = 0;
  std::size_t iterations = 0;
  double mean_loss = 0;
  GroupSet newly_quantized;
};

/// Position inside a curriculum: the stage to run next (0-based) and, when resuming
/// inside that stage, how many of its iterations are done.
struct CurriculumCursor {
  std::size_t stage = 0;
  std::size_t iteration = 0;
  bool stage_entered = false;  // quantizers of `stage` already applied
};

struct CurriculumHooks {
  std::function<void(const IterationRecord&)> on_iteration;
  std::function<void(const StageContext&)> on_stage_begin;
  /// Called after each completed stage with the cursor pointing at the next one.
  std::function<void(const StageReport&, const CurriculumCursor&)> on_stage_end;
};

/// One training step: forward, losses, backward, optimizer update. Throws NumericError
/// on a non-finite loss before any parameter changes.
inline IterationRecord train_step(Model& student, const Model* teacher, const Batch& batch, const TextQueries& queries, const TextBank& bank,
                                  const std::vector<KdTerm>& kd, const TrainConfig& cfg, Optimizer& opt) {
  DetectionOutputs t_out;
  if (!kd.empty()) {
    if (!teacher) throw std::invalid_argument("train_step: distillation requires a teacher");
    NoGradGuard ng;
    t_out = teacher->forward(batch.images, queries);
  }
  const DetectionOutputs out = student.forward(batch.images, queries);
  const Assignment assignment = assign_positives(batch.gts, out.grid, cfg.assign_radius);
  const TaskLoss task = task_loss(out, assignment, batch.gts);
  std::vector<Tensor> kd_values;
  std::vector<double> lambdas;
  IterationRecord rec;
  for (const auto& term : kd) {
    kd_values.push_back(term.kind == KdKind::feature ? feature_kd_loss(out.features, t_out.features)
                                                     : trkd_loss(t_out, out, assignment, bank, cfg.trkd_delta, cfg.trkd_variant));
    lambdas.push_back(term.lambda);
    rec.kd.emplace_back(kd_name(term.kind), kd_values.back().item());
  }
  const Tensor total = combine_losses(task.total, kd_values, lambdas);
  rec.total = total.item();
  rec.task = task.total.item();
  rec.cls = task.cls.item();
  rec.loc = task.loc.item();
  rec.lr = opt.config().lr();
  rec.quant_lr = opt.config().quant_lr();
  if (!std::isfinite(rec.total)) throw NumericError("non-finite loss at iteration " + std::to_string(opt.steps()));
  opt.zero_grad();
  total.backward();
  opt.step();
  return rec;
}

/// Runs stages cursor.stage .. last_stage-1 (0-based, exclusive end) of the schedule.
/// Global iteration i consumes stream batch i, so stage k sees exactly its own slice.
inline std::vector<StageReport> run_curriculum(Model& student, const Model* teacher, const CurriculumSchedule& schedule, const DataStream& stream,
                                               const TextQueries& queries, const TextBank& bank, const CalibrationSet& calib,
                                               const TrainConfig& cfg, const CurriculumHooks& hooks = {}, CurriculumCursor cursor = {},
                                               std::optional<std::size_t> last_stage = std::nullopt,
                                               const std::map<std::string, std::vector<double>>* optimizer_state = nullptr) {
  schedule.validate();
  if (stream.capacity() < schedule.total_iterations()) {
    throw std::invalid_argument("run_curriculum: data stream holds " + std::to_string(stream.capacity()) + " batches, schedule needs " +
                                std::to_string(schedule.total_iterations()));
  }
  const std::size_t end = last_stage.value_or(schedule.stage_count());
  if (end > schedule.stage_count() || cursor.stage > end) throw std::out_of_range("run_curriculum: bad stage range");
  std::vector<StageReport> reports;
  for (std::size_t k = cursor.stage; k < end; ++k) {
    const bool resume_inside = k == cursor.stage && cursor.stage_entered;
    StageContext ctx;
    if (resume_inside) {
      // Quantizers were restored from the checkpoint; only rebuild the trainable set.
      const StagePlan& plan = schedule.stages[k];
      ctx = StageContext{k + 1, {}, plan.kd, {}};
      for (auto& p : student.parameters()) {
        const bool train = plan.trainable.contains(p.group) && (!p.quant_param || cfg.quant.setting.learnable);
        p.tensor.set_requires_grad(train);
        if (train) ctx.trainable.push_back(p);
      }
    } else {
      ctx = apply_stage(student, schedule, k + 1, calib, cfg.quant);
    }
    if (hooks.on_stage_begin) hooks.on_stage_begin(ctx);
    Optimizer opt(ctx.trainable, cfg.optimizer);
    if (resume_inside && optimizer_state) opt.load_state(*optimizer_state);

    const std::size_t start = resume_inside ? cursor.iteration : 0;
    const std::size_t offset = schedule.stage_offset(k);
    StageReport rep{k + 1, schedule.stages[k].iterations, 0.0, ctx.newly_quantized};
    for (std::size_t i = start; i < schedule.stages[k].iterations; ++i) {
      IterationRecord rec = train_step(student, teacher, stream.batch(offset + i), queries, bank, ctx.kd, cfg, opt);
      rec.iteration = offset + i;
      rec.stage = k + 1;
      rep.mean_loss += rec.total;
      if (hooks.on_iteration) hooks.on_iteration(rec);
    }
    rep.mean_loss /= static_cast<double>(std::max<std::size_t>(1, schedule.stages[k].iterations - start));
    reports.push_back(rep);
    if (hooks.on_stage_end) hooks.on_stage_end(rep, CurriculumCursor{k + 1, 0, false});
  }
  return reports;
}

}  // namespace crqat
