#pragma once

#include <chrono>
#include <iomanip>
#include <sstream>

#include "crqat/checkpoint.hpp"
#include "crqat/config.hpp"
#include "crqat/metrics.hpp"

namespace crqat {

class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A QAT-family method: curriculum depth and which distillation terms it uses.
struct MethodSpec {
  std::string name;
  std::size_t stages = 1;
  bool feature_kd = false;
  bool trkd = false;
  TrkdVariant variant = TrkdVariant::full;
};

inline const std::vector<MethodSpec>& qat_methods() {
  static const std::vector<MethodSpec> methods{
      {"qat", 1, false, false, TrkdVariant::full},
      {"cqat", 2, false, false, TrkdVariant::full},
      {"kd-only", 1, true, true, TrkdVariant::full},
      {"cr-qat", 2, true, true, TrkdVariant::full},
      {"cr-qat-no-trkd", 2, true, false, TrkdVariant::full},
      {"cr-qat-region-text", 2, true, true, TrkdVariant::region_text},
      {"cr-qat-region-region", 2, true, true, TrkdVariant::region_region},
      {"cr-qat-3stage", 3, true, true, TrkdVariant::full},
  };
  return methods;
}

inline const MethodSpec& find_method(const std::string& name) {
  for (const auto& m : qat_methods())
    if (m.name == name) return m;
  throw ConfigError("unknown method '" + name + "'");
}

inline CurriculumSchedule make_schedule(const MethodSpec& m, std::size_t total, double lambda_feature, double lambda_trkd) {
  switch (m.stages) {
    case 1: {
      std::vector<KdTerm> kd;
      if (m.feature_kd) kd.push_back({KdKind::feature, lambda_feature});
      if (m.trkd) kd.push_back({KdKind::trkd, lambda_trkd});
      return make_single_stage_schedule(total, kd);
    }
    case 2: return make_two_stage_schedule(total, {lambda_feature, lambda_trkd}, m.feature_kd, m.trkd);
    case 3: return make_three_stage_schedule(total, {lambda_feature, lambda_trkd}, m.feature_kd, m.trkd);
  }
  throw ConfigError("method " + m.name + ": unsupported stage count");
}

/// "4-4-8 Ch-T-H": bit triple and granularity triple (weights, activations, attention).
inline std::string setting_label(const QuantSetting& q) {
  return std::to_string(q.weight_bits) + "-" + std::to_string(q.act_bits) + "-" + std::to_string(q.attn_bits) + " Ch-" +
         (q.per_channel_act ? "Ch" : "T") + "-H";
}

struct EvalResult {
  double ap50_base = 0, ap50_novel = 0;
  std::optional<double> ap_coco_base, ap_coco_novel;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingPrerequisite("cannot read " + path.string());
  return nlohmann::json::parse(is);
}

/// Wall-clock time of a run, kept apart from the deterministic outputs.
class RunTimer {
 public:
  explicit RunTimer(std::filesystem::path dir) : dir_(std::move(dir)), start_(std::chrono::steady_clock::now()) {}
  void write() const {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_json({{"wall_seconds", secs}}, dir_ / "timing.json");
  }

 private:
  std::filesystem::path dir_;
  std::chrono::steady_clock::time_point start_;
};

inline nlohmann::json distortion_to_json(const DistortionReport& r) {
  nlohmann::json j{{"alignment_mae", r.alignment_mae},
                   {"relational_mae", r.relational_mae},
                   {"relational_pearson", r.relational_pearson},
                   {"confidence_relational_mae", r.confidence_relational_mae},
                   {"groups", r.groups},
                   {"no_positives", r.no_positives}};
  j["embedding_confidence_spearman"] = r.embedding_confidence_spearman ? nlohmann::json(*r.embedding_confidence_spearman) : nlohmann::json(nullptr);
  return j;
}

struct RunControl {
  std::optional<std::size_t> stop_after_stage;  // 1-based; run only stages 1..n
  bool resume = false;                          // continue from the latest stage checkpoint
  std::string run_name;                         // defaults to the method name
};

/// Deterministic runs over one dataset, laid out as
///   <out>/seed-<s>/<run>/{model.ckpt, stage-<k>.ckpt, metrics.jsonl, report.json, groups.jsonl, timing.json}.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, std::filesystem::path out)
      : cfg_(std::move(cfg)),
        out_(std::move(out)),
        dataset_(cfg_.data, cfg_.category_table()),
        bank_(cfg_.category_table(), cfg_.arch.embed_dim, cfg_.text_seed) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const SyntheticDataset& dataset() const { return dataset_; }
  const TextBank& bank() const { return bank_; }
  const std::filesystem::path& out() const { return out_; }

  std::filesystem::path run_dir(std::uint64_t seed, const std::string& run) const { return out_ / ("seed-" + std::to_string(seed)) / run; }

  void generate_data() const { save_dataset(dataset_, out_ / "data"); }

  /// Digest of the keys a teacher depends on.
  std::uint64_t teacher_digest() const {
    auto j = config_to_json(cfg_);
    nlohmann::json sub = nlohmann::json::object();
    for (auto& [k, v] : j.items())
      if (k.starts_with("data.") || k.starts_with("model.") || k.starts_with("teacher.")) sub[k] = v;
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : sub.dump()) h = (h ^ ch) * 1099511628211ULL;
    return h;
  }

  // -------------------------------------------------------------------------
  // Teacher
  // -------------------------------------------------------------------------

  nlohmann::json train_teacher(std::uint64_t seed) const {
    const auto dir = run_dir(seed, "teacher");
    std::filesystem::create_directories(dir);
    const RunTimer timer(dir);
    Model model = Model::build(cfg_.arch, derive_seed(seed, 1));
    const std::size_t passes = (cfg_.teacher_iterations * cfg_.teacher_batch + dataset_.size(Split::train) - 1) / dataset_.size(Split::train);
    DataStream stream(dataset_, Split::train, cfg_.teacher_batch, passes, derive_seed(seed, 2));
    OptimizerConfig oc;
    oc.kind = "adam";
    oc.base_lr = cfg_.teacher_lr;
    oc.grad_clip = cfg_.teacher_grad_clip;
    Optimizer opt(model.parameters(), oc);
    TrainConfig tc = train_config();
    const auto queries = bank_.base_queries();
    MetricsLog log(dir / "metrics.jsonl", false);
    CurveTracker curve;
    for (std::size_t i = 0; i < cfg_.teacher_iterations; ++i) {
      IterationRecord rec = train_step(model, nullptr, stream.batch(i), queries, bank_, {}, tc, opt);
      rec.iteration = i;
      rec.stage = 1;
      log.write(rec);
      curve.add(rec);
    }
    save_checkpoint(model, {}, dir / "model.ckpt");
    nlohmann::json report{{"run", "teacher"},
                          {"method", "fp32"},
                          {"seed", seed},
                          {"teacher_digest", hex64(teacher_digest())},
                          {"config_digest", hex64(config_digest(cfg_))}};
    add_eval(report, evaluate(model));
    report["stages"] = nlohmann::json::array({{{"stage", 1}, {"iterations", cfg_.teacher_iterations}, {"mean_loss", curve.mean(1)}}});
    report["loss_curve"] = curve.to_json();
    write_json(report, dir / "report.json");
    timer.write();
    return report;
  }

  bool teacher_ready(std::uint64_t seed) const {
    const auto dir = run_dir(seed, "teacher");
    if (!std::filesystem::exists(dir / "report.json") || !std::filesystem::exists(dir / "model.ckpt")) return false;
    return read_json(dir / "report.json").value("teacher_digest", "") == hex64(teacher_digest());
  }

  Model load_teacher(std::uint64_t seed) const {
    const auto dir = run_dir(seed, "teacher");
    if (!std::filesystem::exists(dir / "model.ckpt")) {
      throw MissingPrerequisite("missing teacher checkpoint " + (dir / "model.ckpt").string() + "; run train-teacher --seed " + std::to_string(seed) + " first");
    }
    if (!teacher_ready(seed)) {
      throw MissingPrerequisite("teacher in " + dir.string() + " was trained with a different data/model/teacher config; rerun train-teacher");
    }
    Model m = Model::build(cfg_.arch, 0);
    load_checkpoint(m, dir / "model.ckpt");
    freeze(m);
    return m;
  }

  nlohmann::json ensure_teacher(std::uint64_t seed) const {
    if (teacher_ready(seed)) return read_json(run_dir(seed, "teacher") / "report.json");
    return train_teacher(seed);
  }

  // -------------------------------------------------------------------------
  // Post-training quantization
  // -------------------------------------------------------------------------

  static std::string ptq_run_name(Calibrator c) { return std::string("ptq-") + calibrator_name(c); }

  nlohmann::json run_ptq(std::uint64_t seed, Calibrator calibrator) const {
    const Model teacher = load_teacher(seed);
    const std::string name = ptq_run_name(calibrator);
    const auto dir = run_dir(seed, name);
    std::filesystem::create_directories(dir);
    const RunTimer timer(dir);
    Model student = teacher.clone();
    QuantizeOptions qo = quantize_options();
    qo.setting.learnable = false;
    qo.weight_calibrator = qo.act_calibrator = calibrator;
    quantize_groups(student, {ModuleGroup::backbone, ModuleGroup::neck, ModuleGroup::head}, calibration_set(), qo);
    save_checkpoint(student, {}, dir / "model.ckpt");
    std::ofstream(dir / "metrics.jsonl", std::ios::trunc).flush();
    nlohmann::json report = base_report(name, "ptq-" + std::string(calibrator_name(calibrator)), seed);
    add_eval(report, evaluate(student));
    add_distortion(report, student, teacher, dir);
    write_json(report, dir / "report.json");
    timer.write();
    return report;
  }

  // -------------------------------------------------------------------------
  // Quantization-aware training
  // -------------------------------------------------------------------------

  using RunControl = crqat::RunControl;

  nlohmann::json run_qat(std::uint64_t seed, const MethodSpec& method, const RunControl& control = {}) const {
    const Model teacher = load_teacher(seed);
    const std::string name = control.run_name.empty() ? method.name : control.run_name;
    const auto dir = run_dir(seed, name);
    std::filesystem::create_directories(dir);
    const CurriculumSchedule schedule = make_schedule(method, cfg_.qat_iterations, cfg_.lambda_feature, cfg_.lambda_trkd);
    const std::size_t n_train = dataset_.size(Split::train);
    const std::size_t passes = (cfg_.qat_iterations * cfg_.qat_batch + n_train - 1) / n_train;
    const DataStream stream(dataset_, Split::train, cfg_.qat_batch, passes, derive_seed(seed, 3));

    Model student = teacher.clone();
    CurriculumCursor cursor;
    std::map<std::string, std::vector<double>> opt_state;
    std::vector<nlohmann::json> stage_log;
    if (control.resume) {
      std::optional<std::size_t> latest;
      for (std::size_t k = schedule.stage_count(); k >= 1; --k)
        if (std::filesystem::exists(dir / ("stage-" + std::to_string(k) + ".ckpt"))) {
          latest = k;
          break;
        }
      if (!latest) throw MissingPrerequisite("nothing to resume in " + dir.string() + ": no stage checkpoint found");
      const auto st = load_checkpoint(student, dir / ("stage-" + std::to_string(*latest) + ".ckpt"));
      cursor = st.cursor;
      opt_state = st.optimizer;
      if (std::filesystem::exists(dir / "stages.json")) {
        for (const auto& s : read_json(dir / "stages.json")) stage_log.push_back(s);
        stage_log.resize(std::min(stage_log.size(), cursor.stage));
      }
    } else {
      for (const auto& entry : std::filesystem::directory_iterator(dir)) std::filesystem::remove_all(entry.path());
    }
    const RunTimer timer(dir);

    CurveTracker curve;
    if (control.resume) curve.replay(dir / "metrics.jsonl");
    MetricsLog log(dir / "metrics.jsonl", control.resume);
    CurriculumHooks hooks;
    hooks.on_iteration = [&](const IterationRecord& r) {
      log.write(r);
      curve.add(r);
    };
    hooks.on_stage_end = [&](const StageReport& rep, const CurriculumCursor& next) {
      nlohmann::json groups = nlohmann::json::array();
      for (ModuleGroup g : schedule.stages[rep.stage - 1].quantized) groups.push_back(group_name(g));
      stage_log.push_back({{"stage", rep.stage}, {"iterations", rep.iterations}, {"mean_loss", rep.mean_loss}, {"quantized", groups}});
      save_checkpoint(student, CheckpointState{next, {}}, dir / ("stage-" + std::to_string(rep.stage) + ".ckpt"));
      write_json(stage_log, dir / "stages.json");
    };
    const std::optional<std::size_t> last = control.stop_after_stage;
    if (last && (*last < 1 || *last > schedule.stage_count())) throw ConfigError("stop-after-stage outside the schedule");

    TrainConfig tc = train_config();
    tc.trkd_variant = method.variant;
    const auto queries = bank_.base_queries();
    run_curriculum(student, &teacher, schedule, stream, queries, bank_, calibration_set(), tc, hooks, cursor, last,
                   opt_state.empty() ? nullptr : &opt_state);

    if (last && *last < schedule.stage_count()) {
      return nlohmann::json{{"run", name}, {"partial", true}, {"completed_stages", *last}};
    }
    save_checkpoint(student, CheckpointState{CurriculumCursor{schedule.stage_count(), 0, false}, {}}, dir / "model.ckpt");
    freeze(student);
    nlohmann::json report = base_report(name, method.name, seed);
    report["schedule"] = {{"stages", method.stages}, {"feature_kd", method.feature_kd}, {"trkd", method.trkd},
                          {"trkd_variant", trkd_variant_name(method.variant)}, {"iterations", cfg_.qat_iterations}};
    add_eval(report, evaluate(student));
    add_distortion(report, student, teacher, dir);
    report["stages"] = stage_log;
    report["loss_curve"] = curve.to_json();
    write_json(report, dir / "report.json");
    if (!control.resume) timer.write();
    return report;
  }

  /// Reuses a finished run whose report carries the current config digest.
  std::optional<nlohmann::json> cached_report(std::uint64_t seed, const std::string& run) const {
    const auto dir = run_dir(seed, run);
    if (!std::filesystem::exists(dir / "report.json") || !std::filesystem::exists(dir / "model.ckpt")) return std::nullopt;
    auto j = read_json(dir / "report.json");
    if (j.value("config_digest", "") != hex64(config_digest(cfg_))) return std::nullopt;
    return j;
  }

  nlohmann::json ensure_qat(std::uint64_t seed, const MethodSpec& method) const {
    if (auto j = cached_report(seed, method.name)) return *j;
    return run_qat(seed, method);
  }

  nlohmann::json ensure_ptq(std::uint64_t seed, Calibrator c) const {
    if (auto j = cached_report(seed, ptq_run_name(c))) return *j;
    return run_ptq(seed, c);
  }

  Model load_run(std::uint64_t seed, const std::string& run) const {
    const auto path = run_dir(seed, run) / "model.ckpt";
    if (!std::filesystem::exists(path)) throw MissingPrerequisite("missing checkpoint " + path.string() + "; run '" + run + "' first");
    Model m = Model::build(cfg_.arch, 0);
    load_checkpoint(m, path);
    freeze(m);
    return m;
  }

  // -------------------------------------------------------------------------
  // Evaluation and diagnostics
  // -------------------------------------------------------------------------

  /// AP@0.5 on both validation splits, scoring against every category's text.
  EvalResult evaluate(const Model& model) const {
    EvalResult r;
    const auto queries = bank_.all_queries();
    for (Split split : {Split::val_base, Split::val_novel}) {
      std::vector<std::vector<Detection>> dets;
      std::vector<std::vector<Annotation>> gts;
      for_each_batch(split, dataset_.size(split), [&](const Batch& b) {
        NoGradGuard ng;
        const auto out = model.forward(b.images, queries);
        auto d = decode_and_nms(out, cfg_.score_threshold, cfg_.nms_iou, cfg_.max_detections);
        dets.insert(dets.end(), d.begin(), d.end());
        gts.insert(gts.end(), b.gts.begin(), b.gts.end());
      });
      const double ap = average_precision(dets, gts, 0.5);
      const std::optional<double> coco = cfg_.coco_ap ? std::optional<double>(average_precision_coco(dets, gts)) : std::nullopt;
      if (split == Split::val_base) {
        r.ap50_base = ap;
        r.ap_coco_base = coco;
      } else {
        r.ap50_novel = ap;
        r.ap_coco_novel = coco;
      }
    }
    return r;
  }

  /// Distortion of `model` against `reference` on val-base positives (all category texts).
  DistortionReport diagnose(const Model& model, const Model& reference) const {
    DistortionAccumulator acc(cfg_.min_regions);
    const auto queries = bank_.all_queries();
    std::size_t offset = 0;
    for_each_batch(Split::val_base, dataset_.size(Split::val_base), [&](const Batch& b) {
      NoGradGuard ng;
      const auto m = model.forward(b.images, queries);
      const auto r = reference.forward(b.images, queries);
      acc.add(m, r, assign_positives(b.gts, m.grid, cfg_.assign_radius), bank_, offset);
      offset += b.gts.size();
    });
    return acc.report();
  }

  /// Mean post-sigmoid confidence of positive regions per category on one split.
  std::map<std::size_t, double> positive_confidence(const Model& model, Split split) const {
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    const auto queries = bank_.all_queries();
    for_each_batch(split, dataset_.size(split), [&](const Batch& b) {
      NoGradGuard ng;
      const auto out = model.forward(b.images, queries);
      const auto assignment = assign_positives(b.gts, out.grid, cfg_.assign_radius);
      std::map<std::size_t, std::size_t> counts;
      for (const auto& p : assignment.positives) ++counts[p.category];
      for (const auto& [c, mean] : mean_positive_confidence(out, assignment)) {
        acc[c].first += mean * static_cast<double>(counts[c]);
        acc[c].second += counts[c];
      }
    });
    std::map<std::size_t, double> out;
    for (const auto& [c, sn] : acc) out[c] = sn.first / static_cast<double>(sn.second);
    return out;
  }

  CalibrationSet calibration_set() const {
    std::vector<DetectionSample> samples;
    for (std::size_t i = 0; i < cfg_.calib_samples; ++i) samples.push_back(dataset_.sample(Split::val_base, i));
    return CalibrationSet{SyntheticDataset::batch_images(samples), bank_.base_queries(), 32};
  }

  QuantizeOptions quantize_options() const {
    QuantizeOptions qo;
    qo.setting = cfg_.quant;
    qo.weight_calibrator = Calibrator::minmax;
    qo.act_calibrator = parse_calibrator(cfg_.act_init);
    qo.percentile = cfg_.percentile;
    return qo;
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.optimizer.kind = "sgd";
    tc.optimizer.lr_multiplier = cfg_.lr_multiplier;
    tc.optimizer.momentum = cfg_.momentum;
    tc.optimizer.quant_lr_ratio = cfg_.quant_lr_ratio;
    tc.optimizer.grad_clip = cfg_.qat_grad_clip;
    tc.quant = quantize_options();
    tc.trkd_delta = cfg_.trkd_delta;
    tc.assign_radius = cfg_.assign_radius;
    return tc;
  }

 private:
  /// Append-only line-delimited iteration records.
  class MetricsLog {
   public:
    MetricsLog(const std::filesystem::path& path, bool append) : os_(path, append ? std::ios::app : std::ios::trunc) {
      if (!os_) throw std::runtime_error("cannot open " + path.string());
    }
    void write(const IterationRecord& r) {
      nlohmann::json loss{{"total", r.total}, {"task", r.task}, {"cls", r.cls}, {"loc", r.loc}};
      for (const auto& [k, v] : r.kd) loss[k] = v;
      os_ << nlohmann::json{{"iteration", r.iteration}, {"stage", r.stage}, {"loss", loss}, {"lr", r.lr}, {"quant_lr", r.quant_lr}}.dump() << '\n';
    }

   private:
    std::ofstream os_;
  };

  /// Loss curve downsampled to windows of 10 iterations, plus per-stage means.
  class CurveTracker {
   public:
    void add(const IterationRecord& r) {
      window_ += r.total;
      if (++count_ == 10) {
        points_.push_back({{"iteration", r.iteration}, {"stage", r.stage}, {"loss", window_ / 10.0}});
        window_ = 0;
        count_ = 0;
      }
      auto& [s, n] = stage_[r.stage];
      s += r.total;
      ++n;
    }
    void replay(const std::filesystem::path& metrics) {
      std::ifstream is(metrics);
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        IterationRecord r;
        r.iteration = j.at("iteration").get<std::size_t>();
        r.stage = j.at("stage").get<std::size_t>();
        r.total = j.at("loss").at("total").get<double>();
        add(r);
      }
    }
    double mean(std::size_t stage) const {
      const auto it = stage_.find(stage);
      return it == stage_.end() ? 0.0 : it->second.first / static_cast<double>(it->second.second);
    }
    nlohmann::json to_json() const { return points_; }

   private:
    double window_ = 0;
    std::size_t count_ = 0;
    nlohmann::json points_ = nlohmann::json::array();
    std::map<std::size_t, std::pair<double, std::size_t>> stage_;
  };

  static void freeze(Model& m) {
    for (auto& p : m.parameters()) p.tensor.set_requires_grad(false);
  }

  template <typename Fn>
  void for_each_batch(Split split, std::size_t n, Fn&& fn) const {
    for (std::size_t b = 0; b < n; b += cfg_.eval_batch) {
      std::vector<DetectionSample> samples;
      Batch batch;
      for (std::size_t i = b; i < std::min(n, b + cfg_.eval_batch); ++i) {
        samples.push_back(dataset_.sample(split, i));
        batch.gts.push_back(samples.back().annotations);
      }
      batch.images = SyntheticDataset::batch_images(samples);
      fn(batch);
    }
  }

  nlohmann::json base_report(const std::string& run, const std::string& method, std::uint64_t seed) const {
    return {{"run", run},
            {"method", method},
            {"seed", seed},
            {"quant_setting", setting_label(cfg_.quant)},
            {"config_digest", hex64(config_digest(cfg_))}};
  }

  static void add_eval(nlohmann::json& report, const EvalResult& e) {
    report["ap50"] = {{"val_base", e.ap50_base}, {"val_novel", e.ap50_novel}};
    if (e.ap_coco_base) report["ap50_95"] = {{"val_base", *e.ap_coco_base}, {"val_novel", *e.ap_coco_novel}};
  }

  void add_distortion(nlohmann::json& report, const Model& model, const Model& teacher, const std::filesystem::path& dir) const {
    const DistortionReport d = diagnose(model, teacher);
    report["distortion"] = distortion_to_json(d);
    std::ofstream os(dir / "groups.jsonl", std::ios::trunc);
    for (const auto& g : d.per_group) {
      os << nlohmann::json{{"image", g.image},
                           {"category", g.category},
                           {"regions", g.regions},
                           {"embedding_mae", g.embedding_mae},
                           {"embedding_pearson", g.embedding_pearson ? nlohmann::json(*g.embedding_pearson) : nlohmann::json(nullptr)},
                           {"confidence_mae", g.confidence_mae}}
                .dump()
         << '\n';
    }
  }

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  SyntheticDataset dataset_;
  TextBank bank_;
};

}  // namespace crqat
