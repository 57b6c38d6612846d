#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "crqat/crqat.hpp"

using namespace crqat;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Gate {
 public:
  void report(const std::string& id, bool pass, const std::string& detail) {
    std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", id.c_str(), detail.c_str());
    std::fflush(stdout);
    failures_ += pass ? 0 : 1;
  }
  int failures() const { return failures_; }

 private:
  int failures_ = 0;
};

Tensor random_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * d);
  for (double& x : v) x = rng.normal();
  return Tensor(Shape{n, d}, std::move(v));
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

DetectionOutputs embedding_outputs(const Tensor& embeddings) {
  DetectionOutputs out;
  out.grid = GridLayout::make(1, 64, {8, 16});
  out.embeddings = embeddings;
  return out;
}

Assignment rows_for(const GridLayout& grid, const std::vector<std::pair<std::size_t, std::size_t>>& row_category) {
  Assignment a{grid, {}};
  for (const auto& [row, cat] : row_category) a.positives.push_back({row, 0, 0, cat});
  return a;
}

struct QuantCase {
  QuantSpec spec;
  double s;
  std::int32_t z;
};

std::vector<QuantCase> quant_cases() {
  std::vector<QuantCase> out;
  for (int bits : {2, 3, 4})
    for (double s : {0.25, 0.5, 1.0, 2.0})
      for (bool is_signed : {true, false})
        for (bool symmetric : {true, false}) {
          QuantSpec spec{bits, is_signed, symmetric, Granularity::per_tensor, 0, 0, false};
          if (symmetric) {
            out.push_back({spec, s, 0});
            continue;
          }
          for (std::int32_t z = spec.qmin(); z <= spec.qmax(); ++z) out.push_back({spec, s, z});
        }
  return out;
}

// Dyadic grid over [lo, hi]; every point is exact in binary floating point.
std::vector<double> dyadic_grid(double lo, double hi, double step) {
  std::vector<double> g;
  for (double x = lo; x <= hi; x += step) g.push_back(x);
  return g;
}

// ---------------------------------------------------------------------------

void criterion_quantizer(Gate& gate) {
  const auto t0 = Clock::now();
  std::size_t configs = 0, roundtrip_bad = 0, monotone_bad = 0, bound_bad = 0, points = 0;
  for (const auto& c : quant_cases()) {
    ++configs;
    const auto p = QuantParams::make({c.s}, {c.z}, false);
    const double l = c.spec.qmin(), u = c.spec.qmax();
    std::vector<double> codes;
    for (std::int32_t q = c.spec.qmin(); q <= c.spec.qmax(); ++q) codes.push_back((q - c.z) * c.s);
    const Tensor levels(Shape{codes.size()}, codes);
    const auto back = fake_quant(levels, p, c.spec);
    for (std::size_t i = 0; i < codes.size(); ++i) {
      if (back[i] != codes[i]) ++roundtrip_bad;
      if (quantize(codes[i], c.s, c.z, c.spec) != c.spec.qmin() + static_cast<std::int32_t>(i)) ++roundtrip_bad;
    }
    const auto grid = dyadic_grid((l - c.z - 3) * c.s, (u - c.z + 3) * c.s, c.s / 64);
    const auto fq = fake_quant(Tensor(Shape{grid.size()}, grid), p, c.spec);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      ++points;
      if (i && fq[i] < fq[i - 1]) ++monotone_bad;
      const bool inside = grid[i] >= (l - c.z) * c.s && grid[i] <= (u - c.z) * c.s;
      if (inside && std::abs(grid[i] - fq[i]) > c.s / 2) ++bound_bad;
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = roundtrip_bad == 0 && monotone_bad == 0 && bound_bad == 0 && secs < 10;
  gate.report("1 quantizer oracles", pass,
              fmt("%zu configs, %zu grid points; round-trip violations %zu, monotonicity violations %zu, |x-fq(x)|>s/2 violations %zu; %.2fs (limit 10s)",
                  configs, points, roundtrip_bad, monotone_bad, bound_bad, secs));
}

void criterion_gradients(Gate& gate) {
  const auto t0 = Clock::now();

  // STE mask: gradient is exactly 1 strictly inside (l, u) and exactly 0 elsewhere.
  std::size_t mask_points = 0, mask_bad = 0;
  for (const auto& c : quant_cases()) {
    if (!c.spec.symmetric && c.z != c.spec.qmin() && c.z != 0) continue;
    const double l = c.spec.qmin(), u = c.spec.qmax();
    const auto grid = dyadic_grid((l - c.z - 2) * c.s, (u - c.z + 2) * c.s, c.s / 8);
    Tensor x(Shape{grid.size()}, grid, true);
    sum(fake_quant(x, QuantParams::make({c.s}, {c.z}, false), c.spec)).backward();
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const double v = grid[i] / c.s + c.z;
      const double expect = (v > l && v < u) ? 1.0 : 0.0;
      ++mask_points;
      if (x.grad()[i] != expect) ++mask_bad;
    }
  }

  // Learnable scale: central differences of the composed quantize-dequantize output at
  // rounding-stable points. Interior points differ from the analytic value by the
  // identity-path term x/s that the straight-through rule adds; clipped points agree directly.
  Rng rng(2024);
  std::size_t lsq_interior = 0, lsq_clipped = 0;
  double lsq_worst = 0;
  for (int bits : {2, 3, 4})
    for (bool is_signed : {true, false}) {
      const QuantSpec spec{bits, is_signed, true, Granularity::per_tensor, 0, 0, true};
      const double l = spec.qmin(), u = spec.qmax();
      for (int trial = 0; trial < 400; ++trial) {
        const double s = rng.uniform(0.2, 2.0);
        const double x = rng.uniform((l - 4) * s, (u + 4) * s);
        const double v = x / s;
        const double frac = v - std::floor(v);
        if (std::abs(frac - 0.5) < 0.05 || std::abs(v - l) < 0.05 || std::abs(v - u) < 0.05) continue;
        const double h = 1e-6 * s;
        auto fq = [&](double sc) { return dequantize(quantize(x, sc, 0, spec), sc, 0); };
        const double fd = (fq(s + h) - fq(s - h)) / (2 * h);
        const bool clipped = v <= l || v >= u;
        const double expected = clipped ? fd : fd - v;
        const double analytic = learnable_scale_grad(x, s, spec);
        lsq_worst = std::max(lsq_worst, std::abs(analytic - expected) / std::max(1.0, std::abs(expected)));
        (clipped ? lsq_clipped : lsq_interior)++;
      }
    }

  // TRKD: random embeddings, two texts, both Smooth-L1 regimes.
  const TextBank bank(default_category_table(), 16, 3);
  const auto T = embedding_outputs(random_rows(80, 16, 12));
  const auto a = rows_for(T.grid, {{3, 1}, {4, 1}, {5, 1}, {40, 6}, {41, 6}});
  double trkd_worst = 0;
  for (double delta : {1.0, 0.05})
    for (std::uint64_t seed : {13, 14})
      trkd_worst = std::max(trkd_worst, grad_check([&](const Tensor& e) { return trkd_loss(T, embedding_outputs(e), a, bank, delta); }, random_rows(80, 16, seed), 1e-6));

  // Task loss through the full forward pass, classification and box branches.
  const SyntheticDataset ds(DatasetConfig{}, default_category_table());
  std::vector<DetectionSample> samples{ds.sample(Split::train, 0)};
  const std::vector<std::vector<Annotation>> gts{samples[0].annotations};
  const Tensor images = SyntheticDataset::batch_images(samples);
  Model m = Model::build(ArchConfig{}, 4);
  const auto q = bank.base_queries();
  const auto asg = assign_positives(gts, GridLayout::make(1, 64, {8, 16}));
  double task_worst = 0;
  for (const char* layer : {"head.embed_out", "head.box_out"}) {
    task_worst = std::max(task_worst, grad_check(
                                          [&](const Tensor& w) {
                                            m.layer(layer).weight = w;
                                            return task_loss(m.forward(images, q), asg, gts).total;
                                          },
                                          m.layer(layer).weight.detach(), 1e-5));
  }
  const double secs = seconds_since(t0);
  const bool pass = mask_bad == 0 && lsq_interior >= 100 && lsq_clipped >= 20 && lsq_worst < 1e-4 && trkd_worst < 1e-3 && task_worst < 1e-3 && secs < 60;
  gate.report("2 gradient suite", pass,
              fmt("STE mask %zu/%zu exact; LSQ scale grad worst rel err %.2e over %zu interior + %zu clipped points (tol 1e-4); TRKD grad worst %.2e, "
                  "task-loss grad worst %.2e (tol 1e-3); %.1fs (limit 60s)",
                  mask_points - mask_bad, mask_points, lsq_worst, lsq_interior, lsq_clipped, trkd_worst, task_worst, secs));
}

void criterion_trkd(Gate& gate) {
  double oracle_worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 12;
    const Tensor t = random_rows(1, 16, 5000 + trial);
    const Tensor regions = random_rows(n, 16, 6000 + trial);
    const auto s = build_relational_matrix(t.values(), regions);
    std::vector<std::span<const double>> rows{t.values()};
    for (std::size_t r = 0; r < n; ++r) rows.push_back(regions.values().subspan(r * 16, 16));
    for (std::size_t i = 0; i <= n; ++i)
      for (std::size_t j = 0; j <= n; ++j) oracle_worst = std::max(oracle_worst, std::abs(s(i, j) - cosine(rows[i], rows[j])));
  }

  const TextBank bank(default_category_table(), 16, 3);
  const auto same = embedding_outputs(random_rows(80, 16, 5));
  const double identical = trkd_loss(same, same, rows_for(same.grid, {{3, 0}, {4, 0}, {9, 2}, {30, 2}, {31, 2}}), bank).item();

  // Text A with one region, text B with nine: per-text averaging weighs the two texts equally.
  const auto T = embedding_outputs(random_rows(80, 16, 6)), S = embedding_outputs(random_rows(80, 16, 7));
  std::vector<std::pair<std::size_t, std::size_t>> rc{{0, 0}};
  for (std::size_t r = 20; r < 29; ++r) rc.emplace_back(r, 2);
  const double l1 = trkd_loss(T, S, rows_for(T.grid, {rc.front()}), bank).item();
  const double l9 = trkd_loss(T, S, rows_for(T.grid, std::vector(rc.begin() + 1, rc.end())), bank).item();
  const double both = trkd_loss(T, S, rows_for(T.grid, rc), bank).item();
  const double per_text = 0.5 * (l1 + l9), flat = (4 * l1 + 100 * l9) / 104.0;
  const bool pass = oracle_worst <= 1e-9 && identical == 0.0 && std::abs(both - per_text) <= 1e-12 && std::abs(both - flat) > 1e-3;
  gate.report("3 TRKD correctness", pass,
              fmt("relational matrix vs brute-force cosine worst %.1e over 100 cases (tol 1e-9); identical embeddings loss %.1e; "
                  "N=1/N=9 case %.6f vs per-text %.6f (flat average would give %.6f)",
                  oracle_worst, identical, both, per_text, flat));
}

struct Toy {
  SyntheticDataset ds{[] {
                        DatasetConfig c;
                        c.n_train = 24;
                        c.n_val_base = 8;
                        c.n_val_novel = 4;
                        return c;
                      }(),
                      default_category_table()};
  TextBank bank{default_category_table(), 16, 1};
  Model teacher = Model::build(ArchConfig{}, 1);
  CalibrationSet calib;
  TrainConfig cfg;

  Toy() {
    std::vector<DetectionSample> s;
    for (std::size_t i = 0; i < 4; ++i) s.push_back(ds.sample(Split::val_base, i));
    calib = CalibrationSet{SyntheticDataset::batch_images(s), bank.base_queries(), 2};
    cfg.optimizer.lr_multiplier = 100;
    cfg.optimizer.grad_clip = 5;
  }
  DataStream stream() const { return DataStream(ds, Split::train, 2, 1, 9); }
};

void criterion_curriculum(Gate& gate, const std::filesystem::path& scratch) {
  Toy toy;
  const auto q = toy.bank.base_queries();

  // Stage 1 never touches neck or head.
  const auto two = make_two_stage_schedule(6);
  Model m = toy.teacher.clone();
  auto m2 = [](const Model& x) { return parameter_checksum(x, [](const ParamRef& p) { return p.group != ModuleGroup::backbone; }); };
  const auto before = m2(m);
  run_curriculum(m, &toy.teacher, two, toy.stream(), q, toy.bank, toy.calib, toy.cfg, {}, {}, 1);
  const bool frozen = m2(m) == before;

  // Active quantizers only ever grow across stages.
  bool monotone = true;
  for (const auto& sched : {two, make_three_stage_schedule(9)}) {
    Model x = toy.teacher.clone();
    std::set<std::string> prev;
    for (std::size_t k = 1; k <= sched.stage_count(); ++k) {
      apply_stage(x, sched, k, toy.calib, toy.cfg.quant);
      std::set<std::string> active;
      for (const auto& s : x.slots())
        if (s.slot->active) active.insert(s.name);
      monotone = monotone && std::includes(active.begin(), active.end(), prev.begin(), prev.end()) && active.size() > prev.size();
      prev = active;
    }
  }

  // Resume at the stage boundary through a checkpoint file.
  Model full = toy.teacher.clone();
  run_curriculum(full, &toy.teacher, two, toy.stream(), q, toy.bank, toy.calib, toy.cfg);
  Model first = toy.teacher.clone();
  CurriculumHooks hooks;
  hooks.on_stage_end = [&](const StageReport&, const CurriculumCursor& next) { save_checkpoint(first, CheckpointState{next, {}}, scratch / "stage-1.ckpt"); };
  run_curriculum(first, &toy.teacher, two, toy.stream(), q, toy.bank, toy.calib, toy.cfg, hooks, {}, 1);
  Model resumed = Model::build(ArchConfig{}, 999);
  const auto st = load_checkpoint(resumed, scratch / "stage-1.ckpt");
  run_curriculum(resumed, &toy.teacher, two, toy.stream(), q, toy.bank, toy.calib, toy.cfg, {}, st.cursor);
  const bool boundary_equal = parameter_checksum(resumed) == parameter_checksum(full);

  // Resume inside stage 2 with optimizer momentum restored.
  Model part = toy.teacher.clone();
  run_curriculum(part, &toy.teacher, two, toy.stream(), q, toy.bank, toy.calib, toy.cfg, {}, {}, 1);
  const auto ctx = apply_stage(part, two, 2, toy.calib, toy.cfg.quant);
  Optimizer opt(ctx.trainable, toy.cfg.optimizer);
  const DataStream stream = toy.stream();
  for (std::size_t i = 0; i < 2; ++i) train_step(part, &toy.teacher, stream.batch(two.stage_offset(1) + i), q, toy.bank, ctx.kd, toy.cfg, opt);
  save_checkpoint(part, CheckpointState{CurriculumCursor{1, 2, true}, opt.state()}, scratch / "mid.ckpt");
  Model mid = Model::build(ArchConfig{}, 998);
  const auto ms = load_checkpoint(mid, scratch / "mid.ckpt");
  run_curriculum(mid, &toy.teacher, two, stream, q, toy.bank, toy.calib, toy.cfg, {}, ms.cursor, std::nullopt, &ms.optimizer);
  const bool mid_equal = parameter_checksum(mid) == parameter_checksum(full);

  gate.report("4 curriculum contract", frozen && monotone && boundary_equal && mid_equal,
              fmt("stage-1 neck/head checksum unchanged: %s; quantization scope strictly growing: %s; resume from stage-1 checkpoint bit-equal: %s; "
                  "resume inside stage 2 with optimizer state bit-equal: %s",
                  frozen ? "yes" : "no", monotone ? "yes" : "no", boundary_equal ? "yes" : "no", mid_equal ? "yes" : "no"));
}

// ---------------------------------------------------------------------------

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double stddev(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + fmt("%.3f", x);
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double wall_seconds(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "timing.json")) return -1;
  return read_json(dir / "timing.json").at("wall_seconds").get<double>();
}

void end_to_end(Gate& gate, const std::filesystem::path& out) {
  const ExperimentConfig cfg;
  const Experiment exp(cfg, out);
  const std::vector<std::uint64_t> seeds = cfg.seeds;
  const std::vector<std::string> methods{"qat", "cqat", "kd-only", "cr-qat", "cr-qat-no-trkd", "cr-qat-region-text", "cr-qat-region-region"};

  std::map<std::string, std::vector<double>> novel, base;
  for (std::uint64_t seed : seeds) {
    const auto t = exp.ensure_teacher(seed);
    base["teacher"].push_back(t["ap50"]["val_base"]);
    novel["teacher"].push_back(t["ap50"]["val_novel"]);
    for (Calibrator c : {Calibrator::minmax, Calibrator::percentile, Calibrator::mse}) {
      const auto r = exp.ensure_ptq(seed, c);
      base[Experiment::ptq_run_name(c)].push_back(r["ap50"]["val_base"]);
      novel[Experiment::ptq_run_name(c)].push_back(r["ap50"]["val_novel"]);
    }
    for (const auto& name : methods) {
      std::printf("# seed %llu %s\n", static_cast<unsigned long long>(seed), name.c_str());
      std::fflush(stdout);
      const auto r = exp.ensure_qat(seed, find_method(name));
      base[name].push_back(r["ap50"]["val_base"]);
      novel[name].push_back(r["ap50"]["val_novel"]);
    }
  }
  for (const auto& [name, v] : novel) std::printf("# %-22s val-base AP50 [%s] mean %.4f | val-novel AP50 [%s] mean %.4f\n", name.c_str(), join(base[name]).c_str(), mean(base[name]), join(v).c_str(), mean(v));

  // a. Teacher.
  bool a = true;
  for (std::size_t i = 0; i < seeds.size(); ++i) a = a && base["teacher"][i] >= 0.80 && novel["teacher"][i] >= 0.40;
  gate.report("5a teacher AP", a, fmt("val-base AP50 per seed [%s] (>= 0.80), val-novel AP50 [%s] (>= 0.40)", join(base["teacher"]).c_str(), join(novel["teacher"]).c_str()));

  // b. PTQ collapse on both splits, every calibrator and seed.
  bool b = true;
  double worst_ratio = 0;
  for (const char* c : {"ptq-minmax", "ptq-percentile", "ptq-mse"})
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (auto* split : {&base, &novel}) {
        const double ratio = (*split)[c][i] / (*split)["teacher"][i];
        worst_ratio = std::max(worst_ratio, ratio);
        b = b && ratio <= 0.2;
      }
  gate.report("5b PTQ 4-4-8 collapse", b,
              fmt("worst PTQ/teacher AP50 ratio %.3f (limit 0.2); mean val-base AP50 minmax %.3f, percentile %.3f, mse %.3f vs teacher %.3f", worst_ratio,
                  mean(base["ptq-minmax"]), mean(base["ptq-percentile"]), mean(base["ptq-mse"]), mean(base["teacher"])));

  // c. Novel ordering against the best calibrator.
  const double ptq_best = std::max({mean(novel["ptq-minmax"]), mean(novel["ptq-percentile"]), mean(novel["ptq-mse"])});
  const double qat = mean(novel["qat"]), cr = mean(novel["cr-qat"]);
  std::vector<double> diff;
  for (std::size_t i = 0; i < seeds.size(); ++i) diff.push_back(novel["cr-qat"][i] - novel["qat"][i]);
  gate.report("5c val-novel ordering", ptq_best < qat && qat < cr && cr - qat >= 0.02,
              fmt("best PTQ %.4f < QAT %.4f < CR-QAT %.4f; CR-QAT - QAT = %+.4f (need >= +0.02); per-seed differences [%s], sd %.4f", ptq_best, qat, cr, cr - qat,
                  join(diff).c_str(), stddev(diff)));

  // d. Table-3 structure.
  const double cq = mean(novel["cqat"]), kd = mean(novel["kd-only"]);
  gate.report("5d curriculum x KD ablation", cr > std::max(cq, kd) && std::max(cq, kd) >= qat,
              fmt("val-novel AP50: curriculum+KD %.4f > max(curriculum only %.4f, KD only %.4f) >= baseline %.4f", cr, cq, kd, qat));

  // e. Table-4 structure.
  const double no = mean(novel["cr-qat-no-trkd"]), rt = mean(novel["cr-qat-region-text"]), rr = mean(novel["cr-qat-region-region"]);
  gate.report("5e TRKD variants", cr >= rt && cr >= rr,
              fmt("val-novel AP50: full TRKD %.4f >= region-text %.4f and region-region %.4f (w/o TRKD %.4f)", cr, rt, rr, no));

  // 6. Distortion diagnostics.
  const auto analysis = analyze(exp, seeds);
  const auto& dm = analysis["distortion_means"];
  const double qa = dm["qat"]["alignment_mae"], ca = dm["cr-qat"]["alignment_mae"];
  const double qr = dm["qat"]["relational_mae"], crr = dm["cr-qat"]["relational_mae"];
  const auto& rho_j = analysis["embedding_confidence_spearman"];
  const double rho = rho_j.is_null() ? std::nan("") : rho_j.get<double>();
  gate.report("6 distortion diagnostics", ca < qa && crr < qr && rho > 0.3,
              fmt("alignment MAE CR-QAT %.5f < QAT %.5f; relational MAE CR-QAT %.5f < QAT %.5f; Spearman rho embedding vs confidence distortion %.3f over %zu groups (need > 0.3)",
                  ca, qa, crr, qr, rho, analysis["spearman_groups"].get<std::size_t>()));

  // 7. Determinism: repeat seed-0 runs in a fresh directory and compare bytes.
  const auto again_dir = out / "repeat";
  std::filesystem::remove_all(again_dir);
  const Experiment again(cfg, again_dir);
  const std::uint64_t seed = seeds.front();
  again.train_teacher(seed);
  again.run_ptq(seed, Calibrator::minmax);
  again.run_qat(seed, find_method("cr-qat"));
  std::vector<std::string> differing;
  std::size_t compared = 0;
  for (const std::string run : {"teacher", "ptq-minmax", "cr-qat"})
    for (const char* f : {"model.ckpt", "metrics.jsonl", "report.json", "groups.jsonl", "stages.json"}) {
      const auto p1 = exp.run_dir(seed, run) / f, p2 = again.run_dir(seed, run) / f;
      if (!std::filesystem::exists(p1) && !std::filesystem::exists(p2)) continue;
      ++compared;
      if (!std::filesystem::exists(p1) || !std::filesystem::exists(p2) || slurp(p1) != slurp(p2)) differing.push_back(run + "/" + f);
    }
  std::string diff_list;
  for (const auto& d : differing) diff_list += " " + d;
  gate.report("7 determinism", differing.empty(), fmt("%zu checkpoint and metric files of teacher, ptq-minmax and cr-qat (seed %llu) re-run and byte-compared; differing:%s", compared,
                                                      static_cast<unsigned long long>(seed), differing.empty() ? " none" : diff_list.c_str()));

  // Runtime budget of the freshly timed repeat runs.
  double worst = 0;
  std::string which;
  for (const std::string run : {"teacher", "ptq-minmax", "cr-qat"}) {
    const double t = wall_seconds(again.run_dir(seed, run));
    if (t > worst) {
      worst = t;
      which = run;
    }
  }
  gate.report("5 runtime per run", worst > 0 && worst <= 600, fmt("slowest timed run %s took %.0fs on this machine (limit 600s)", which.c_str(), worst));
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : CRQAT_ACCEPTANCE_DIR;
  const bool quick = argc > 2 && std::string(argv[2]) == "--quick";
  Gate gate;
  const auto scratch = out / "scratch";
  std::filesystem::create_directories(scratch);
  try {
    criterion_quantizer(gate);
    criterion_gradients(gate);
    criterion_trkd(gate);
    criterion_curriculum(gate, scratch);
    if (!quick) end_to_end(gate, out);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance harness: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", gate.failures());
  return gate.failures() == 0 ? 0 : 1;
}
