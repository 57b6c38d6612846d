#pragma once

#include "crqat/experiment.hpp"

namespace crqat {

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"curriculum-kd", "trkd-variant", "stage-count", "granularity"};
  return axes;
}

struct AblationCell {
  std::string label;
  std::string method;
  std::optional<QuantSetting> setting;  // overrides the base quant setting
};

inline std::vector<AblationCell> ablation_cells(const std::string& axis) {
  if (axis == "curriculum-kd") {
    return {{"baseline", "qat", {}}, {"curriculum only", "cqat", {}}, {"kd only", "kd-only", {}}, {"curriculum + kd", "cr-qat", {}}};
  }
  if (axis == "trkd-variant") {
    return {{"w/o TRKD", "cr-qat-no-trkd", {}},
            {"region-text", "cr-qat-region-text", {}},
            {"region-region", "cr-qat-region-region", {}},
            {"full TRKD", "cr-qat", {}}};
  }
  if (axis == "stage-count") return {{"2 (backbone -> neck-head)", "cr-qat", {}}, {"3 (backbone -> neck -> head)", "cr-qat-3stage", {}}};
  if (axis == "granularity") {
    std::vector<AblationCell> cells;
    for (const QuantSetting& q : {QuantSetting{4, 4, 8, false, true}, QuantSetting{4, 5, 8, false, true}, QuantSetting{3, 3, 8, true, true}}) {
      for (const char* m : {"qat", "cr-qat"}) cells.push_back({setting_label(q) + " " + m, m, q});
    }
    return cells;
  }
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

/// Run directory name of a cell: the method, suffixed by the setting when overridden.
inline std::string cell_run_name(const AblationCell& cell) {
  if (!cell.setting) return cell.method;
  std::string s = setting_label(*cell.setting);
  std::replace(s.begin(), s.end(), ' ', '_');
  return cell.method + "@" + s;
}

/// Runs (or reuses) every cell of an axis for every seed and tabulates AP.
inline nlohmann::json run_ablation(const Experiment& base, const std::string& axis, const std::vector<std::uint64_t>& seeds) {
  const auto cells = ablation_cells(axis);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& cell : cells) {
    ExperimentConfig cfg = base.config();
    if (cell.setting) cfg.quant = *cell.setting;
    const Experiment exp(cfg, base.out());
    nlohmann::json per_seed = nlohmann::json::array();
    double base_sum = 0, novel_sum = 0;
    for (std::uint64_t seed : seeds) {
      const std::string run = cell_run_name(cell);
      nlohmann::json rep;
      if (auto cached = exp.cached_report(seed, run)) {
        rep = *cached;
      } else {
        Experiment::RunControl rc;
        rc.run_name = run;
        rep = exp.run_qat(seed, find_method(cell.method), rc);
      }
      const double b = rep["ap50"]["val_base"], n = rep["ap50"]["val_novel"];
      base_sum += b;
      novel_sum += n;
      per_seed.push_back({{"seed", seed}, {"val_base", b}, {"val_novel", n}});
    }
    const double k = static_cast<double>(seeds.size());
    rows.push_back({{"label", cell.label}, {"run", cell_run_name(cell)}, {"per_seed", per_seed}, {"mean_val_base", base_sum / k}, {"mean_val_novel", novel_sum / k}});
  }
  nlohmann::json table{{"axis", axis}, {"seeds", seeds}, {"rows", rows}};
  write_json(table, base.out() / ("ablation-" + axis + ".json"));
  std::ofstream tsv(base.out() / ("ablation-" + axis + ".tsv"), std::ios::trunc);
  tsv << "label\trun\tmean_ap50_val_base\tmean_ap50_val_novel\n";
  for (const auto& r : rows) tsv << r["label"].get<std::string>() << '\t' << r["run"].get<std::string>() << '\t' << r["mean_val_base"].get<double>() << '\t' << r["mean_val_novel"].get<double>() << '\n';
  return table;
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingPrerequisite("cannot read " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

/// Cross-seed summary: every finished run's APs, the alignment/relational distortion of
/// the QAT-family runs, the pooled embedding-vs-confidence Spearman correlation and the
/// mean positive confidence per category.
inline nlohmann::json analyze(const Experiment& exp, const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& compared = {"qat", "cr-qat"}) {
  nlohmann::json runs = nlohmann::json::array();
  nlohmann::json run_rows = nlohmann::json::array();
  std::vector<double> emb, conf;
  std::ofstream group_tsv(exp.out() / "distortion-groups.tsv", std::ios::trunc);
  group_tsv << "run\tseed\timage\tcategory\tembedding_mae\tconfidence_mae\n";
  nlohmann::json confidence = nlohmann::json::array();

  for (std::uint64_t seed : seeds) {
    const auto seed_dir = exp.out() / ("seed-" + std::to_string(seed));
    if (!std::filesystem::exists(seed_dir)) throw MissingPrerequisite("no runs for seed " + std::to_string(seed) + " in " + exp.out().string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(seed_dir))
      if (std::filesystem::exists(e.path() / "report.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const auto rep = read_json(d / "report.json");
      nlohmann::json row{{"run", rep["run"]}, {"seed", seed}, {"ap50", rep["ap50"]}};
      if (rep.contains("distortion")) row["distortion"] = rep["distortion"];
      runs.push_back(row);
    }

    const Model teacher = exp.load_teacher(seed);
    std::map<std::string, std::map<std::size_t, double>> pbar;
    pbar["teacher"] = exp.positive_confidence(teacher, Split::val_base);
    for (const auto& name : compared) {
      const auto rep = read_json(exp.run_dir(seed, name) / "report.json");
      run_rows.push_back({{"run", name}, {"seed", seed}, {"alignment_mae", rep["distortion"]["alignment_mae"]},
                       {"relational_mae", rep["distortion"]["relational_mae"]}, {"relational_pearson", rep["distortion"]["relational_pearson"]}});
      for (const auto& g : read_jsonl(exp.run_dir(seed, name) / "groups.jsonl")) {
        emb.push_back(g["embedding_mae"]);
        conf.push_back(g["confidence_mae"]);
        group_tsv << name << '\t' << seed << '\t' << g["image"].get<std::size_t>() << '\t' << g["category"].get<std::size_t>() << '\t'
             << g["embedding_mae"].get<double>() << '\t' << g["confidence_mae"].get<double>() << '\n';
      }
      pbar[name] = exp.positive_confidence(exp.load_run(seed, name), Split::val_base);
    }
    for (const auto& [run, per_cat] : pbar)
      for (const auto& [cat, v] : per_cat)
        confidence.push_back({{"run", run}, {"seed", seed}, {"category", exp.bank().table()[cat].name}, {"mean_positive_confidence", v}});
  }

  nlohmann::json means = nlohmann::json::object();
  for (const auto& name : compared) {
    double a = 0, r = 0, p = 0;
    std::size_t n = 0;
    for (const auto& row : run_rows)
      if (row["run"] == name) {
        a += row["alignment_mae"].get<double>();
        r += row["relational_mae"].get<double>();
        p += row["relational_pearson"].get<double>();
        ++n;
      }
    if (n) means[name] = {{"alignment_mae", a / static_cast<double>(n)}, {"relational_mae", r / static_cast<double>(n)}, {"relational_pearson", p / static_cast<double>(n)}};
  }
  std::optional<double> rho;
  if (emb.size() >= 2) rho = spearman(emb, conf);

  std::ofstream tsv(exp.out() / "distortion-runs.tsv", std::ios::trunc);
  tsv << "run\tseed\talignment_mae\trelational_mae\trelational_pearson\n";
  for (const auto& row : run_rows)
    tsv << row["run"].get<std::string>() << '\t' << row["seed"].get<std::uint64_t>() << '\t' << row["alignment_mae"].get<double>() << '\t'
        << row["relational_mae"].get<double>() << '\t' << row["relational_pearson"].get<double>() << '\n';

  nlohmann::json summary{{"seeds", seeds},
                         {"runs", runs},
                         {"distortion", run_rows},
                         {"distortion_means", means},
                         {"spearman_groups", emb.size()},
                         {"embedding_confidence_spearman", rho ? nlohmann::json(*rho) : nlohmann::json(nullptr)},
                         {"mean_positive_confidence", confidence}};
  write_json(summary, exp.out() / "analysis.json");
  return summary;
}

}  // namespace crqat
