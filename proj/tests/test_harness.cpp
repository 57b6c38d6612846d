#include <gtest/gtest.h>

#include "crqat/crqat.hpp"

#include <unistd.h>

#include <fstream>
#include <sstream>

using namespace crqat;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("crqat-harness-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

nlohmann::json tiny_config() {
  return {{"data.n_train", 32},     {"data.n_val_base", 8},  {"data.n_val_novel", 8},  {"quant.calib_samples", 4},
          {"teacher.iterations", 4}, {"teacher.batch_size", 4}, {"qat.iterations", 6},    {"qat.batch_size", 2},
          {"eval.batch_size", 8},    {"eval.min_regions", 2},  {"experiment.seeds", {0}}};
}

std::filesystem::path write_config(const std::filesystem::path& dir, const nlohmann::json& j, const std::string& name = "config.json") {
  const auto path = dir / name;
  std::ofstream(path) << j.dump();
  return path;
}

struct CliResult {
  int code;
  std::string out;
};

CliResult cli(const std::string& args, const std::filesystem::path& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string(CRQAT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
  const ExperimentConfig def;
  EXPECT_NO_THROW(def.validate());
  const auto j = config_to_json(def);
  const ExperimentConfig back = parse_config(j.dump());
  EXPECT_EQ(config_to_json(back), j);
  EXPECT_EQ(config_digest(back), config_digest(def));

  const ExperimentConfig tiny = parse_config(tiny_config().dump());
  EXPECT_EQ(tiny.data.n_train, 32u);
  EXPECT_EQ(tiny.qat_iterations, 6u);
  EXPECT_NE(config_digest(tiny), config_digest(def));
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(parse_config(R"({"qat.iterationz": 5})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"qat.iterations": "many"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"qat.iterations": -4})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"quant.learnable": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"data.shapes": [1, 2]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"qat": {"iterations": 5}})"), ConfigError);
  EXPECT_THROW(parse_config("[1, 2]"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  EXPECT_NO_THROW(parse_config(R"({"qat.lr_multiplier": 50})"));  // integers are fine for real-valued keys
}

TEST(Config, SemanticChecks) {
  EXPECT_THROW(parse_config(R"({"qat.iterations": 2})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"quant.weight_bits": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"quant.act_init": "kl"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"model.heads": 3})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"data.image_size": 48})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"data.novel_pairs": ["circle-blue"]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"quant.calib_samples": 100000})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"experiment.seeds": []})"), ConfigError);
}

TEST(Methods, RegistryAndSchedules) {
  EXPECT_THROW(find_method("int8"), ConfigError);
  const auto& qat = find_method("qat");
  const auto s = make_schedule(qat, 30, 6, 6);
  EXPECT_EQ(s.stage_count(), 1u);
  EXPECT_TRUE(s.stages[0].kd.empty());

  const auto cr = make_schedule(find_method("cr-qat"), 30, 2, 3);
  ASSERT_EQ(cr.stage_count(), 2u);
  EXPECT_EQ(cr.stages[1].kd, (std::vector<KdTerm>{{KdKind::feature, 2}, {KdKind::trkd, 3}}));

  const auto cq = make_schedule(find_method("cqat"), 30, 6, 6);
  EXPECT_EQ(cq.stage_count(), 2u);
  EXPECT_TRUE(cq.stages[1].kd.empty());
  const auto kd = make_schedule(find_method("kd-only"), 30, 6, 6);
  EXPECT_EQ(kd.stage_count(), 1u);
  EXPECT_EQ(kd.stages[0].kd.size(), 2u);
  EXPECT_EQ(make_schedule(find_method("cr-qat-3stage"), 30, 6, 6).stage_count(), 3u);
  EXPECT_EQ(find_method("cr-qat-region-text").variant, TrkdVariant::region_text);
  for (const auto& m : qat_methods()) EXPECT_NO_THROW(make_schedule(m, 30, 6, 6).validate()) << m.name;
}

TEST(Methods, AblationCells) {
  for (const auto& axis : ablation_axes()) {
    const auto cells = ablation_cells(axis);
    EXPECT_GE(cells.size(), 2u);
    std::set<std::string> names;
    for (const auto& c : cells) {
      EXPECT_NO_THROW(find_method(c.method));
      EXPECT_TRUE(names.insert(cell_run_name(c)).second) << axis;
    }
  }
  EXPECT_EQ(ablation_cells("curriculum-kd").size(), 4u);
  EXPECT_EQ(ablation_cells("granularity").size(), 6u);
  EXPECT_EQ(setting_label(QuantSetting{4, 4, 8, false, true}), "4-4-8 Ch-T-H");
  EXPECT_EQ(setting_label(QuantSetting{3, 3, 8, true, true}), "3-3-8 Ch-Ch-H");
  EXPECT_THROW(ablation_cells("depth"), ConfigError);
}

TEST(Cli, ExitCodes) {
  const auto dir = temp_dir("exit");
  const auto good = write_config(dir, tiny_config());
  EXPECT_EQ(cli("--config " + write_config(dir, {{"qat.iterationz", 5}}, "bad.json").string() + " gen-data --out " + dir.string(), dir).code, 2);
  EXPECT_EQ(cli("--config " + write_config(dir, {{"model.heads", 3}}, "bad2.json").string() + " gen-data", dir).code, 2);
  EXPECT_EQ(cli("frobnicate", dir).code, 2);
  EXPECT_EQ(cli("--config " + good.string() + " --out " + dir.string() + " qat --method nope", dir).code, 2);

  const auto r = cli("--config " + good.string() + " --out " + (dir / "runs").string() + " qat", dir);
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("train-teacher"), std::string::npos) << r.out;
  EXPECT_EQ(cli("--config " + good.string() + " --out " + (dir / "runs").string() + " cr-qat --resume", dir).code, 3);
  EXPECT_EQ(cli("--config " + good.string() + " --out " + (dir / "runs").string() + " eval --run cr-qat", dir).code, 3);

  const auto g = cli("--config " + good.string() + " --out " + (dir / "runs").string() + " gen-data", dir);
  EXPECT_EQ(g.code, 0) << g.out;
  EXPECT_TRUE(std::filesystem::exists(dir / "runs" / "data"));
  std::filesystem::remove_all(dir);
}

TEST(Cli, DivergenceExitsWithNumericFailure) {
  const auto dir = temp_dir("nan");
  auto j = tiny_config();
  j["teacher.lr"] = 1e300;
  j["teacher.grad_clip"] = 0.0;
  const auto cfg = write_config(dir, j);
  const auto r = cli("--config " + cfg.string() + " --out " + dir.string() + " train-teacher", dir);
  EXPECT_EQ(r.code, 4) << r.out;
  std::filesystem::remove_all(dir);
}

TEST(Cli, StagedResumeMatchesUninterruptedRun) {
  const auto dir = temp_dir("resume");
  const auto cfg = write_config(dir, tiny_config());
  const std::string base = "--config " + cfg.string() + " --seed 0 --out ";
  for (const char* out : {"a", "b"}) ASSERT_EQ(cli(base + (dir / out).string() + " train-teacher", dir).code, 0);

  auto r = cli(base + (dir / "a").string() + " cr-qat", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  r = cli(base + (dir / "b").string() + " cr-qat --stop-after-stage 1", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("\"partial\": true"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "b/seed-0/cr-qat/stage-1.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "b/seed-0/cr-qat/model.ckpt"));
  r = cli(base + (dir / "b").string() + " cr-qat --resume", dir);
  ASSERT_EQ(r.code, 0) << r.out;

  for (const char* f : {"model.ckpt", "metrics.jsonl", "stages.json", "report.json"})
    EXPECT_EQ(slurp(dir / "a/seed-0/cr-qat" / f), slurp(dir / "b/seed-0/cr-qat" / f)) << f;
  const auto report = read_json(dir / "a/seed-0/cr-qat/report.json");
  EXPECT_EQ(report["stages"].size(), 2u);
  EXPECT_EQ(report["stages"][0]["quantized"], nlohmann::json::array({"backbone"}));

  r = cli(base + (dir / "a").string() + " eval --run cr-qat", dir);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("ap50"), std::string::npos);
  std::filesystem::remove_all(dir);
}
