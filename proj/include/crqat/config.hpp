#pragma once

#include "crqat/curriculum.hpp"

namespace crqat {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  DatasetConfig data;
  std::vector<std::string> shapes{"circle", "square", "triangle"};
  std::vector<std::string> colors{"red", "green", "blue", "yellow"};
  std::vector<std::string> novel_pairs{"circle:blue", "square:yellow", "triangle:red"};

  ArchConfig arch;
  std::uint64_t text_seed = 1;

  QuantSetting quant;
  std::string act_init = "minmax";  // calibrator that initializes QAT activation quantizers
  double percentile = 99.99;
  std::size_t calib_samples = 256;

  std::size_t teacher_iterations = 3000;
  std::size_t teacher_batch = 16;
  double teacher_lr = 2e-3;
  double teacher_grad_clip = 5.0;

  std::size_t qat_iterations = 250;
  std::size_t qat_batch = 16;
  double lr_multiplier = 1000.0;
  double momentum = 0.9;
  double quant_lr_ratio = 0.1;
  double qat_grad_clip = 5.0;
  double lambda_feature = 6.0;
  double lambda_trkd = 6.0;
  double trkd_delta = 1.0;
  double assign_radius = 1.5;

  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 20;
  std::size_t eval_batch = 50;
  std::size_t min_regions = 10;
  bool coco_ap = false;

  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  std::vector<std::pair<std::string, std::string>> novel_pair_list() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& p : novel_pairs) {
      const auto colon = p.find(':');
      if (colon == std::string::npos) throw ConfigError("data.novel_pairs: expected 'shape:color', got '" + p + "'");
      out.emplace_back(p.substr(0, colon), p.substr(colon + 1));
    }
    return out;
  }

  CategoryTable category_table() const { return CategoryTable(shapes, colors, novel_pair_list()); }

  /// Spec-level checks beyond field types.
  void validate() const {
    try {
      arch.validate();
      category_table();
      SyntheticDataset(data, category_table());
      for (int b : {quant.weight_bits, quant.act_bits, quant.attn_bits}) QuantSpec{b}.validate();
      parse_calibrator(act_init);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    if (data.image_size != arch.image_size) throw ConfigError("data.image_size must equal model.image_size");
    if (qat_iterations < 3) throw ConfigError("qat.iterations must be at least 3");
    if (teacher_iterations == 0 || teacher_batch == 0 || qat_batch == 0 || eval_batch == 0) throw ConfigError("iteration counts and batch sizes must be positive");
    if (calib_samples == 0 || calib_samples > data.n_val_base) throw ConfigError("quant.calib_samples must lie in [1, data.n_val_base]");
    if (min_regions < 2) throw ConfigError("eval.min_regions must be at least 2");
    if (!(percentile > 0 && percentile <= 100)) throw ConfigError("quant.percentile must lie in (0, 100]");
    if (!(nms_iou > 0 && nms_iou < 1)) throw ConfigError("eval.nms_iou must lie in (0, 1)");
    if (seeds.empty()) throw ConfigError("experiment.seeds must be nonempty");
  }
};

namespace detail {

struct ConfigField {
  std::function<nlohmann::json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const nlohmann::json&)> set;
};

template <typename T>
ConfigField bind_field(T ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return nlohmann::json(c.*member); },
          [member](ExperimentConfig& c, const nlohmann::json& j) { c.*member = j.get<T>(); }};
}

template <typename S, typename T>
ConfigField bind_nested(S ExperimentConfig::*outer, T S::*inner) {
  return {[outer, inner](const ExperimentConfig& c) { return nlohmann::json(c.*outer.*inner); },
          [outer, inner](ExperimentConfig& c, const nlohmann::json& j) { c.*outer.*inner = j.get<T>(); }};
}

inline bool json_type_ok(const nlohmann::json& current, const nlohmann::json& given) {
  if (current.is_number_unsigned()) return given.is_number_unsigned() || (given.is_number_integer() && given.get<long long>() >= 0);
  if (current.is_number_integer()) return given.is_number_integer();
  if (current.is_number()) return given.is_number();
  if (current.is_array()) {
    if (!given.is_array()) return false;
    if (current.empty()) return true;
    for (const auto& g : given)
      if (!json_type_ok(current.front(), g)) return false;
    return true;
  }
  return current.type() == given.type();
}

inline const std::map<std::string, ConfigField>& config_fields() {
  using C = ExperimentConfig;
  static const std::map<std::string, ConfigField> fields{
      {"data.n_train", bind_nested(&C::data, &DatasetConfig::n_train)},
      {"data.n_val_base", bind_nested(&C::data, &DatasetConfig::n_val_base)},
      {"data.n_val_novel", bind_nested(&C::data, &DatasetConfig::n_val_novel)},
      {"data.image_size", bind_nested(&C::data, &DatasetConfig::image_size)},
      {"data.min_objects", bind_nested(&C::data, &DatasetConfig::min_objects)},
      {"data.max_objects", bind_nested(&C::data, &DatasetConfig::max_objects)},
      {"data.min_size", bind_nested(&C::data, &DatasetConfig::min_size)},
      {"data.max_size", bind_nested(&C::data, &DatasetConfig::max_size)},
      {"data.max_overlap_iou", bind_nested(&C::data, &DatasetConfig::max_overlap_iou)},
      {"data.noise_sigma", bind_nested(&C::data, &DatasetConfig::noise_sigma)},
      {"data.seed", bind_nested(&C::data, &DatasetConfig::seed)},
      {"data.shapes", bind_field(&C::shapes)},
      {"data.colors", bind_field(&C::colors)},
      {"data.novel_pairs", bind_field(&C::novel_pairs)},
      {"model.channels", bind_nested(&C::arch, &ArchConfig::channels)},
      {"model.refine", bind_nested(&C::arch, &ArchConfig::refine)},
      {"model.neck_channels", bind_nested(&C::arch, &ArchConfig::neck_channels)},
      {"model.heads", bind_nested(&C::arch, &ArchConfig::heads)},
      {"model.embed_dim", bind_nested(&C::arch, &ArchConfig::embed_dim)},
      {"model.image_size", bind_nested(&C::arch, &ArchConfig::image_size)},
      {"model.text_seed", bind_field(&C::text_seed)},
      {"quant.weight_bits", bind_nested(&C::quant, &QuantSetting::weight_bits)},
      {"quant.act_bits", bind_nested(&C::quant, &QuantSetting::act_bits)},
      {"quant.attn_bits", bind_nested(&C::quant, &QuantSetting::attn_bits)},
      {"quant.per_channel_act", bind_nested(&C::quant, &QuantSetting::per_channel_act)},
      {"quant.learnable", bind_nested(&C::quant, &QuantSetting::learnable)},
      {"quant.act_init", bind_field(&C::act_init)},
      {"quant.percentile", bind_field(&C::percentile)},
      {"quant.calib_samples", bind_field(&C::calib_samples)},
      {"teacher.iterations", bind_field(&C::teacher_iterations)},
      {"teacher.batch_size", bind_field(&C::teacher_batch)},
      {"teacher.lr", bind_field(&C::teacher_lr)},
      {"teacher.grad_clip", bind_field(&C::teacher_grad_clip)},
      {"qat.iterations", bind_field(&C::qat_iterations)},
      {"qat.batch_size", bind_field(&C::qat_batch)},
      {"qat.lr_multiplier", bind_field(&C::lr_multiplier)},
      {"qat.momentum", bind_field(&C::momentum)},
      {"qat.quant_lr_ratio", bind_field(&C::quant_lr_ratio)},
      {"qat.grad_clip", bind_field(&C::qat_grad_clip)},
      {"qat.lambda_feature", bind_field(&C::lambda_feature)},
      {"qat.lambda_trkd", bind_field(&C::lambda_trkd)},
      {"qat.trkd_delta", bind_field(&C::trkd_delta)},
      {"qat.assign_radius", bind_field(&C::assign_radius)},
      {"eval.score_threshold", bind_field(&C::score_threshold)},
      {"eval.nms_iou", bind_field(&C::nms_iou)},
      {"eval.max_detections", bind_field(&C::max_detections)},
      {"eval.batch_size", bind_field(&C::eval_batch)},
      {"eval.min_regions", bind_field(&C::min_regions)},
      {"eval.coco_ap", bind_field(&C::coco_ap)},
      {"experiment.seed", bind_field(&C::seed)},
      {"experiment.seeds", bind_field(&C::seeds)},
  };
  return fields;
}

}  // namespace detail

/// Applies a flat object of dotted keys. Unknown keys and type mismatches are errors.
inline void apply_config_json(ExperimentConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object of dotted keys");
  const auto& fields = detail::config_fields();
  for (const auto& [key, value] : j.items()) {
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("config: unknown key '" + key + "'");
    const auto current = it->second.get(cfg);
    if (!detail::json_type_ok(current, value)) throw ConfigError("config: key '" + key + "' expects " + std::string(current.type_name()) + ", got " + value.dump());
    try {
      it->second.set(cfg, value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: key '" + key + "': " + e.what());
    }
  }
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  apply_config_json(cfg, j);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Every key with its current value; parse_config(dump) reproduces the config.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, field] : detail::config_fields()) j[key] = field.get(cfg);
  return j;
}

inline std::uint64_t config_digest(const ExperimentConfig& cfg) {
  const std::string s = config_to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ULL;
  return h;
}

}  // namespace crqat
