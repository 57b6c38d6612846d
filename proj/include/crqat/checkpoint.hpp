#pragma once

#include "crqat/curriculum.hpp"

namespace crqat {

// ---------------------------------------------------------------------------
// Binary layout (little-endian):
//   "CRQC" | u32 version | u32 entry count |
//   entries: u32 name length | name bytes | u32 rank | rank x u64 dims | f64 values |
//   "END!"
// Entry names: param/<name>, slot/<name>/{spec,scale,zero_point}, opt/<buffer>, cursor.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  Shape shape;
  std::vector<double> values;
};

using CheckpointEntries = std::map<std::string, CheckpointEntry>;

inline void write_checkpoint_entries(const CheckpointEntries& entries, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    os.write("CRQC", 4);
    detail::put<std::uint32_t>(os, kCheckpointVersion);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, e] : entries) {
      if (shape_numel(e.shape) != e.values.size()) throw CheckpointError("entry " + name + ": shape does not match value count");
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
      for (std::size_t d : e.shape) detail::put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * sizeof(double)));
    }
    os.write("END!", 4);
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointEntries read_checkpoint_entries(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  const auto size = std::filesystem::file_size(path);
  auto fail = [&](const std::string& why) { return CheckpointError("checkpoint " + path.string() + ": " + why); };
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "CRQC") throw fail("bad magic header");
  try {
    const auto version = detail::get<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
      throw fail("format version " + std::to_string(version) + " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    const auto count = detail::get<std::uint32_t>(is);
    CheckpointEntries out;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = detail::get<std::uint32_t>(is);
      if (len > size) throw fail("truncated or corrupt entry name");
      std::string name(len, '\0');
      if (!is.read(name.data(), len)) throw fail("truncated entry name");
      CheckpointEntry e;
      const auto rank = detail::get<std::uint32_t>(is);
      if (rank > 8) throw fail("corrupt rank for " + name);
      for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<std::size_t>(detail::get<std::uint64_t>(is)));
      const std::size_t n = shape_numel(e.shape);
      if (n * sizeof(double) > size) throw fail("truncated values for " + name);
      e.values.resize(n);
      if (!is.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(n * sizeof(double)))) throw fail("truncated values for " + name);
      out.emplace(std::move(name), std::move(e));
    }
    char end[4];
    if (!is.read(end, 4) || std::string(end, 4) != "END!") throw fail("missing end marker (truncated file)");
    return out;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception&) {
    throw fail("truncated file");
  }
}

namespace detail {
inline std::vector<double> encode_spec(const QuantSlot& s) {
  return {s.active ? 1.0 : 0.0,
          static_cast<double>(s.spec.bits),
          s.spec.is_signed ? 1.0 : 0.0,
          s.spec.symmetric ? 1.0 : 0.0,
          static_cast<double>(static_cast<int>(s.spec.granularity)),
          static_cast<double>(s.spec.axis),
          static_cast<double>(s.spec.heads),
          s.spec.learnable ? 1.0 : 0.0};
}

inline void decode_spec(const std::vector<double>& v, QuantSlot& s) {
  if (v.size() != 8) throw CheckpointError("malformed quantizer spec entry");
  s.active = v[0] != 0.0;
  s.spec.bits = static_cast<int>(v[1]);
  s.spec.is_signed = v[2] != 0.0;
  s.spec.symmetric = v[3] != 0.0;
  s.spec.granularity = static_cast<Granularity>(static_cast<int>(v[4]));
  s.spec.axis = static_cast<std::size_t>(v[5]);
  s.spec.heads = static_cast<std::size_t>(v[6]);
  s.spec.learnable = v[7] != 0.0;
}
}  // namespace detail

struct CheckpointState {
  CurriculumCursor cursor;
  std::map<std::string, std::vector<double>> optimizer;
};

/// Parameters, quantizer state, optimizer buffers and curriculum cursor of a model.
inline void save_checkpoint(Model& model, const CheckpointState& state, const std::filesystem::path& path) {
  CheckpointEntries e;
  for (auto& l : model.layers()) {
    e["param/" + l.id + ".weight"] = {l.weight.shape(), l.weight.vec()};
    e["param/" + l.id + ".bias"] = {l.bias.shape(), l.bias.vec()};
  }
  e["param/head.alpha"] = {Shape{1}, model.alpha().vec()};
  e["param/head.beta"] = {Shape{1}, model.beta().vec()};
  for (auto& s : model.slots()) {
    e["slot/" + s.name + "/spec"] = {Shape{8}, detail::encode_spec(*s.slot)};
    if (s.slot->params.scale.defined()) {
      e["slot/" + s.name + "/scale"] = {s.slot->params.scale.shape(), s.slot->params.scale.vec()};
      std::vector<double> z(s.slot->params.zero_point.begin(), s.slot->params.zero_point.end());
      e["slot/" + s.name + "/zero_point"] = {Shape{z.size()}, z};
    }
  }
  for (const auto& [k, v] : state.optimizer) e["opt/" + k] = {Shape{v.size()}, v};
  e["cursor"] = {Shape{3},
                 {static_cast<double>(state.cursor.stage), static_cast<double>(state.cursor.iteration), state.cursor.stage_entered ? 1.0 : 0.0}};
  write_checkpoint_entries(e, path);
}

/// Restores into a model built with the same architecture; any missing entry or
/// shape mismatch is a format error.
inline CheckpointState load_checkpoint(Model& model, const std::filesystem::path& path) {
  const CheckpointEntries e = read_checkpoint_entries(path);
  auto need = [&](const std::string& key) -> const CheckpointEntry& {
    const auto it = e.find(key);
    if (it == e.end()) throw CheckpointError("checkpoint " + path.string() + ": missing entry " + key);
    return it->second;
  };
  auto restore = [&](const std::string& key, Tensor& t) {
    const auto& entry = need(key);
    if (entry.values.size() != t.size()) throw CheckpointError("checkpoint entry " + key + " has " + shape_str(entry.shape) + ", model expects " + shape_str(t.shape()));
    const bool rg = t.requires_grad();
    t = Tensor(t.shape(), entry.values, rg);
  };
  for (auto& l : model.layers()) {
    restore("param/" + l.id + ".weight", l.weight);
    restore("param/" + l.id + ".bias", l.bias);
  }
  restore("param/head.alpha", model.alpha());
  restore("param/head.beta", model.beta());
  for (auto& s : model.slots()) {
    s.slot->observer = nullptr;
    detail::decode_spec(need("slot/" + s.name + "/spec").values, *s.slot);
    if (const auto it = e.find("slot/" + s.name + "/scale"); it != e.end()) {
      const auto& z = need("slot/" + s.name + "/zero_point").values;
      std::vector<std::int32_t> zp(z.begin(), z.end());
      s.slot->params = QuantParams::make(it->second.values, std::move(zp), s.slot->spec.learnable);
      s.slot->params.validate(s.slot->spec);
    } else if (s.slot->active) {
      throw CheckpointError("checkpoint " + path.string() + ": active quantizer " + s.name + " without parameters");
    } else {
      s.slot->params = QuantParams{};
    }
  }
  CheckpointState st;
  const auto& c = need("cursor").values;
  if (c.size() != 3) throw CheckpointError("malformed cursor entry");
  st.cursor = CurriculumCursor{static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]), c[2] != 0.0};
  for (const auto& [k, v] : e)
    if (k.starts_with("opt/")) st.optimizer[k.substr(4)] = v.values;
  return st;
}

}  // namespace crqat
