#pragma once

#include <cstdint>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "doam/model.hpp"

namespace doam {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[8] = {'D', 'O', 'A', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline json to_json(const DoamConfig& c) {
  return {{"n1", c.n1}, {"n2", c.n2}, {"c_e", c.c_e}, {"c_r", c.c_r}, {"k_set", c.k_set}, {"fusion_bias", c.fusion_bias}};
}

inline json to_json(const DetectorConfig& c) {
  json anchors = json::array();
  for (const auto& head : c.anchors) {
    json h = json::array();
    for (const auto& a : head) h.push_back({a.size, a.aspect});
    anchors.push_back(h);
  }
  return {{"num_classes", c.num_classes}, {"widths", c.widths}, {"strides", c.strides},
          {"head_stages", c.head_stages}, {"anchors", anchors}};
}

inline json to_json(const ModelConfig& c) {
  return {{"variant", std::string(to_string(c.variant))},
          {"height", c.height},
          {"width", c.width},
          {"seed", c.seed},
          {"doam", to_json(c.doam)},
          {"detector", to_json(c.detector)}};
}

inline ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& d = j.at("doam");
    c.doam.n1 = d.at("n1").get<int>();
    c.doam.n2 = d.at("n2").get<int>();
    c.doam.c_e = d.at("c_e").get<int>();
    c.doam.c_r = d.at("c_r").get<int>();
    c.doam.k_set = d.at("k_set").get<std::vector<int>>();
    c.doam.fusion_bias = d.at("fusion_bias").get<double>();
    const auto& t = j.at("detector");
    c.detector.num_classes = t.at("num_classes").get<int>();
    c.detector.widths = t.at("widths").get<std::vector<int>>();
    c.detector.strides = t.at("strides").get<std::vector<int>>();
    c.detector.head_stages = t.at("head_stages").get<std::vector<int>>();
    c.detector.anchors.clear();
    for (const auto& h : t.at("anchors")) {
      std::vector<AnchorSpec> head;
      for (const auto& a : h) head.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
      c.detector.anchors.push_back(head);
    }
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed model metadata: ") + e.what());
  }
}

struct CheckpointMeta {
  ModelConfig model;
  std::vector<std::string> classes;
  json extra = json::object();  // epoch, training settings
};

// Layout: magic, u32 version, u64 manifest length, JSON manifest, then
// little-endian float32 tensors at the offsets listed in the manifest.
inline void save_checkpoint(const std::filesystem::path& path, DetectionModel<float>& model,
                            const std::vector<std::string>& classes, const json& extra = json::object()) {
  json tensors = json::array();
  std::vector<const Tensor<float>*> data;
  std::uint64_t offset = 0;
  model.visit([&](const std::string& name, Var<float>& v, bool trainable) {
    tensors.push_back({{"name", name}, {"shape", v.shape()}, {"dtype", "float32"}, {"offset", offset},
                       {"trainable", trainable}});
    data.push_back(&v.value());
    offset += v.value().size() * sizeof(float);
  });
  json manifest = {{"model", to_json(model.config)}, {"classes", classes}, {"extra", extra}, {"tensors", tensors}};
  const std::string m = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + tmp);
    os.write(kCheckpointMagic, 8);
    const std::uint32_t ver = kCheckpointVersion;
    const std::uint64_t len = m.size();
    os.write(reinterpret_cast<const char*>(&ver), sizeof ver);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(m.data(), static_cast<std::streamsize>(m.size()));
    for (const auto* t : data) os.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
    if (!os) throw IoError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {
struct RawCheckpoint {
  json manifest;
  std::vector<char> payload;
};

inline RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t ver = 0;
  std::uint64_t len = 0;
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError(path.string() + ": not a checkpoint file");
  is.read(reinterpret_cast<char*>(&ver), sizeof ver);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is) throw CheckpointError(path.string() + ": truncated header");
  if (ver != kCheckpointVersion)
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(ver));
  std::string m(len, '\0');
  is.read(m.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError(path.string() + ": truncated manifest");
  RawCheckpoint raw;
  try {
    raw.manifest = json::parse(m);
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt manifest: " + e.what());
  }
  raw.payload.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  return raw;
}
}  // namespace detail

inline CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  auto raw = detail::read_raw_checkpoint(path);
  CheckpointMeta meta;
  meta.model = model_config_from_json(raw.manifest.at("model"));
  meta.classes = raw.manifest.value("classes", std::vector<std::string>{});
  meta.extra = raw.manifest.value("extra", json::object());
  return meta;
}

// Copies stored tensors into `model`. Every tensor of the model must be
// present with the same shape.
inline void load_weights(const std::filesystem::path& path, DetectionModel<float>& model) {
  auto raw = detail::read_raw_checkpoint(path);
  std::map<std::string, json> entries;
  for (const auto& t : raw.manifest.at("tensors")) entries[t.at("name").get<std::string>()] = t;
  const auto stored = model_config_from_json(raw.manifest.at("model"));
  if (stored.variant != model.config.variant)
    throw CheckpointError("checkpoint variant '" + std::string(to_string(stored.variant)) + "' does not match model '" +
                          std::string(to_string(model.config.variant)) + "'");
  std::size_t seen = 0;
  model.visit([&](const std::string& name, Var<float>& v, bool) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    const auto shape = it->second.at("shape").get<Shape>();
    if (shape != v.shape())
      throw CheckpointError("tensor '" + name + "': checkpoint shape " + shape_str(shape) + " vs model " + shape_str(v.shape()));
    if (it->second.at("dtype").get<std::string>() != "float32") throw CheckpointError("tensor '" + name + "': unsupported dtype");
    const auto off = it->second.at("offset").get<std::uint64_t>();
    const std::size_t bytes = v.value().size() * sizeof(float);
    if (off + bytes > raw.payload.size()) throw CheckpointError("tensor '" + name + "' extends past end of file");
    std::memcpy(v.mutable_value().data(), raw.payload.data() + off, bytes);
    ++seen;
  });
  if (seen != entries.size())
    throw CheckpointError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                          std::to_string(seen));
}

struct LoadedModel {
  DetectionModel<float> model;
  CheckpointMeta meta;
};

inline LoadedModel load_checkpoint(const std::filesystem::path& path) {
  LoadedModel out;
  out.meta = read_checkpoint_meta(path);
  try {
    out.model = DetectionModel<float>(out.meta.model);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint model config invalid: ") + e.what());
  }
  load_weights(path, out.model);
  return out;
}

}  // namespace doam
