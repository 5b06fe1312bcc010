#include "densekit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "densekit/audit.hpp"
#include "densekit/errors.hpp"
#include "json.hpp"

namespace densekit {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'K', 'P', 'T'};

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32(const std::string& bytes, size_t offset) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  return v;
}

struct DirEntry {
  std::string name;
  const std::vector<float>* data;
  std::vector<int> shape;
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path, const std::map<std::string, Tensor>* extra) {
  // directory order: parameters in plan order, running stats in plan order,
  // then extras sorted by name; fully deterministic for a given model state
  std::vector<DirEntry> entries;
  std::vector<Tensor> running_views;  // keeps shape-wrapped running buffers alive
  running_views.reserve(model.running.size() * 2);
  for (const std::string& name : model.param_names) {
    const Tensor& t = model.param(name);
    entries.push_back({name, &t.buffer(), t.shape()});
  }
  for (const LayerSpec& l : model.plan.layers) {
    if (l.kind != LayerKind::bn) continue;
    const BatchNormStats& stats = model.running.at(l.param_base);
    entries.push_back({l.param_base + ".running_mean", &stats.mean, {static_cast<int>(stats.mean.size())}});
    entries.push_back({l.param_base + ".running_var", &stats.var, {static_cast<int>(stats.var.size())}});
  }
  if (extra != nullptr) {
    for (const auto& [name, t] : *extra) {
      entries.push_back({name, &t.buffer(), t.shape()});
    }
  }

  json dir = json::array();
  uint64_t offset = 0;
  for (const DirEntry& e : entries) {
    const uint64_t length = e.data->size() * sizeof(float);
    dir.push_back({{"name", e.name}, {"dtype", "f32"}, {"shape", e.shape}, {"offset", offset}, {"length", length}});
    offset += length;
  }

  json header;
  header["config"] = model.plan.config.to_json();
  header["input_size"] = model.plan.input_size;
  header["epoch"] = model.epoch;
  header["rng_state"] = model.seed;
  header["plan_digest"] = plan_digest(model.plan);
  header["tensors"] = std::move(dir);
  const std::string header_str = header.dump();

  std::string prefix;
  prefix.append(kMagic, 4);
  put_u32(prefix, kCheckpointVersion);
  put_u32(prefix, static_cast<uint32_t>(header_str.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint file for writing: " + path);
  out.write(prefix.data(), static_cast<std::streamsize>(prefix.size()));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const DirEntry& e : entries) {
    out.write(reinterpret_cast<const char*>(e.data->data()),
              static_cast<std::streamsize>(e.data->size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path, std::map<std::string, Tensor>* extra_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading checkpoint: " + path);

  if (bytes.size() < 12) throw TruncatedFileError("checkpoint shorter than its fixed header: " + path);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic): " + path);
  const uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  }
  const uint32_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<size_t>(header_len)) {
    throw TruncatedFileError("checkpoint header cut short: " + path);
  }

  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }

  ArchConfig config;
  LayerPlan plan;
  int input_size = 0;
  try {
    config = ArchConfig::from_json(header.at("config"));
    input_size = header.at("input_size").get<int>();
    plan = build_plan(config, input_size);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint carries an invalid architecture config: " + std::string(e.what()));
  }
  if (header.contains("plan_digest") && header.at("plan_digest").get<uint64_t>() != plan_digest(plan)) {
    throw FormatError("checkpoint plan digest does not match its own config: " + path);
  }

  Model model = init_model(plan, header.at("rng_state").get<uint64_t>());
  model.epoch = header.at("epoch").get<int>();

  const size_t payload_start = 12 + header_len;
  const size_t payload_size = bytes.size() - payload_start;
  std::vector<bool> param_seen(model.param_names.size(), false);

  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string dtype = entry.at("dtype").get<std::string>();
    if (dtype != "f32") throw FormatError("tensor '" + name + "' has unsupported dtype '" + dtype + "'");
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const uint64_t length = entry.at("length").get<uint64_t>();
    const int64_t numel = shape_numel(shape);
    if (length != static_cast<uint64_t>(numel) * sizeof(float)) {
      throw FormatError("tensor '" + name + "' length " + std::to_string(length) + " does not match shape " +
                        shape_to_string(shape));
    }
    if (offset + length > payload_size) {
      throw TruncatedFileError("checkpoint payload cut short at tensor '" + name + "': " + path);
    }
    const float* src = reinterpret_cast<const float*>(bytes.data() + payload_start + offset);

    auto pit = model.params.find(name);
    if (pit != model.params.end()) {
      if (pit->second.shape() != shape) {
        throw FormatError("tensor '" + name + "' shape " + shape_to_string(shape) + " does not match plan shape " +
                          pit->second.shape_str());
      }
      std::memcpy(pit->second.data(), src, length);
      for (size_t i = 0; i < model.param_names.size(); ++i) {
        if (model.param_names[i] == name) param_seen[i] = true;
      }
      continue;
    }
    bool consumed = false;
    for (const std::string suffix : {".running_mean", ".running_var"}) {
      if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        const std::string base = name.substr(0, name.size() - suffix.size());
        auto rit = model.running.find(base);
        if (rit != model.running.end()) {
          std::vector<float>& dst = suffix == ".running_mean" ? rit->second.mean : rit->second.var;
          if (dst.size() != static_cast<size_t>(numel)) {
            throw FormatError("tensor '" + name + "' has " + std::to_string(numel) + " channels, plan expects " +
                              std::to_string(dst.size()));
          }
          std::memcpy(dst.data(), src, length);
          consumed = true;
        }
        break;
      }
    }
    if (!consumed && extra_out != nullptr) {
      std::vector<float> data(static_cast<size_t>(numel));
      std::memcpy(data.data(), src, length);
      extra_out->emplace(name, Tensor(shape, std::move(data)));
    }
  }

  for (size_t i = 0; i < param_seen.size(); ++i) {
    if (!param_seen[i]) throw FormatError("checkpoint is missing parameter '" + model.param_names[i] + "': " + path);
  }
  return model;
}

void require_plan_match(const Model& loaded, const LayerPlan& expected) {
  if (plan_digest(loaded.plan) != plan_digest(expected)) {
    throw PlanMismatchError("checkpoint architecture " + arch_id(loaded.plan.config) + " (input " +
                            std::to_string(loaded.plan.input_size) + ") does not match the configured architecture " +
                            arch_id(expected.config) + " (input " + std::to_string(expected.input_size) + ")");
  }
}

}  // namespace densekit
