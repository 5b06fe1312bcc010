#include "densekit/arch.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "densekit/errors.hpp"

namespace densekit {

using nlohmann::json;

std::string to_string(Family f) { return f == Family::densenet ? "densenet" : "resnet_preact"; }

std::string to_string(DatasetFamily f) { return f == DatasetFamily::cifar_style ? "cifar_style" : "imagenet_style"; }

Family family_from_string(const std::string& s) {
  if (s == "densenet") return Family::densenet;
  if (s == "resnet_preact") return Family::resnet_preact;
  throw ConfigError("unknown family '" + s + "' (expected densenet or resnet_preact)");
}

DatasetFamily dataset_family_from_string(const std::string& s) {
  if (s == "cifar_style") return DatasetFamily::cifar_style;
  if (s == "imagenet_style") return DatasetFamily::imagenet_style;
  throw ConfigError("unknown dataset_family '" + s + "' (expected cifar_style or imagenet_style)");
}

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::pool_avg: return "pool_avg";
    case LayerKind::pool_max: return "pool_max";
    case LayerKind::global_pool: return "global_pool";
    case LayerKind::concat_source: return "concat_source";
    case LayerKind::linear: return "linear";
    case LayerKind::dropout: return "dropout";
  }
  throw InternalError("unhandled LayerKind");
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "bn") return LayerKind::bn;
  if (s == "relu") return LayerKind::relu;
  if (s == "pool_avg") return LayerKind::pool_avg;
  if (s == "pool_max") return LayerKind::pool_max;
  if (s == "global_pool") return LayerKind::global_pool;
  if (s == "concat_source") return LayerKind::concat_source;
  if (s == "linear") return LayerKind::linear;
  if (s == "dropout") return LayerKind::dropout;
  throw ConfigError("unknown layer kind '" + s + "'");
}

int ArchConfig::initial_channels() const {
  if (family == Family::resnet_preact) return 16;
  if (dataset_family == DatasetFamily::imagenet_style || bottleneck) return 2 * growth_k;
  return 16;
}

std::vector<int> ArchConfig::layers_per_block() const {
  if (family == Family::resnet_preact) {
    const int units = (depth_L - 2) / 9;
    return {units, units, units};
  }
  if (!block_layers.empty()) return block_layers;
  const int per = bottleneck ? (depth_L - 4) / 6 : (depth_L - 4) / 3;
  return {per, per, per};
}

int ArchConfig::derived_depth() const {
  if (family == Family::resnet_preact) return depth_L;
  const std::vector<int> blocks = layers_per_block();
  int total = 0;
  for (int n : blocks) total += n;
  const int convs_per_layer = bottleneck ? 2 : 1;
  // stem + dense convs + one transition conv per gap + classifier
  return 1 + convs_per_layer * total + (static_cast<int>(blocks.size()) - 1) + 1;
}

void ArchConfig::validate() const {
  if (growth_k < 1) throw ConfigError("growth_k must be >= 1, got " + std::to_string(growth_k));
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout_rate must be in [0, 1), got " + std::to_string(dropout_rate));
  }
  if (!(compression_theta > 0.0 && compression_theta <= 1.0)) {
    throw ConfigError("compression_theta must be in (0, 1], got " + std::to_string(compression_theta));
  }
  if (family == Family::resnet_preact) {
    if (dataset_family != DatasetFamily::cifar_style) {
      throw ConfigError("resnet_preact supports dataset_family cifar_style only");
    }
    if (!block_layers.empty()) {
      throw ConfigError("resnet_preact derives its stages from depth_L; block_layers must be absent");
    }
    if (compression_theta != 1.0) throw ConfigError("compression_theta does not apply to resnet_preact");
    if (depth_L < 11 || (depth_L - 2) % 9 != 0) {
      throw ConfigError("resnet_preact requires (depth_L - 2) % 9 == 0 with at least one unit per stage, got depth_L " +
                        std::to_string(depth_L));
    }
    return;
  }
  // densenet
  if (dataset_family == DatasetFamily::imagenet_style && block_layers.empty()) {
    throw ConfigError("imagenet_style requires explicit block_layers");
  }
  if (!block_layers.empty()) {
    for (size_t i = 0; i < block_layers.size(); ++i) {
      if (block_layers[i] < 1) {
        throw ConfigError("block_layers[" + std::to_string(i) + "] must be >= 1, got " +
                          std::to_string(block_layers[i]));
      }
    }
    if (depth_L > 0 && depth_L != derived_depth()) {
      throw ConfigError("depth_L " + std::to_string(depth_L) + " does not match block_layers (derived depth " +
                        std::to_string(derived_depth()) + ")");
    }
  } else {
    if (depth_L <= 0) throw ConfigError("either depth_L or block_layers must be given");
    if (bottleneck) {
      if (depth_L < 10 || (depth_L - 4) % 6 != 0) {
        throw ConfigError("bottleneck depth requires (depth_L - 4) % 6 == 0, got depth_L " + std::to_string(depth_L));
      }
    } else {
      if (depth_L < 7 || (depth_L - 4) % 3 != 0) {
        throw ConfigError("plain depth requires (depth_L - 4) % 3 == 0, got depth_L " + std::to_string(depth_L));
      }
    }
  }
}

namespace {

int require_int(const json& j, const std::string& key) {
  if (!j.at(key).is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
  return j.at(key).get<int>();
}

double require_number(const json& j, const std::string& key) {
  if (!j.at(key).is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return j.at(key).get<double>();
}

}  // namespace

ArchConfig ArchConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("architecture config must be a JSON object");
  static const std::vector<std::string> known = {
      "family",       "depth_L",      "growth_k",     "bottleneck",   "compression_theta",
      "dataset_family", "block_layers", "num_classes", "dropout_rate", "initial_channels"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const std::string& k : known) ok = ok || (it.key() == k);
    if (!ok) throw ConfigError("unknown architecture config key '" + it.key() + "'");
  }
  if (!j.contains("family")) throw ConfigError("architecture config is missing 'family'");

  ArchConfig c;
  c.family = family_from_string(j.at("family").get<std::string>());
  if (j.contains("dataset_family")) c.dataset_family = dataset_family_from_string(j.at("dataset_family").get<std::string>());
  if (j.contains("growth_k")) c.growth_k = require_int(j, "growth_k");
  else if (c.family == Family::densenet) throw ConfigError("densenet config is missing 'growth_k'");
  if (j.contains("depth_L")) c.depth_L = require_int(j, "depth_L");
  if (j.contains("bottleneck")) {
    if (!j.at("bottleneck").is_boolean()) throw ConfigError("config key 'bottleneck' must be a boolean");
    c.bottleneck = j.at("bottleneck").get<bool>();
  }
  if (j.contains("compression_theta")) c.compression_theta = require_number(j, "compression_theta");
  if (j.contains("num_classes")) c.num_classes = require_int(j, "num_classes");
  if (j.contains("dropout_rate")) c.dropout_rate = require_number(j, "dropout_rate");
  if (j.contains("block_layers")) {
    if (!j.at("block_layers").is_array()) throw ConfigError("config key 'block_layers' must be an array of integers");
    for (const auto& v : j.at("block_layers")) {
      if (!v.is_number_integer()) throw ConfigError("config key 'block_layers' must be an array of integers");
      c.block_layers.push_back(v.get<int>());
    }
  }
  if (c.depth_L == 0 && c.block_layers.empty()) {
    throw ConfigError("architecture config needs depth_L or block_layers");
  }
  c.validate();
  if (j.contains("initial_channels")) {
    const int given = require_int(j, "initial_channels");
    if (given != c.initial_channels()) {
      throw ConfigError("initial_channels " + std::to_string(given) + " does not match the derived value " +
                        std::to_string(c.initial_channels()));
    }
  }
  return c;
}

ArchConfig ArchConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw FormatError("config file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json ArchConfig::to_json() const {
  json j;
  j["family"] = to_string(family);
  j["depth_L"] = depth_L;
  j["growth_k"] = growth_k;
  j["bottleneck"] = bottleneck;
  j["compression_theta"] = compression_theta;
  j["dataset_family"] = to_string(dataset_family);
  if (!block_layers.empty()) j["block_layers"] = block_layers;
  j["num_classes"] = num_classes;
  j["dropout_rate"] = dropout_rate;
  return j;
}

namespace {

json layer_to_json(const LayerSpec& l) {
  json j;
  j["kind"] = to_string(l.kind);
  j["in_channels"] = l.in_channels;
  j["out_channels"] = l.out_channels;
  j["kernel"] = l.kernel;
  j["stride"] = l.stride;
  j["padding"] = l.padding;
  j["in_spatial"] = l.in_spatial;
  j["out_spatial"] = l.out_spatial;
  j["rate"] = l.rate;
  j["block"] = l.block;
  j["layer"] = l.layer;
  if (!l.sources.empty()) j["sources"] = l.sources;
  j["role"] = l.role;
  if (!l.param_base.empty()) j["param_base"] = l.param_base;
  return j;
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec l;
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  l.in_channels = j.at("in_channels").get<int>();
  l.out_channels = j.at("out_channels").get<int>();
  l.kernel = j.at("kernel").get<int>();
  l.stride = j.at("stride").get<int>();
  l.padding = j.at("padding").get<int>();
  l.in_spatial = j.at("in_spatial").get<int>();
  l.out_spatial = j.at("out_spatial").get<int>();
  l.rate = j.at("rate").get<double>();
  l.block = j.at("block").get<int>();
  l.layer = j.at("layer").get<int>();
  if (j.contains("sources")) l.sources = j.at("sources").get<std::vector<int>>();
  l.role = j.at("role").get<std::string>();
  if (j.contains("param_base")) l.param_base = j.at("param_base").get<std::string>();
  return l;
}

}  // namespace

json LayerPlan::to_json() const {
  json j;
  j["config"] = config.to_json();
  j["input_size"] = input_size;
  j["input_channels"] = input_channels;
  j["block_sizes"] = block_sizes;
  j["block_spatial"] = block_spatial;
  j["total_conv_layers"] = total_conv_layers;
  j["dense_edges"] = dense_edges;
  json layers = json::array();
  for (const LayerSpec& l : this->layers) layers.push_back(layer_to_json(l));
  j["layers"] = std::move(layers);
  return j;
}

LayerPlan LayerPlan::from_json(const json& j) {
  LayerPlan p;
  p.config = ArchConfig::from_json(j.at("config"));
  p.input_size = j.at("input_size").get<int>();
  p.input_channels = j.at("input_channels").get<int>();
  p.block_sizes = j.at("block_sizes").get<std::vector<int>>();
  p.block_spatial = j.at("block_spatial").get<std::vector<int>>();
  p.total_conv_layers = j.at("total_conv_layers").get<int>();
  p.dense_edges = j.at("dense_edges").get<int64_t>();
  for (const auto& lj : j.at("layers")) p.layers.push_back(layer_from_json(lj));
  return p;
}

namespace {

// running state while emitting the layer program
struct PlanBuilder {
  LayerPlan plan;
  int channels = 0;
  int spatial = 0;

  void emit(LayerSpec l) { plan.layers.push_back(std::move(l)); }

  LayerSpec base(LayerKind kind, int block, int layer, const std::string& role) const {
    LayerSpec l;
    l.kind = kind;
    l.block = block;
    l.layer = layer;
    l.role = role;
    l.in_channels = channels;
    l.out_channels = channels;
    l.in_spatial = spatial;
    l.out_spatial = spatial;
    return l;
  }

  void conv(int out_channels, int kernel, int stride, int padding, int block, int layer, const std::string& role,
            const std::string& param_base) {
    LayerSpec l = base(LayerKind::conv, block, layer, role);
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.out_spatial = (spatial + 2 * padding - kernel) / stride + 1;
    l.param_base = param_base;
    channels = out_channels;
    spatial = l.out_spatial;
    emit(std::move(l));
    plan.total_conv_layers += 1;
  }

  void bn(int block, int layer, const std::string& role, const std::string& param_base) {
    LayerSpec l = base(LayerKind::bn, block, layer, role);
    l.param_base = param_base;
    emit(std::move(l));
  }

  void relu(int block, int layer, const std::string& role) { emit(base(LayerKind::relu, block, layer, role)); }

  void dropout(double rate, int block, int layer, const std::string& role) {
    LayerSpec l = base(LayerKind::dropout, block, layer, role);
    l.rate = rate;
    emit(std::move(l));
  }
};

}  // namespace

LayerPlan build_densenet_plan(const ArchConfig& config, int input_size) {
  config.validate();
  if (config.family != Family::densenet) throw UsageError("build_densenet_plan called with a non-densenet config");

  PlanBuilder b;
  b.plan.config = config;
  b.plan.config.block_layers = config.layers_per_block();
  b.plan.config.depth_L = config.derived_depth();
  b.plan.input_size = input_size > 0 ? input_size
                      : (config.dataset_family == DatasetFamily::imagenet_style ? 224 : 32);
  b.channels = 3;
  b.spatial = b.plan.input_size;

  const int k = config.growth_k;
  const double rate = config.dropout_rate;
  const std::vector<int> blocks = config.layers_per_block();
  const int num_blocks = static_cast<int>(blocks.size());

  // stem
  if (config.dataset_family == DatasetFamily::imagenet_style) {
    b.conv(config.initial_channels(), 7, 2, 3, 0, 0, "stem", "stem.conv");
    LayerSpec pool = b.base(LayerKind::pool_max, 0, 0, "stem");
    pool.kernel = 3;
    pool.stride = 2;
    pool.padding = 1;
    pool.out_spatial = (b.spatial + 2 - 3) / 2 + 1;
    b.spatial = pool.out_spatial;
    b.emit(std::move(pool));
  } else {
    b.conv(config.initial_channels(), 3, 1, 1, 0, 0, "stem", "stem.conv");
  }

  for (int bi = 1; bi <= num_blocks; ++bi) {
    const int n = blocks[static_cast<size_t>(bi - 1)];
    const int c_in = b.channels;
    b.plan.block_sizes.push_back(n);
    b.plan.block_spatial.push_back(b.spatial);

    for (int li = 1; li <= n; ++li) {
      const std::string prefix = "block" + std::to_string(bi) + ".layer" + std::to_string(li);
      const int m = c_in + (li - 1) * k;

      LayerSpec cat = b.base(LayerKind::concat_source, bi, li, "composite");
      cat.in_channels = m;
      cat.out_channels = m;
      for (int s = 0; s < li; ++s) cat.sources.push_back(s);
      b.channels = m;
      b.emit(std::move(cat));
      b.plan.dense_edges += li;

      if (config.bottleneck) {
        b.bn(bi, li, "bottleneck", prefix + ".bn1");
        b.relu(bi, li, "bottleneck");
        b.conv(4 * k, 1, 1, 0, bi, li, "bottleneck", prefix + ".conv1");
        b.dropout(rate, bi, li, "bottleneck");
        b.bn(bi, li, "composite", prefix + ".bn2");
        b.relu(bi, li, "composite");
        b.conv(k, 3, 1, 1, bi, li, "composite", prefix + ".conv2");
        b.dropout(rate, bi, li, "composite");
      } else {
        b.bn(bi, li, "composite", prefix + ".bn1");
        b.relu(bi, li, "composite");
        b.conv(k, 3, 1, 1, bi, li, "composite", prefix + ".conv1");
        b.dropout(rate, bi, li, "composite");
      }
    }

    // the block's aggregate output: everything produced so far, in order
    const int m_out = c_in + n * k;
    LayerSpec cat = b.base(LayerKind::concat_source, bi, n + 1, "block_output");
    cat.in_channels = m_out;
    cat.out_channels = m_out;
    for (int s = 0; s <= n; ++s) cat.sources.push_back(s);
    b.channels = m_out;
    b.emit(std::move(cat));

    if (bi < num_blocks) {
      const std::string prefix = "transition" + std::to_string(bi);
      const int compressed = static_cast<int>(std::floor(config.compression_theta * m_out));
      b.bn(bi, 0, "transition", prefix + ".bn");
      b.conv(compressed, 1, 1, 0, bi, 0, "transition", prefix + ".conv");
      b.dropout(rate, bi, 0, "transition");
      LayerSpec pool = b.base(LayerKind::pool_avg, bi, 0, "transition");
      pool.kernel = 2;
      pool.stride = 2;
      pool.out_spatial = b.spatial / 2;
      b.spatial = pool.out_spatial;
      b.emit(std::move(pool));
    }
  }

  b.bn(0, 0, "final", "final.bn");
  b.relu(0, 0, "final");
  LayerSpec gap = b.base(LayerKind::global_pool, 0, 0, "final");
  gap.out_spatial = 1;
  b.spatial = 1;
  b.emit(std::move(gap));
  LayerSpec fc = b.base(LayerKind::linear, 0, 0, "classifier");
  fc.out_channels = config.num_classes;
  fc.param_base = "classifier";
  b.emit(std::move(fc));
  b.plan.total_conv_layers += 1;

  return std::move(b.plan);
}

LayerPlan build_resnet_plan(const ArchConfig& config, int input_size) {
  config.validate();
  if (config.family != Family::resnet_preact) throw UsageError("build_resnet_plan called with a non-resnet config");

  PlanBuilder b;
  b.plan.config = config;
  b.plan.input_size = input_size > 0 ? input_size : 32;
  b.channels = 3;
  b.spatial = b.plan.input_size;

  const std::vector<int> stages = config.layers_per_block();
  b.conv(16, 3, 1, 1, 0, 0, "stem", "stem.conv");

  for (int si = 1; si <= static_cast<int>(stages.size()); ++si) {
    const int units = stages[static_cast<size_t>(si - 1)];
    const int mid = 16 << (si - 1);
    const int out = 4 * mid;
    b.plan.block_sizes.push_back(units);
    b.plan.block_spatial.push_back(si == 1 ? b.spatial : b.spatial / 2);

    for (int ui = 1; ui <= units; ++ui) {
      const std::string prefix = "stage" + std::to_string(si) + ".unit" + std::to_string(ui);
      const int stride = (si > 1 && ui == 1) ? 2 : 1;
      const int in = b.channels;
      const int in_spatial = b.spatial;

      b.bn(si, ui, "unit", prefix + ".bn1");
      b.relu(si, ui, "unit");
      b.conv(mid, 1, 1, 0, si, ui, "unit", prefix + ".conv1");
      b.bn(si, ui, "unit", prefix + ".bn2");
      b.relu(si, ui, "unit");
      b.conv(mid, 3, stride, 1, si, ui, "unit", prefix + ".conv2");
      b.bn(si, ui, "unit", prefix + ".bn3");
      b.relu(si, ui, "unit");
      b.conv(out, 1, 1, 0, si, ui, "unit", prefix + ".conv3");

      if (in != out || stride != 1) {
        // 1x1 projection carrying the skip path across a shape change
        LayerSpec sc;
        sc.kind = LayerKind::conv;
        sc.block = si;
        sc.layer = ui;
        sc.role = "shortcut";
        sc.in_channels = in;
        sc.out_channels = out;
        sc.kernel = 1;
        sc.stride = stride;
        sc.padding = 0;
        sc.in_spatial = in_spatial;
        sc.out_spatial = (in_spatial - 1) / stride + 1;
        sc.param_base = prefix + ".shortcut";
        b.emit(std::move(sc));
        b.plan.total_conv_layers += 1;
      }
    }
  }

  b.bn(0, 0, "final", "final.bn");
  b.relu(0, 0, "final");
  LayerSpec gap = b.base(LayerKind::global_pool, 0, 0, "final");
  gap.out_spatial = 1;
  b.spatial = 1;
  b.emit(std::move(gap));
  LayerSpec fc = b.base(LayerKind::linear, 0, 0, "classifier");
  fc.out_channels = config.num_classes;
  fc.param_base = "classifier";
  b.emit(std::move(fc));
  b.plan.total_conv_layers += 1;

  return std::move(b.plan);
}

LayerPlan build_plan(const ArchConfig& config, int input_size) {
  return config.family == Family::densenet ? build_densenet_plan(config, input_size)
                                           : build_resnet_plan(config, input_size);
}

uint64_t plan_digest(const LayerPlan& plan) {
  json id;
  id["config"] = plan.config.to_json();
  id["input_size"] = plan.input_size;
  const std::string s = id.dump();
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace densekit
