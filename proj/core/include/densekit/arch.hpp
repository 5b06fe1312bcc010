#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace densekit {

enum class Family { densenet, resnet_preact };
enum class DatasetFamily { cifar_style, imagenet_style };

std::string to_string(Family f);
std::string to_string(DatasetFamily f);
Family family_from_string(const std::string& s);
DatasetFamily dataset_family_from_string(const std::string& s);

// Architecture knobs. Everything else (per-block layer counts, stem width,
// channel bookkeeping) is derived from these.
struct ArchConfig {
  Family family = Family::densenet;
  int depth_L = 0;  // total counted depth; 0 means "derive from block_layers"
  int growth_k = 12;
  bool bottleneck = false;
  double compression_theta = 1.0;
  DatasetFamily dataset_family = DatasetFamily::cifar_style;
  std::vector<int> block_layers;  // optional; required for imagenet_style
  int num_classes = 10;
  double dropout_rate = 0.0;

  // stem width: 16 for the plain CIFAR nets, 2k when bottlenecked or imagenet
  int initial_channels() const;
  // layers per dense block (or units per stage for resnet_preact), after
  // resolving depth_L against block_layers
  std::vector<int> layers_per_block() const;
  // depth recomputed from the resolved block layout
  int derived_depth() const;
  // throws ConfigError naming the violated constraint
  void validate() const;

  // strict parse: unknown keys are rejected
  static ArchConfig from_json(const nlohmann::json& j);
  static ArchConfig from_json_file(const std::string& path);
  nlohmann::json to_json() const;

  bool operator==(const ArchConfig&) const = default;
};

enum class LayerKind { conv, bn, relu, pool_avg, pool_max, global_pool, concat_source, linear, dropout };

std::string to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

// One step of the executable/auditable program. Only the fields that apply to
// `kind` are meaningful; the rest stay at their defaults.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int in_spatial = 0;   // square feature map extent entering this layer
  int out_spatial = 0;  // and leaving it
  double rate = 0.0;    // dropout only
  // provenance within the network
  int block = 0;  // 1-based dense block (or resnet stage); 0 = stem/final/classifier
  int layer = 0;  // 1-based layer within the block; 0 otherwise
  std::vector<int> sources;  // concat_source: which previous outputs feed in (0 = block input)
  std::string role;          // "stem", "composite", "bottleneck", "transition", "block_output",
                             // "final", "classifier", "unit", "shortcut"
  std::string param_base;    // parameter name prefix for layers that own parameters

  bool operator==(const LayerSpec&) const = default;
};

// Fully resolved architecture: an ordered layer program plus summary counts.
struct LayerPlan {
  ArchConfig config;
  int input_size = 32;
  int input_channels = 3;
  std::vector<LayerSpec> layers;

  // summary, derived while building
  std::vector<int> block_sizes;    // layers per block / units per stage
  std::vector<int> block_spatial;  // feature map extent inside each block
  int total_conv_layers = 0;   // conv + linear layers
  int64_t dense_edges = 0;         // number of (source, target) pairs wired by concats

  nlohmann::json to_json() const;
  static LayerPlan from_json(const nlohmann::json& j);

  bool operator==(const LayerPlan&) const = default;
};

// input_size 0 picks the family default (32 for cifar_style, 224 for imagenet_style)
LayerPlan build_densenet_plan(const ArchConfig& config, int input_size = 0);
LayerPlan build_resnet_plan(const ArchConfig& config, int input_size = 0);
LayerPlan build_plan(const ArchConfig& config, int input_size = 0);

// FNV-1a over the canonical config + input size JSON; used to detect
// checkpoint/architecture mismatches
uint64_t plan_digest(const LayerPlan& plan);

}  // namespace densekit
