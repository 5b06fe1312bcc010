#pragma once

#include <string>
#include <vector>

#include "densekit/arch.hpp"
#include "json.hpp"

namespace densekit {

// Per-layer cost line. Counting conventions, applied uniformly:
//   conv   params = Cout*Cin*kh*kw (no bias), flops = 2*params*Hout*Wout
//   bn     params = 2*C, flops = one per output element
//   linear params = K*F + K, flops = 2*K*F
//   relu/pool flops = one per output element; concat and dropout are free
// 1 MAC = 2 FLOPs everywhere.
struct LayerAudit {
  int index = 0;
  LayerKind kind = LayerKind::conv;
  std::string role;
  std::string param_base;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int out_spatial = 0;
  long long params = 0;
  long long weight_params = 0;  // conv kernels and linear weights only
  long long flops = 0;
};

struct AuditReport {
  std::string arch_id;
  int input_size = 0;
  std::vector<LayerAudit> layers;
  long long total_params = 0;
  long long weight_params = 0;
  long long bn_params = 0;
  long long bias_params = 0;
  long long total_flops = 0;
  long long total_macs = 0;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

// short printable identity like "densenet40-k12" or "resnet164"
std::string arch_id(const ArchConfig& config);

// "1019722 -> 1.0" (millions, one decimal)
std::string params_in_millions(long long params);

AuditReport count_params(const LayerPlan& plan);
// costs at a specific input resolution; rebuilds the plan when it differs
AuditReport count_flops(const LayerPlan& plan, int input_resolution);

}  // namespace densekit
