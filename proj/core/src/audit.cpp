#include "densekit/audit.hpp"

#include <cstdio>
#include <sstream>

#include "densekit/errors.hpp"

namespace densekit {

using nlohmann::json;

std::string arch_id(const ArchConfig& config) {
  std::ostringstream out;
  if (config.family == Family::resnet_preact) {
    out << "resnet" << config.depth_L;
    return out.str();
  }
  out << "densenet";
  if (config.bottleneck && config.compression_theta < 1.0) out << "-bc";
  else if (config.bottleneck) out << "-b";
  else if (config.compression_theta < 1.0) out << "-c";
  out << (config.depth_L > 0 ? config.depth_L : config.derived_depth());
  out << "-k" << config.growth_k;
  if (config.dataset_family == DatasetFamily::imagenet_style) out << "-imagenet";
  return out.str();
}

std::string params_in_millions(long long params) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", static_cast<double>(params) / 1e6);
  return buf;
}

namespace {

AuditReport audit_plan(const LayerPlan& plan) {
  AuditReport r;
  r.arch_id = arch_id(plan.config);
  r.input_size = plan.input_size;
  int index = 0;
  for (const LayerSpec& l : plan.layers) {
    LayerAudit a;
    a.index = index++;
    a.kind = l.kind;
    a.role = l.role;
    a.param_base = l.param_base;
    a.in_channels = l.in_channels;
    a.out_channels = l.out_channels;
    a.kernel = l.kernel;
    a.stride = l.stride;
    a.out_spatial = l.out_spatial;
    const long long out_hw = static_cast<long long>(l.out_spatial) * l.out_spatial;
    switch (l.kind) {
      case LayerKind::conv: {
        const long long w = static_cast<long long>(l.out_channels) * l.in_channels * l.kernel * l.kernel;
        a.params = w;
        a.weight_params = w;
        a.flops = 2 * w * out_hw;
        break;
      }
      case LayerKind::bn:
        a.params = 2LL * l.out_channels;
        r.bn_params += a.params;
        a.flops = static_cast<long long>(l.out_channels) * out_hw;
        break;
      case LayerKind::relu:
        a.flops = static_cast<long long>(l.out_channels) * out_hw;
        break;
      case LayerKind::pool_avg:
      case LayerKind::pool_max:
        a.flops = static_cast<long long>(l.out_channels) * out_hw;
        break;
      case LayerKind::global_pool:
        a.flops = l.out_channels;
        break;
      case LayerKind::linear: {
        const long long w = static_cast<long long>(l.out_channels) * l.in_channels;
        a.params = w + l.out_channels;
        a.weight_params = w;
        r.bias_params += l.out_channels;
        a.flops = 2 * w;
        break;
      }
      case LayerKind::concat_source:
      case LayerKind::dropout:
        break;
    }
    r.total_params += a.params;
    r.weight_params += a.weight_params;
    r.total_flops += a.flops;
    r.layers.push_back(std::move(a));
  }
  // only multiply-accumulate layers contribute MACs
  for (const LayerAudit& a : r.layers) {
    if (a.kind == LayerKind::conv || a.kind == LayerKind::linear) r.total_macs += a.flops / 2;
  }
  return r;
}

}  // namespace

AuditReport count_params(const LayerPlan& plan) { return audit_plan(plan); }

AuditReport count_flops(const LayerPlan& plan, int input_resolution) {
  if (input_resolution <= 0) throw ConfigError("input_resolution must be positive");
  if (input_resolution == plan.input_size) return audit_plan(plan);
  return audit_plan(build_plan(plan.config, input_resolution));
}

json AuditReport::to_json() const {
  json j;
  j["arch"] = arch_id;
  j["input_size"] = input_size;
  j["convention"] = {{"conv_bias", false},
                     {"bn_params_per_channel", 2},
                     {"flops_per_mac", 2}};
  j["totals"] = {{"params", total_params},
                 {"weight_params", weight_params},
                 {"bn_params", bn_params},
                 {"bias_params", bias_params},
                 {"params_millions", params_in_millions(total_params)},
                 {"flops", total_flops},
                 {"macs", total_macs}};
  json layers = json::array();
  for (const LayerAudit& a : this->layers) {
    json lj;
    lj["index"] = a.index;
    lj["kind"] = to_string(a.kind);
    lj["role"] = a.role;
    if (!a.param_base.empty()) lj["name"] = a.param_base;
    lj["in_channels"] = a.in_channels;
    lj["out_channels"] = a.out_channels;
    lj["kernel"] = a.kernel;
    lj["stride"] = a.stride;
    lj["out_spatial"] = a.out_spatial;
    lj["params"] = a.params;
    lj["flops"] = a.flops;
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

std::string AuditReport::to_table() const {
  std::ostringstream out;
  char line[256];
  out << "arch " << arch_id << "  input " << input_size << "x" << input_size
      << "  (flops count multiply and add separately; 1 MAC = 2 FLOPs)\n";
  std::snprintf(line, sizeof(line), "%5s  %-13s  %6s  %6s  %6s  %6s  %11s  %12s  %16s\n", "index", "kind", "in_ch",
                "out_ch", "kernel", "stride", "out_spatial", "params", "flops");
  out << line;
  for (const LayerAudit& a : layers) {
    std::snprintf(line, sizeof(line), "%5d  %-13s  %6d  %6d  %6d  %6d  %11d  %12lld  %16lld\n", a.index,
                  to_string(a.kind).c_str(), a.in_channels, a.out_channels, a.kernel, a.stride, a.out_spatial,
                  a.params, a.flops);
    out << line;
  }
  std::snprintf(line, sizeof(line),
                "total params %lld (%sM)  weight-only %lld  bn %lld  bias %lld  flops %lld  macs %lld\n",
                total_params, params_in_millions(total_params).c_str(), weight_params, bn_params, bias_params,
                total_flops, total_macs);
  out << line;
  return out.str();
}

}  // namespace densekit
