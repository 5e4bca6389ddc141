#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "hce/common.hpp"
#include "hce/data.hpp"
#include "hce/net.hpp"
#include "hce/tensor.hpp"

namespace hce {

enum class WeightScheme { SymmetricPerTensor };
enum class ActScheme { AsymmetricPerTensorMinMax };

struct QuantConfig {
  int weight_bits = 8;
  int activation_bits = 8;
  int calibration_batches = 4;
  WeightScheme weight_scheme = WeightScheme::SymmetricPerTensor;
  ActScheme activation_scheme = ActScheme::AsymmetricPerTensorMinMax;
  bool exempt_first_last = false;  // skip stem and classifier weights
};

inline void validate_quant_config(const QuantConfig& cfg) {
  if (cfg.weight_bits < 2 || cfg.weight_bits > 32)
    throw ConfigError("weight_bits must be in [2,32], got " + std::to_string(cfg.weight_bits));
  if (cfg.activation_bits < 2 || cfg.activation_bits > 32)
    throw ConfigError("activation_bits must be in [2,32], got " +
                      std::to_string(cfg.activation_bits));
  if (cfg.calibration_batches < 1) throw ConfigError("calibration_batches must be >= 1");
}

struct QuantTensorMeta {
  double scale = 1.0;
  int zero_point = 0;
  int bits = 8;
};

// Model Q: weights snapped to per-tensor symmetric grids plus calibrated
// activation ranges for fake-quantized inference.
struct QuantizedModel {
  ParameterStore grid_weights;
  std::map<std::string, QuantTensorMeta> weight_meta;
  std::map<std::string, std::pair<double, double>> activation_ranges;  // node id -> (min, max)
  QuantConfig config;
};

struct QuantizedTensor {
  std::vector<float> values;  // on-grid
  double scale = 1.0;
  int zero_point = 0;
};

// Uniform symmetric quantization: scale = max|v| / (2^(bits-1) - 1), values
// snapped to the nearest level with ties rounded half away from zero.
// An all-zero tensor gets scale 1 and stays zero.
inline QuantizedTensor quantize_tensor(const std::vector<float>& values, int bits,
                                       WeightScheme scheme = WeightScheme::SymmetricPerTensor) {
  (void)scheme;
  if (bits < 2 || bits > 32) throw ConfigError("quantize_tensor: bits must be in [2,32]");
  double maxabs = 0.0;
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError("quantize_tensor: non-finite input value");
    maxabs = std::max(maxabs, std::abs(static_cast<double>(v)));
  }
  const double qmax = std::pow(2.0, bits - 1) - 1.0;
  QuantizedTensor out;
  out.zero_point = 0;
  out.values.resize(values.size());
  if (maxabs == 0.0) {
    out.scale = 1.0;
    return out;  // all zeros already
  }
  out.scale = maxabs / qmax;
  for (size_t i = 0; i < values.size(); ++i) {
    double q = std::round(static_cast<double>(values[i]) / out.scale);  // half away from zero
    q = std::clamp(q, -qmax, qmax);
    out.values[i] = static_cast<float>(q * out.scale);
  }
  return out;
}

// Min/max ranges of every layer's activations over the calibration batches.
// Degenerate constant layers widen to [min, min + eps]; their ids are
// reported through `warnings` when provided.
inline std::map<std::string, std::pair<double, double>> calibrate(
    const ParameterStore& model, const std::vector<Batch>& batches, const QuantConfig& cfg,
    std::vector<std::string>* warnings = nullptr) {
  validate_quant_config(cfg);
  if (static_cast<int>(batches.size()) < cfg.calibration_batches)
    throw InputError("calibrate: need " + std::to_string(cfg.calibration_batches) +
                     " calibration batches, got " + std::to_string(batches.size()));
  GraphDef g = model.graph();
  std::map<std::string, std::pair<double, double>> ranges;
  for (int bi = 0; bi < cfg.calibration_batches; ++bi) {
    ActivationCache cache;
    forward(g, model, batches[static_cast<size_t>(bi)].inputs, nullptr, &cache);
    for (size_t i = 0; i < g.nodes.size(); ++i) {
      const NodeDef& n = g.nodes[i];
      if (n.kind == OpKind::Input) continue;
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      for (float v : cache.values[i].data) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
      }
      auto it = ranges.find(n.id);
      if (it == ranges.end())
        ranges.emplace(n.id, std::make_pair(lo, hi));
      else {
        it->second.first = std::min(it->second.first, lo);
        it->second.second = std::max(it->second.second, hi);
      }
    }
  }
  constexpr double kEps = 1e-6;
  for (auto& [id, r] : ranges) {
    if (r.first == r.second) {
      r.second = r.first + kEps;
      if (warnings) warnings->push_back("degenerate constant activation at layer " + id);
    }
  }
  return ranges;
}

// Post-training quantization of a trained model: every parameter tensor is
// snapped to its own symmetric grid, then activation ranges are calibrated on
// the grid-weight model. The input model is untouched.
inline QuantizedModel quantize_model(const ParameterStore& model, const std::vector<Batch>& batches,
                                     const QuantConfig& cfg,
                                     std::vector<std::string>* warnings = nullptr) {
  validate_quant_config(cfg);
  QuantizedModel q;
  q.config = cfg;
  q.grid_weights.spec = model.spec;
  q.grid_weights.channel_overrides = model.channel_overrides;
  q.grid_weights.seed = model.seed;
  q.grid_weights.step = model.step;
  for (const auto& name : model.order) {
    const Tensor& t = model.at(name);
    const bool exempt = cfg.exempt_first_last &&
                        (name.rfind("stem.", 0) == 0 || name.rfind("fc.", 0) == 0);
    if (exempt) {
      q.grid_weights.add(name, t);
      continue;
    }
    QuantizedTensor qt;
    try {
      qt = quantize_tensor(t.data, cfg.weight_bits, cfg.weight_scheme);
    } catch (const std::exception& e) {
      throw NumericError("quantize_model: tensor " + name + ": " + e.what());
    }
    q.grid_weights.add(name, Tensor(t.shape, std::move(qt.values)));
    q.weight_meta[name] = {qt.scale, qt.zero_point, cfg.weight_bits};
  }
  q.activation_ranges = calibrate(q.grid_weights, batches, cfg, warnings);
  return q;
}

// Fake-quantized inference: forward on the grid weights with every hidden
// layer's activations snapped to its calibrated asymmetric grid.
inline Tensor forward_quantized(const QuantizedModel& q, const Tensor& batch) {
  GraphDef g = q.grid_weights.graph();
  ActQuantHook hook;
  hook.bits = q.config.activation_bits;
  hook.ranges = &q.activation_ranges;
  return forward(g, q.grid_weights, batch, &hook);
}

inline uint64_t fingerprint_quantized(const QuantizedModel& q) {
  uint64_t h = fingerprint_params(q.grid_weights);
  for (const auto& [name, meta] : q.weight_meta) {
    h = fnv1a(name, h);
    h = fnv1a(&meta.scale, sizeof(meta.scale), h);
    h = fnv1a(&meta.bits, sizeof(meta.bits), h);
  }
  for (const auto& [name, r] : q.activation_ranges) {
    h = fnv1a(name, h);
    h = fnv1a(&r.first, sizeof(r.first), h);
    h = fnv1a(&r.second, sizeof(r.second), h);
  }
  h = fnv1a(&q.config.activation_bits, sizeof(int), h);
  return h;
}

}  // namespace hce
