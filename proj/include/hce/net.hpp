#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hce/common.hpp"
#include "hce/rng.hpp"
#include "hce/tensor.hpp"

namespace hce {

enum class Family { Residual, Plain };

inline std::string family_name(Family f) { return f == Family::Residual ? "residual" : "plain"; }

inline Family family_from_name(const std::string& s) {
  if (s == "residual") return Family::Residual;
  if (s == "plain") return Family::Plain;
  throw ConfigError("unknown model family '" + s + "' (expected residual|plain)");
}

struct NetworkSpec {
  Family family = Family::Residual;
  int depth = 20;
  int num_classes = 10;
  std::array<int, 3> input_shape = {3, 32, 32};  // C, H, W
  double width_multiplier = 1.0;
};

inline void validate_spec(const NetworkSpec& spec) {
  if (spec.family == Family::Residual) {
    if (spec.depth < 8 || (spec.depth - 2) % 6 != 0)
      throw ConfigError("depth must be 6n+2 for the residual family, got " +
                        std::to_string(spec.depth));
  } else {
    if (spec.depth < 2)
      throw ConfigError("plain family depth must be >= 2, got " + std::to_string(spec.depth));
  }
  if (spec.num_classes < 2)
    throw ConfigError("num_classes must be >= 2, got " + std::to_string(spec.num_classes));
  for (int d : spec.input_shape)
    if (d < 1) throw ConfigError("input_shape dimensions must be positive");
  if (!(spec.width_multiplier > 0.0)) throw ConfigError("width_multiplier must be positive");
}

inline std::string spec_str(const NetworkSpec& s) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s-d%d-k%d-in%dx%dx%d-w%.6g", family_name(s.family).c_str(),
                s.depth, s.num_classes, s.input_shape[0], s.input_shape[1], s.input_shape[2],
                s.width_multiplier);
  return buf;
}

// ---------------------------------------------------------------------------
// Computation graph. Built deterministically from a NetworkSpec, with optional
// per-layer filter-count overrides used by compacted (pruned) models.
// ---------------------------------------------------------------------------

enum class OpKind { Input, Conv, Relu, Add, DownsamplePad, GlobalAvgPool, Dense };

struct NodeDef {
  OpKind kind = OpKind::Input;
  std::string id;
  int in0 = -1;  // producer node index
  int in1 = -1;  // second producer (Add only)
  // Conv / Dense / DownsamplePad geometry.
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  bool prunable = false;  // structured-pruning candidate (conv output filters)
  // Static output extent, filled by the builder.
  int out_h = 0;
  int out_w = 0;
};

struct GraphDef {
  NetworkSpec spec;
  std::map<std::string, int> channel_overrides;  // conv id -> reduced out_ch
  std::vector<NodeDef> nodes;
  int output = -1;

  const NodeDef& node(int i) const { return nodes[static_cast<size_t>(i)]; }
  int find(const std::string& id) const {
    for (size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].id == id) return static_cast<int>(i);
    return -1;
  }
};

namespace detail {

inline int conv_out(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

struct GraphBuilder {
  GraphDef g;

  int add(NodeDef n) {
    g.nodes.push_back(std::move(n));
    return static_cast<int>(g.nodes.size()) - 1;
  }

  int conv(const std::string& id, int from, int out_ch, int k, int stride, int pad,
           bool prunable) {
    const NodeDef& src = g.node(from);
    NodeDef n;
    n.kind = OpKind::Conv;
    n.id = id;
    n.in0 = from;
    n.in_ch = src.out_ch;
    auto it = g.channel_overrides.find(id);
    if (it != g.channel_overrides.end()) {
      if (!prunable) throw InputError("channel override on non-prunable layer " + id);
      if (it->second < 1 || it->second > out_ch)
        throw InputError("channel override for " + id + " out of range");
      out_ch = it->second;
    }
    n.out_ch = out_ch;
    n.kernel = k;
    n.stride = stride;
    n.pad = pad;
    n.prunable = prunable;
    n.out_h = conv_out(src.out_h, k, stride, pad);
    n.out_w = conv_out(src.out_w, k, stride, pad);
    return add(n);
  }

  int relu(const std::string& id, int from) {
    const NodeDef& src = g.node(from);
    NodeDef n;
    n.kind = OpKind::Relu;
    n.id = id;
    n.in0 = from;
    n.out_ch = src.out_ch;
    n.out_h = src.out_h;
    n.out_w = src.out_w;
    return add(n);
  }

  int addop(const std::string& id, int a, int b) {
    const NodeDef& na = g.node(a);
    const NodeDef& nb = g.node(b);
    if (na.out_ch != nb.out_ch || na.out_h != nb.out_h || na.out_w != nb.out_w)
      throw InputError("residual add shape mismatch at " + id);
    NodeDef n;
    n.kind = OpKind::Add;
    n.id = id;
    n.in0 = a;
    n.in1 = b;
    n.out_ch = na.out_ch;
    n.out_h = na.out_h;
    n.out_w = na.out_w;
    return add(n);
  }

  // Identity shortcut across a stage transition: stride-2 spatial subsample
  // plus zero-padded channels (parameter-free).
  int downsample(const std::string& id, int from, int out_ch) {
    const NodeDef& src = g.node(from);
    NodeDef n;
    n.kind = OpKind::DownsamplePad;
    n.id = id;
    n.in0 = from;
    n.in_ch = src.out_ch;
    n.out_ch = out_ch;
    n.stride = 2;
    n.out_h = (src.out_h + 1) / 2;
    n.out_w = (src.out_w + 1) / 2;
    return add(n);
  }

  int gap(const std::string& id, int from) {
    const NodeDef& src = g.node(from);
    NodeDef n;
    n.kind = OpKind::GlobalAvgPool;
    n.id = id;
    n.in0 = from;
    n.out_ch = src.out_ch;
    n.out_h = 1;
    n.out_w = 1;
    return add(n);
  }

  int dense(const std::string& id, int from, int out_features) {
    const NodeDef& src = g.node(from);
    NodeDef n;
    n.kind = OpKind::Dense;
    n.id = id;
    n.in0 = from;
    n.in_ch = src.out_ch * src.out_h * src.out_w;
    n.out_ch = out_features;
    n.out_h = 1;
    n.out_w = 1;
    return add(n);
  }
};

inline int scaled_width(int base, double mult) {
  return std::max(1, static_cast<int>(std::lround(base * mult)));
}

}  // namespace detail

inline GraphDef build_graph(const NetworkSpec& spec,
                            const std::map<std::string, int>& channel_overrides = {}) {
  validate_spec(spec);
  detail::GraphBuilder b;
  b.g.spec = spec;
  b.g.channel_overrides = channel_overrides;

  NodeDef input;
  input.kind = OpKind::Input;
  input.id = "input";
  input.out_ch = spec.input_shape[0];
  input.out_h = spec.input_shape[1];
  input.out_w = spec.input_shape[2];
  int cur = b.add(input);

  const int w16 = detail::scaled_width(16, spec.width_multiplier);
  const int w32 = detail::scaled_width(32, spec.width_multiplier);
  const int w64 = detail::scaled_width(64, spec.width_multiplier);
  const std::array<int, 3> stage_ch = {w16, w32, w64};

  if (spec.family == Family::Residual) {
    const int n = (spec.depth - 2) / 6;
    cur = b.conv("stem", cur, w16, 3, 1, 1, false);
    cur = b.relu("stem.relu", cur);
    for (int s = 0; s < 3; ++s) {
      for (int blk = 0; blk < n; ++blk) {
        const std::string p = "s" + std::to_string(s) + ".b" + std::to_string(blk);
        const bool transition = (s > 0 && blk == 0);
        const int skip_in = cur;
        int c1 = b.conv(p + ".c1", cur, stage_ch[static_cast<size_t>(s)], 3, transition ? 2 : 1,
                        1, true);
        int r1 = b.relu(p + ".relu1", c1);
        int c2 = b.conv(p + ".c2", r1, stage_ch[static_cast<size_t>(s)], 3, 1, 1, false);
        int skip = transition
                       ? b.downsample(p + ".skip", skip_in, stage_ch[static_cast<size_t>(s)])
                       : skip_in;
        int sum = b.addop(p + ".add", c2, skip);
        cur = b.relu(p + ".relu2", sum);
      }
    }
  } else {
    // Plain stack: depth-1 convs in three width stages, stride 2 at the
    // stage boundaries, then global pooling and the classifier.
    const int n_convs = spec.depth - 1;
    const int t1 = n_convs / 3;
    const int t2 = (2 * n_convs) / 3;
    for (int i = 0; i < n_convs; ++i) {
      const int stage = (i < t1) ? 0 : (i < t2) ? 1 : 2;
      const bool transition = (n_convs >= 3) && (i == t1 || i == t2);
      const std::string id = "conv" + std::to_string(i);
      cur = b.conv(id, cur, stage_ch[static_cast<size_t>(stage)], 3, transition ? 2 : 1, 1, true);
      cur = b.relu(id + ".relu", cur);
    }
  }

  cur = b.gap("gap", cur);
  cur = b.dense("fc", cur, spec.num_classes);
  b.g.output = cur;
  return b.g;
}

// ---------------------------------------------------------------------------
// ParameterStore: the weights of one model variant, self-describing via its
// NetworkSpec plus optional compaction overrides.
// ---------------------------------------------------------------------------

struct ParameterStore {
  NetworkSpec spec;
  std::map<std::string, int> channel_overrides;
  uint64_t seed = 0;
  int64_t step = 0;

  std::vector<std::string> order;
  std::unordered_map<std::string, Tensor> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InputError("no parameter tensor named " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InputError("no parameter tensor named " + name);
    return it->second;
  }

  void add(const std::string& name, Tensor t) {
    if (has(name)) throw InputError("duplicate parameter tensor " + name);
    order.push_back(name);
    tensors.emplace(name, std::move(t));
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& name : order) n += at(name).numel();
    return n;
  }

  GraphDef graph() const { return build_graph(spec, channel_overrides); }
};

inline uint64_t fingerprint_arch(const NetworkSpec& spec,
                                 const std::map<std::string, int>& overrides = {}) {
  uint64_t h = fnv1a(spec_str(spec));
  for (const auto& [k, v] : overrides) {
    h = fnv1a(k, h);
    h = fnv1a(&v, sizeof(v), h);
  }
  return h;
}

inline uint64_t fingerprint_params(const ParameterStore& store) {
  uint64_t h = fingerprint_arch(store.spec, store.channel_overrides);
  for (const auto& name : store.order) {
    h = fnv1a(name, h);
    h = fingerprint_tensor(store.at(name), h);
  }
  return h;
}

// He-normal initialization for conv and dense weights, zero biases.
// Deterministic for a fixed (spec, seed).
inline ParameterStore build_model(const NetworkSpec& spec, uint64_t seed,
                                  const std::map<std::string, int>& channel_overrides = {}) {
  GraphDef g = build_graph(spec, channel_overrides);
  ParameterStore store;
  store.spec = spec;
  store.channel_overrides = channel_overrides;
  store.seed = seed;
  Rng rng = Rng(seed).fork("init");
  for (const NodeDef& n : g.nodes) {
    if (n.kind == OpKind::Conv) {
      Tensor w({n.out_ch, n.in_ch, n.kernel, n.kernel});
      const double std = std::sqrt(2.0 / (static_cast<double>(n.in_ch) * n.kernel * n.kernel));
      for (auto& v : w.data) v = static_cast<float>(rng.normal(0.0, std));
      store.add(n.id + ".w", std::move(w));
      store.add(n.id + ".b", Tensor({n.out_ch}));
    } else if (n.kind == OpKind::Dense) {
      Tensor w({n.out_ch, n.in_ch});
      const double std = std::sqrt(2.0 / static_cast<double>(n.in_ch));
      for (auto& v : w.data) v = static_cast<float>(rng.normal(0.0, std));
      store.add(n.id + ".w", std::move(w));
      store.add(n.id + ".b", Tensor({n.out_ch}));
    }
  }
  return store;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

// Per-tensor activation fake-quantization hook (see quantize.hpp).
struct ActQuantHook {
  int bits = 32;
  // node id -> calibrated (min, max)
  const std::map<std::string, std::pair<double, double>>* ranges = nullptr;
};

struct ActivationCache {
  std::vector<Tensor> values;  // one per graph node
};

namespace detail {

inline void conv_forward(const Tensor& in, const Tensor& w, const Tensor& b, const NodeDef& n,
                         Tensor& out) {
  const int N = in.dim(0), C = n.in_ch, H = in.dim(2), W = in.dim(3);
  const int F = n.out_ch, K = n.kernel, S = n.stride, P = n.pad;
  const int Ho = n.out_h, Wo = n.out_w;
  const float* ip = in.ptr();
  const float* wp = w.ptr();
  const float* bp = b.ptr();
  float* op = out.ptr();
  for (int nn = 0; nn < N; ++nn) {
    for (int f = 0; f < F; ++f) {
      float* obase = op + (static_cast<int64_t>(nn) * F + f) * Ho * Wo;
      const float bias = bp[f];
      for (int i = 0; i < Ho * Wo; ++i) obase[i] = bias;
      for (int c = 0; c < C; ++c) {
        const float* ibase = ip + (static_cast<int64_t>(nn) * C + c) * H * W;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            const float wv = wp[((static_cast<int64_t>(f) * C + c) * K + kh) * K + kw];
            if (wv == 0.0f) continue;
            // valid output column range for this kernel tap
            int olo = 0;
            while (olo < Wo && olo * S - P + kw < 0) ++olo;
            int ohi = Wo;
            while (ohi > olo && (ohi - 1) * S - P + kw >= W) --ohi;
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * S - P + kh;
              if (ih < 0 || ih >= H) continue;
              const float* irow = ibase + static_cast<int64_t>(ih) * W;
              float* orow = obase + static_cast<int64_t>(oh) * Wo;
              const int off = kw - P;
              for (int ow = olo; ow < ohi; ++ow) orow[ow] += wv * irow[ow * S + off];
            }
          }
        }
      }
    }
  }
}

inline void conv_backward(const Tensor& in, const Tensor& w, const NodeDef& n, const Tensor& dout,
                          Tensor& din, Tensor& dw, Tensor& db) {
  const int N = in.dim(0), C = n.in_ch, H = in.dim(2), W = in.dim(3);
  const int F = n.out_ch, K = n.kernel, S = n.stride, P = n.pad;
  const int Ho = n.out_h, Wo = n.out_w;
  const float* ip = in.ptr();
  const float* wp = w.ptr();
  const float* gp = dout.ptr();
  float* dip = din.ptr();
  float* dwp = dw.ptr();
  float* dbp = db.ptr();
  for (int nn = 0; nn < N; ++nn) {
    for (int f = 0; f < F; ++f) {
      const float* gbase = gp + (static_cast<int64_t>(nn) * F + f) * Ho * Wo;
      float acc = 0.0f;
      for (int i = 0; i < Ho * Wo; ++i) acc += gbase[i];
      dbp[f] += acc;
      for (int c = 0; c < C; ++c) {
        const float* ibase = ip + (static_cast<int64_t>(nn) * C + c) * H * W;
        float* dibase = dip + (static_cast<int64_t>(nn) * C + c) * H * W;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            const int64_t widx = ((static_cast<int64_t>(f) * C + c) * K + kh) * K + kw;
            const float wv = wp[widx];
            float dw_acc = 0.0f;
            int olo = 0;
            while (olo < Wo && olo * S - P + kw < 0) ++olo;
            int ohi = Wo;
            while (ohi > olo && (ohi - 1) * S - P + kw >= W) --ohi;
            const int off = kw - P;
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * S - P + kh;
              if (ih < 0 || ih >= H) continue;
              const float* irow = ibase + static_cast<int64_t>(ih) * W;
              float* dirow = dibase + static_cast<int64_t>(ih) * W;
              const float* grow = gbase + static_cast<int64_t>(oh) * Wo;
              for (int ow = olo; ow < ohi; ++ow) {
                const float g = grow[ow];
                dw_acc += g * irow[ow * S + off];
                dirow[ow * S + off] += g * wv;
              }
            }
            dwp[widx] += dw_acc;
          }
        }
      }
    }
  }
}

// Round half away from zero; snap x to the asymmetric b-bit grid over [lo,hi].
inline float fake_quant_act(float x, double lo, double step, double levels_minus_1) {
  double q = std::round((static_cast<double>(x) - lo) / step);
  if (q < 0.0) q = 0.0;
  if (q > levels_minus_1) q = levels_minus_1;
  return static_cast<float>(lo + q * step);
}

}  // namespace detail

// Forward pass over the whole graph. Returns N x K scores. When `hook` is
// given, every non-output node's activations are snapped to the calibrated
// grid before consumers read them. When `cache` is given, per-node outputs
// are kept for backward().
inline Tensor forward(const GraphDef& g, const ParameterStore& params, const Tensor& batch,
                      const ActQuantHook* hook = nullptr, ActivationCache* cache = nullptr) {
  if (batch.shape.size() != 4 || batch.dim(1) != g.spec.input_shape[0] ||
      batch.dim(2) != g.spec.input_shape[1] || batch.dim(3) != g.spec.input_shape[2])
    throw InputError("batch shape " + shape_str(batch.shape) + " does not match model input " +
                     shape_str({-1, g.spec.input_shape[0], g.spec.input_shape[1],
                                g.spec.input_shape[2]}));
  const int N = batch.dim(0);
  if (N < 1) throw InputError("batch must contain at least one sample");

  std::vector<Tensor> acts(g.nodes.size());
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const NodeDef& n = g.nodes[i];
    switch (n.kind) {
      case OpKind::Input:
        acts[i] = batch;
        break;
      case OpKind::Conv: {
        acts[i] = Tensor({N, n.out_ch, n.out_h, n.out_w});
        detail::conv_forward(acts[static_cast<size_t>(n.in0)], params.at(n.id + ".w"),
                             params.at(n.id + ".b"), n, acts[i]);
        break;
      }
      case OpKind::Relu: {
        const Tensor& src = acts[static_cast<size_t>(n.in0)];
        acts[i] = Tensor(src.shape);
        for (int64_t j = 0; j < src.numel(); ++j)
          acts[i].data[static_cast<size_t>(j)] =
              src.data[static_cast<size_t>(j)] > 0.0f ? src.data[static_cast<size_t>(j)] : 0.0f;
        break;
      }
      case OpKind::Add: {
        const Tensor& a = acts[static_cast<size_t>(n.in0)];
        const Tensor& b = acts[static_cast<size_t>(n.in1)];
        acts[i] = Tensor(a.shape);
        for (int64_t j = 0; j < a.numel(); ++j)
          acts[i].data[static_cast<size_t>(j)] =
              a.data[static_cast<size_t>(j)] + b.data[static_cast<size_t>(j)];
        break;
      }
      case OpKind::DownsamplePad: {
        const Tensor& src = acts[static_cast<size_t>(n.in0)];
        acts[i] = Tensor({N, n.out_ch, n.out_h, n.out_w});
        const int C = n.in_ch, H = src.dim(2), W = src.dim(3);
        for (int nn = 0; nn < N; ++nn)
          for (int c = 0; c < std::min(C, n.out_ch); ++c)
            for (int oh = 0; oh < n.out_h; ++oh)
              for (int ow = 0; ow < n.out_w; ++ow) {
                const int ih = oh * 2, iw = ow * 2;
                if (ih < H && iw < W)
                  acts[i].data[static_cast<size_t>(
                      ((static_cast<int64_t>(nn) * n.out_ch + c) * n.out_h + oh) * n.out_w +
                      ow)] =
                      src.data[static_cast<size_t>(
                          ((static_cast<int64_t>(nn) * C + c) * H + ih) * W + iw)];
              }
        break;
      }
      case OpKind::GlobalAvgPool: {
        const Tensor& src = acts[static_cast<size_t>(n.in0)];
        const int C = src.dim(1), H = src.dim(2), W = src.dim(3);
        acts[i] = Tensor({N, C, 1, 1});
        const float inv = 1.0f / static_cast<float>(H * W);
        for (int nn = 0; nn < N; ++nn)
          for (int c = 0; c < C; ++c) {
            const float* p = src.ptr() + (static_cast<int64_t>(nn) * C + c) * H * W;
            float s = 0.0f;
            for (int j = 0; j < H * W; ++j) s += p[j];
            acts[i].data[static_cast<size_t>(nn) * C + static_cast<size_t>(c)] = s * inv;
          }
        break;
      }
      case OpKind::Dense: {
        const Tensor& src = acts[static_cast<size_t>(n.in0)];
        const Tensor& w = params.at(n.id + ".w");
        const Tensor& b = params.at(n.id + ".b");
        acts[i] = Tensor({N, n.out_ch});
        for (int nn = 0; nn < N; ++nn) {
          const float* x = src.ptr() + static_cast<int64_t>(nn) * n.in_ch;
          for (int o = 0; o < n.out_ch; ++o) {
            const float* wr = w.ptr() + static_cast<int64_t>(o) * n.in_ch;
            float s = b.data[static_cast<size_t>(o)];
            for (int j = 0; j < n.in_ch; ++j) s += wr[j] * x[j];
            acts[i].data[static_cast<size_t>(nn) * n.out_ch + static_cast<size_t>(o)] = s;
          }
        }
        break;
      }
    }
    if (hook && static_cast<int>(i) != g.output && n.kind != OpKind::Input) {
      auto it = hook->ranges->find(n.id);
      if (it == hook->ranges->end())
        throw InputError("no calibrated activation range for layer " + n.id);
      const double lo = it->second.first, hi = it->second.second;
      const double levels_minus_1 = std::pow(2.0, hook->bits) - 1.0;
      const double step = (hi - lo) / levels_minus_1;
      for (auto& v : acts[i].data) v = detail::fake_quant_act(v, lo, step, levels_minus_1);
    }
  }
  Tensor scores = acts[static_cast<size_t>(g.output)];
  if (cache) cache->values = std::move(acts);
  return scores;
}

inline Tensor forward(const ParameterStore& params, const Tensor& batch) {
  GraphDef g = params.graph();
  return forward(g, params, batch);
}

// Parameter gradients, keyed like the owning ParameterStore.
struct GradStore {
  std::unordered_map<std::string, Tensor> tensors;
  Tensor& at(const std::string& name) { return tensors.at(name); }
  const Tensor& at(const std::string& name) const { return tensors.at(name); }
};

inline GradStore make_grad_store(const ParameterStore& params) {
  GradStore gs;
  for (const auto& name : params.order) gs.tensors.emplace(name, Tensor(params.at(name).shape));
  return gs;
}

// Reverse pass. `dscores` is dLoss/dScores (N x K); gradients are accumulated
// into `grads`.
inline void backward(const GraphDef& g, const ParameterStore& params,
                     const ActivationCache& cache, const Tensor& dscores, GradStore& grads) {
  std::vector<Tensor> dacts(g.nodes.size());
  const int N = cache.values[0].dim(0);
  dacts[static_cast<size_t>(g.output)] = dscores;
  for (int i = static_cast<int>(g.nodes.size()) - 1; i >= 0; --i) {
    const NodeDef& n = g.nodes[static_cast<size_t>(i)];
    Tensor& dout = dacts[static_cast<size_t>(i)];
    if (dout.data.empty()) continue;  // node not on any gradient path
    switch (n.kind) {
      case OpKind::Input:
        break;
      case OpKind::Conv: {
        const Tensor& in = cache.values[static_cast<size_t>(n.in0)];
        Tensor& din = dacts[static_cast<size_t>(n.in0)];
        if (din.data.empty()) din = Tensor(in.shape);
        detail::conv_backward(in, params.at(n.id + ".w"), n, dout, din, grads.at(n.id + ".w"),
                              grads.at(n.id + ".b"));
        break;
      }
      case OpKind::Relu: {
        const Tensor& out = cache.values[static_cast<size_t>(i)];
        Tensor& din = dacts[static_cast<size_t>(n.in0)];
        if (din.data.empty()) din = Tensor(out.shape);
        for (int64_t j = 0; j < out.numel(); ++j)
          if (out.data[static_cast<size_t>(j)] > 0.0f)
            din.data[static_cast<size_t>(j)] += dout.data[static_cast<size_t>(j)];
        break;
      }
      case OpKind::Add: {
        for (int src : {n.in0, n.in1}) {
          Tensor& din = dacts[static_cast<size_t>(src)];
          if (din.data.empty()) din = Tensor(dout.shape);
          for (int64_t j = 0; j < dout.numel(); ++j)
            din.data[static_cast<size_t>(j)] += dout.data[static_cast<size_t>(j)];
        }
        break;
      }
      case OpKind::DownsamplePad: {
        const Tensor& in = cache.values[static_cast<size_t>(n.in0)];
        Tensor& din = dacts[static_cast<size_t>(n.in0)];
        if (din.data.empty()) din = Tensor(in.shape);
        const int C = n.in_ch, H = in.dim(2), W = in.dim(3);
        for (int nn = 0; nn < N; ++nn)
          for (int c = 0; c < std::min(C, n.out_ch); ++c)
            for (int oh = 0; oh < n.out_h; ++oh)
              for (int ow = 0; ow < n.out_w; ++ow) {
                const int ih = oh * 2, iw = ow * 2;
                if (ih < H && iw < W)
                  din.data[static_cast<size_t>(((static_cast<int64_t>(nn) * C + c) * H + ih) * W +
                                               iw)] +=
                      dout.data[static_cast<size_t>(
                          ((static_cast<int64_t>(nn) * n.out_ch + c) * n.out_h + oh) * n.out_w +
                          ow)];
              }
        break;
      }
      case OpKind::GlobalAvgPool: {
        const Tensor& in = cache.values[static_cast<size_t>(n.in0)];
        Tensor& din = dacts[static_cast<size_t>(n.in0)];
        if (din.data.empty()) din = Tensor(in.shape);
        const int C = in.dim(1), H = in.dim(2), W = in.dim(3);
        const float inv = 1.0f / static_cast<float>(H * W);
        for (int nn = 0; nn < N; ++nn)
          for (int c = 0; c < C; ++c) {
            const float go =
                dout.data[static_cast<size_t>(nn) * C + static_cast<size_t>(c)] * inv;
            float* p = din.ptr() + (static_cast<int64_t>(nn) * C + c) * H * W;
            for (int j = 0; j < H * W; ++j) p[j] += go;
          }
        break;
      }
      case OpKind::Dense: {
        const Tensor& in = cache.values[static_cast<size_t>(n.in0)];
        Tensor& din = dacts[static_cast<size_t>(n.in0)];
        if (din.data.empty()) din = Tensor(in.shape);
        const Tensor& w = params.at(n.id + ".w");
        Tensor& dw = grads.at(n.id + ".w");
        Tensor& db = grads.at(n.id + ".b");
        for (int nn = 0; nn < N; ++nn) {
          const float* x = in.ptr() + static_cast<int64_t>(nn) * n.in_ch;
          float* dx = din.ptr() + static_cast<int64_t>(nn) * n.in_ch;
          for (int o = 0; o < n.out_ch; ++o) {
            const float go = dout.data[static_cast<size_t>(nn) * n.out_ch + static_cast<size_t>(o)];
            if (go == 0.0f) continue;
            const float* wr = w.ptr() + static_cast<int64_t>(o) * n.in_ch;
            float* dwr = dw.ptr() + static_cast<int64_t>(o) * n.in_ch;
            db.data[static_cast<size_t>(o)] += go;
            for (int j = 0; j < n.in_ch; ++j) {
              dwr[j] += go * x[j];
              dx[j] += go * wr[j];
            }
          }
        }
        break;
      }
    }
  }
}

inline std::vector<int> argmax_rows(const Tensor& scores) {
  const int N = scores.dim(0), K = scores.dim(1);
  std::vector<int> out(static_cast<size_t>(N));
  for (int n = 0; n < N; ++n) {
    const float* row = scores.ptr() + static_cast<int64_t>(n) * K;
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (row[k] > row[best]) best = k;
    out[static_cast<size_t>(n)] = best;
  }
  return out;
}

}  // namespace hce
