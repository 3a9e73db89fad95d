#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dtm/schema.hpp"
#include "dtm/tensor.hpp"

namespace dtm {

enum class HeadMode { FcBaseline, DtmGap, DtmGmp, DtmMixed };

inline std::string head_mode_name(HeadMode m) {
  switch (m) {
    case HeadMode::FcBaseline: return "fc_baseline";
    case HeadMode::DtmGap: return "dtm_gap";
    case HeadMode::DtmGmp: return "dtm_gmp";
    case HeadMode::DtmMixed: return "dtm_mixed";
  }
  return "?";
}

inline HeadMode head_mode_from_name(const std::string& s) {
  if (s == "fc_baseline") return HeadMode::FcBaseline;
  if (s == "dtm_gap") return HeadMode::DtmGap;
  if (s == "dtm_gmp") return HeadMode::DtmGmp;
  if (s == "dtm_mixed") return HeadMode::DtmMixed;
  throw ConfigError("unknown head mode '" + s + "'");
}

struct BackboneConfig {
  std::vector<int> widths = {8, 16, 32, 64};
  std::vector<int> strides = {2, 2, 2, 1};
  int kernel_size = 3;
  int in_channels = 3;
};

template <typename T>
struct ConvStage {
  TensorPtr<T> weight;  // (out, in, k, k)
  BatchNormState<T> bn;
  int stride = 1;
};

template <typename T>
struct Backbone {
  std::vector<ConvStage<T>> stages;
  int kernel_size = 3;
  int in_channels = 3;

  int down_stride() const {
    int r = 1;
    for (const auto& s : stages) r *= s.stride;
    return r;
  }

  int out_channels() const { return stages.empty() ? in_channels : stages.back().weight->dim(0); }

  void set_mode(BnMode mode) {
    for (auto& s : stages) s.bn.mode = mode;
  }
};

template <typename T>
Backbone<T> make_backbone(const BackboneConfig& cfg, std::uint64_t seed, bool bn_affine = true) {
  if (cfg.widths.size() != cfg.strides.size())
    throw ConfigError("backbone: " + std::to_string(cfg.widths.size()) + " widths for " +
                      std::to_string(cfg.strides.size()) + " strides");
  Backbone<T> bb;
  bb.kernel_size = cfg.kernel_size;
  bb.in_channels = cfg.in_channels;
  int cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    const int cout = cfg.widths[i];
    ConvStage<T> stage;
    Rng rng(derive_seed(seed, "init.backbone", i));
    const T stddev = static_cast<T>(std::sqrt(2.0 / (cfg.kernel_size * cfg.kernel_size * cin)));
    stage.weight = TensorT<T>::randn({cout, cin, cfg.kernel_size, cfg.kernel_size}, rng, stddev, true);
    stage.bn = BatchNormState<T>::make(cout, BnVariant::Spatial);
    stage.bn.affine = bn_affine;
    stage.stride = cfg.strides[i];
    bb.stages.push_back(std::move(stage));
    cin = cout;
  }
  return bb;
}

/// conv-BN-relu chain. Input height/width must be divisible by the total down
/// stride; anything else is rejected rather than silently padded.
template <typename T>
TensorPtr<T> backbone_forward(Backbone<T>& backbone, const TensorPtr<T>& images) {
  if (images->rank() != 4)
    throw ShapeError("backbone_forward: images must be rank 4, got " + detail::shape_str(images->shape));
  const int r = backbone.down_stride();
  if (images->dim(2) % r != 0 || images->dim(3) % r != 0)
    throw ShapeError("backbone_forward: input " + std::to_string(images->dim(2)) + "x" +
                     std::to_string(images->dim(3)) + " is not divisible by the down stride " + std::to_string(r));
  const int pad = backbone.kernel_size / 2;
  TensorPtr<T> x = images;
  for (auto& stage : backbone.stages) {
    x = conv2d(x, stage.weight, stage.stride, pad);
    x = batchnorm(x, stage.bn);
    x = relu(x);
  }
  return x;
}

/// DTM classifier head: per-branch 1x1 template banks, spatial BN over the
/// resulting heatmaps, then GAP (global branch) or GMP (local branch), with
/// the pooled columns reassembled into schema attribute order.
template <typename T>
struct DtmHead {
  AttributeSchema schema;
  std::vector<int> gap_attrs;  // schema indices pooled by GAP, in branch order
  std::vector<int> gmp_attrs;  // schema indices pooled by GMP, in branch order
  TensorPtr<T> templates_gap;  // (|gap_attrs|, C, 1, 1)
  TensorPtr<T> templates_gmp;  // (|gmp_attrs|, C, 1, 1)
  BatchNormState<T> bn_gap;
  BatchNormState<T> bn_gmp;
  bool use_bn = true;

  /// permutation with logits[:, j] = concat(gap, gmp)[:, perm[j]]
  std::vector<int> reassembly_perm() const {
    std::vector<int> pos_of(static_cast<std::size_t>(schema.total()), -1);
    int p = 0;
    for (int j : gap_attrs) pos_of[static_cast<std::size_t>(j)] = p++;
    for (int j : gmp_attrs) pos_of[static_cast<std::size_t>(j)] = p++;
    return pos_of;
  }

  void set_mode(BnMode mode) {
    bn_gap.mode = mode;
    bn_gmp.mode = mode;
  }
};

template <typename T>
DtmHead<T> make_dtm_head(const AttributeSchema& schema, HeadMode mode, int channels, std::uint64_t seed,
                         bool use_bn = true, bool bn_affine = true) {
  schema.validate();
  DtmHead<T> head;
  head.schema = schema;
  head.use_bn = use_bn;
  switch (mode) {
    case HeadMode::DtmMixed:
      head.gap_attrs = schema.global_indices();
      head.gmp_attrs = schema.local_indices();
      break;
    case HeadMode::DtmGap:
      for (int j = 0; j < schema.total(); ++j) head.gap_attrs.push_back(j);
      break;
    case HeadMode::DtmGmp:
      for (int j = 0; j < schema.total(); ++j) head.gmp_attrs.push_back(j);
      break;
    case HeadMode::FcBaseline:
      throw ConfigError("make_dtm_head: fc_baseline is not a DTM head");
  }
  const T stddev = static_cast<T>(std::sqrt(2.0 / channels));
  if (!head.gap_attrs.empty()) {
    Rng rng(derive_seed(seed, "init.templates_gap"));
    head.templates_gap =
        TensorT<T>::randn({static_cast<int>(head.gap_attrs.size()), channels, 1, 1}, rng, stddev, true);
    head.bn_gap = BatchNormState<T>::make(static_cast<int>(head.gap_attrs.size()), BnVariant::Spatial);
    head.bn_gap.affine = bn_affine;
    // Averaging a normalized heatmap shrinks the score scale by roughly the
    // square root of the cell count, which leaves the pooled scores far too
    // flat to train at a useful pace. Start the scale near sqrt(16 * 12), the
    // map size the default stride-8 backbone produces on 128 x 96 inputs.
    if (bn_affine && head.bn_gap.gamma)
      for (auto& g : head.bn_gap.gamma->data) g = static_cast<T>(14);
  }
  if (!head.gmp_attrs.empty()) {
    Rng rng(derive_seed(seed, "init.templates_gmp"));
    head.templates_gmp =
        TensorT<T>::randn({static_cast<int>(head.gmp_attrs.size()), channels, 1, 1}, rng, stddev, true);
    head.bn_gmp = BatchNormState<T>::make(static_cast<int>(head.gmp_attrs.size()), BnVariant::Spatial);
    head.bn_gmp.affine = bn_affine;
  }
  return head;
}

template <typename T>
struct DtmForward {
  TensorPtr<T> logits;        // (N, J) in schema attribute order, pre-sigmoid
  TensorPtr<T> heatmaps_gap;  // (N, |gap|, H, W) post-BN pre-sigmoid; null if branch empty
  TensorPtr<T> heatmaps_gmp;  // (N, |gmp|, H, W)
  std::vector<int> gmp_argmax;
};

template <typename T>
DtmForward<T> forward_dtm(DtmHead<T>& head, const TensorPtr<T>& features) {
  if (features->rank() != 4)
    throw ShapeError("forward_dtm: features must be rank 4, got " + detail::shape_str(features->shape));
  DtmForward<T> out;
  std::vector<TensorPtr<T>> pooled;
  if (head.templates_gap) {
    auto h = conv2d(features, head.templates_gap, 1, 0);
    if (head.use_bn) h = batchnorm(h, head.bn_gap);
    out.heatmaps_gap = h;
    pooled.push_back(gap(h));
  }
  if (head.templates_gmp) {
    auto h = conv2d(features, head.templates_gmp, 1, 0);
    if (head.use_bn) h = batchnorm(h, head.bn_gmp);
    out.heatmaps_gmp = h;
    auto g = gmp(h);
    out.gmp_argmax = std::move(g.argmax);
    pooled.push_back(g.values);
  }
  if (pooled.empty()) throw ShapeError("forward_dtm: head has no attributes");
  auto joined = pooled.size() == 1 ? pooled[0] : concat(pooled, 1);
  out.logits = permute_columns(joined, head.reassembly_perm());
  return out;
}

/// Conventional classifier head: GAP, then a fully-connected layer, then a
/// per-attribute BN whose statistics are computed over the batch axis only.
template <typename T>
struct FcBaselineHead {
  TensorPtr<T> weight;  // (J, C)
  BatchNormState<T> bn;
  bool use_bn = true;

  void set_mode(BnMode mode) { bn.mode = mode; }
};

template <typename T>
FcBaselineHead<T> make_fc_baseline_head(int num_attributes, int channels, std::uint64_t seed, bool use_bn = true,
                                        bool bn_affine = true) {
  FcBaselineHead<T> head;
  Rng rng(derive_seed(seed, "init.fc"));
  head.weight = TensorT<T>::randn({num_attributes, channels}, rng, static_cast<T>(std::sqrt(2.0 / channels)), true);
  head.bn = BatchNormState<T>::make(num_attributes, BnVariant::Vector);
  head.bn.affine = bn_affine;
  head.use_bn = use_bn;
  return head;
}

template <typename T>
TensorPtr<T> forward_fc_baseline(FcBaselineHead<T>& head, const TensorPtr<T>& features) {
  auto x = linear(gap(features), head.weight);
  if (head.use_bn) x = batchnorm(x, head.bn);
  return x;
}

// ---- full model ----

template <typename T>
struct Model {
  AttributeSchema schema;
  HeadMode mode = HeadMode::DtmMixed;
  Backbone<T> backbone;
  DtmHead<T> dtm;        // valid unless mode == FcBaseline
  FcBaselineHead<T> fc;  // valid iff mode == FcBaseline
  BackboneConfig backbone_config;
  bool head_bn = true;
  bool bn_affine = true;

  void set_mode(BnMode m) {
    backbone.set_mode(m);
    if (mode == HeadMode::FcBaseline)
      fc.set_mode(m);
    else
      dtm.set_mode(m);
  }

  std::vector<std::pair<std::string, TensorPtr<T>>> params() {
    std::vector<std::pair<std::string, TensorPtr<T>>> out;
    auto add_bn = [&out](const std::string& prefix, BatchNormState<T>& bn) {
      if (!bn.affine || !bn.gamma) return;
      out.emplace_back(prefix + ".gamma", bn.gamma);
      out.emplace_back(prefix + ".beta", bn.beta);
    };
    for (std::size_t i = 0; i < backbone.stages.size(); ++i) {
      out.emplace_back("backbone." + std::to_string(i) + ".weight", backbone.stages[i].weight);
      add_bn("backbone." + std::to_string(i) + ".bn", backbone.stages[i].bn);
    }
    if (mode == HeadMode::FcBaseline) {
      out.emplace_back("head.fc.weight", fc.weight);
      if (fc.use_bn) add_bn("head.fc.bn", fc.bn);
    } else {
      if (dtm.templates_gap) out.emplace_back("head.templates_gap", dtm.templates_gap);
      if (dtm.templates_gmp) out.emplace_back("head.templates_gmp", dtm.templates_gmp);
      if (dtm.use_bn) {
        if (dtm.templates_gap) add_bn("head.bn_gap", dtm.bn_gap);
        if (dtm.templates_gmp) add_bn("head.bn_gmp", dtm.bn_gmp);
      }
    }
    return out;
  }
};

template <typename T>
Model<T> make_model(const AttributeSchema& schema, HeadMode mode, const BackboneConfig& backbone_cfg,
                    std::uint64_t seed, bool head_bn = true, bool bn_affine = true) {
  schema.validate();
  Model<T> m;
  m.schema = schema;
  m.mode = mode;
  m.backbone_config = backbone_cfg;
  m.head_bn = head_bn;
  m.bn_affine = bn_affine;
  m.backbone = make_backbone<T>(backbone_cfg, seed, bn_affine);
  const int channels = m.backbone.out_channels();
  if (mode == HeadMode::FcBaseline)
    m.fc = make_fc_baseline_head<T>(schema.total(), channels, seed, head_bn, bn_affine);
  else
    m.dtm = make_dtm_head<T>(schema, mode, channels, seed, head_bn, bn_affine);
  return m;
}

template <typename T>
struct ModelForward {
  TensorPtr<T> logits;
  TensorPtr<T> heatmaps_gap;
  TensorPtr<T> heatmaps_gmp;
  std::vector<int> gmp_argmax;
};

template <typename T>
ModelForward<T> forward_model(Model<T>& model, const TensorPtr<T>& images) {
  auto features = backbone_forward(model.backbone, images);
  ModelForward<T> out;
  if (model.mode == HeadMode::FcBaseline) {
    out.logits = forward_fc_baseline(model.fc, features);
  } else {
    auto fwd = forward_dtm(model.dtm, features);
    out.logits = fwd.logits;
    out.heatmaps_gap = fwd.heatmaps_gap;
    out.heatmaps_gmp = fwd.heatmaps_gmp;
    out.gmp_argmax = std::move(fwd.gmp_argmax);
  }
  return out;
}

/// Branch and channel holding attribute j's heatmap.
template <typename T>
std::pair<char, int> heatmap_location(const Model<T>& model, int attr_index) {
  if (model.mode == HeadMode::FcBaseline) throw ConfigError("fc_baseline head has no heatmaps");
  for (std::size_t c = 0; c < model.dtm.gap_attrs.size(); ++c)
    if (model.dtm.gap_attrs[c] == attr_index) return {'a', static_cast<int>(c)};
  for (std::size_t c = 0; c < model.dtm.gmp_attrs.size(); ++c)
    if (model.dtm.gmp_attrs[c] == attr_index) return {'m', static_cast<int>(c)};
  throw ConfigError("attribute index " + std::to_string(attr_index) + " not present in head");
}

// ---- parameter / FLOP accounting ----

struct ModelStats {
  long long params = 0;
  long long flops = 0;  // per forward pass of a single image
};

inline long long conv_param_count(int k, int cin, int cout) {
  return static_cast<long long>(k) * k * cin * cout;  // no bias terms
}

inline long long conv_flops(int k, int cin, int cout, int h_out, int w_out) {
  return 2LL * k * k * cin * cout * h_out * w_out;
}

/// Counting convention: conv 2*k^2*Cin*Cout*Hout*Wout; BN and affine 2 per
/// element; relu 1 per element; pooling 1 per input element; FC 2*Cin*Cout.
template <typename T>
ModelStats model_stats(const Model<T>& model, int input_h, int input_w) {
  ModelStats st;
  int h = input_h, w = input_w;
  int cin = model.backbone.in_channels;
  const int k = model.backbone.kernel_size;
  for (const auto& stage : model.backbone.stages) {
    const int cout = stage.weight->dim(0);
    const int pad = k / 2;
    h = (h + 2 * pad - k) / stage.stride + 1;
    w = (w + 2 * pad - k) / stage.stride + 1;
    st.params += conv_param_count(k, cin, cout);
    st.flops += conv_flops(k, cin, cout, h, w);
    if (stage.bn.affine) st.params += 2LL * cout;
    st.flops += 2LL * cout * h * w;  // BN
    st.flops += 1LL * cout * h * w;  // relu
    cin = cout;
  }
  if (model.mode == HeadMode::FcBaseline) {
    if (model.fc.weight) {
      const int j = model.fc.weight->dim(0);
      st.params += static_cast<long long>(j) * cin;
      st.flops += 1LL * cin * h * w;  // GAP
      st.flops += 2LL * cin * j;      // FC
      if (model.fc.use_bn && model.fc.bn.affine) st.params += 2LL * j;
      if (model.fc.use_bn) st.flops += 2LL * j;
    }
  } else {
    auto branch = [&](const TensorPtr<T>& tmpl, bool use_bn, bool affine) {
      if (!tmpl) return;
      const int j = tmpl->dim(0);
      st.params += conv_param_count(1, cin, j);
      st.flops += conv_flops(1, cin, j, h, w);
      if (use_bn && affine) st.params += 2LL * j;
      if (use_bn) st.flops += 2LL * j * h * w;
      st.flops += 1LL * j * h * w;  // pooling
    };
    branch(model.dtm.templates_gap, model.dtm.use_bn, model.dtm.bn_gap.affine);
    branch(model.dtm.templates_gmp, model.dtm.use_bn, model.dtm.bn_gmp.affine);
  }
  return st;
}

// ---- checkpoint container ----

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

/// Versioned binary container: schema, ordered metadata, named float64
/// tensors. Writing the same contents yields identical bytes.
struct Checkpoint {
  std::uint32_t version = 1;
  AttributeSchema schema;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  std::optional<std::string> meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    return std::nullopt;
  }

  void set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta)
      if (k == key) {
        v = value;
        return;
      }
    meta.emplace_back(key, value);
  }
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}
inline std::string read_str(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'D', 'T', 'M', 'C', 'K', 'P', 'T', '\0'};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint '" + path + "'");
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, ckpt.version);
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.schema.attributes.size()));
  for (const auto& a : ckpt.schema.attributes) {
    detail::write_str(os, a.name);
    os.put(a.is_global ? 1 : 0);
    detail::write_u32(os, static_cast<std::uint32_t>(a.keypoint_ids.size()));
    for (int k : a.keypoint_ids) detail::write_u32(os, static_cast<std::uint32_t>(k));
  }
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    detail::write_str(os, k);
    detail::write_str(os, v);
  }
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::write_str(os, t.name);
    detail::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.values) detail::write_f64(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("'" + path + "' is not a checkpoint file");
  Checkpoint ckpt;
  ckpt.version = detail::read_u32(is);
  if (ckpt.version != 1) throw IoError("checkpoint '" + path + "': unsupported version " + std::to_string(ckpt.version));
  const std::uint32_t nattr = detail::read_u32(is);
  for (std::uint32_t i = 0; i < nattr; ++i) {
    AttributeDef a;
    a.name = detail::read_str(is);
    a.is_global = is.get() != 0;
    const std::uint32_t nj = detail::read_u32(is);
    for (std::uint32_t k = 0; k < nj; ++k) a.keypoint_ids.push_back(static_cast<int>(detail::read_u32(is)));
    ckpt.schema.attributes.push_back(std::move(a));
  }
  const std::uint32_t nmeta = detail::read_u32(is);
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = detail::read_str(is);
    std::string v = detail::read_str(is);
    ckpt.meta.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t ntensors = detail::read_u32(is);
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    NamedTensor t;
    t.name = detail::read_str(is);
    const std::uint32_t rank = detail::read_u32(is);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<int>(detail::read_u32(is)));
      n *= static_cast<std::size_t>(t.shape.back());
    }
    t.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) t.values[j] = detail::read_f64(is);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

namespace detail {

template <typename T>
NamedTensor to_named(const std::string& name, const TensorPtr<T>& t) {
  NamedTensor nt;
  nt.name = name;
  nt.shape = t->shape;
  nt.values.assign(t->data.begin(), t->data.end());
  return nt;
}

template <typename T>
NamedTensor to_named(const std::string& name, const std::vector<T>& v) {
  NamedTensor nt;
  nt.name = name;
  nt.shape = {static_cast<int>(v.size())};
  nt.values.assign(v.begin(), v.end());
  return nt;
}

template <typename T>
void load_into(const Checkpoint& ckpt, const std::string& name, const TensorPtr<T>& t) {
  const NamedTensor* nt = ckpt.find(name);
  if (!nt) throw IoError("checkpoint: missing tensor '" + name + "'");
  if (nt->shape != t->shape)
    throw IoError("checkpoint: tensor '" + name + "' has shape " + shape_str(nt->shape) + ", expected " +
                  shape_str(t->shape));
  for (std::size_t i = 0; i < t->data.size(); ++i) t->data[i] = static_cast<T>(nt->values[i]);
}

template <typename T>
void load_into(const Checkpoint& ckpt, const std::string& name, std::vector<T>& v) {
  const NamedTensor* nt = ckpt.find(name);
  if (!nt) throw IoError("checkpoint: missing tensor '" + name + "'");
  if (nt->values.size() != v.size())
    throw IoError("checkpoint: tensor '" + name + "' has " + std::to_string(nt->values.size()) +
                  " values, expected " + std::to_string(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(nt->values[i]);
}

inline std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& tok : split(s, ','))
    if (!trim(tok).empty()) out.push_back(std::stoi(trim(tok)));
  return out;
}

}  // namespace detail

template <typename T>
Checkpoint model_to_checkpoint(Model<T>& model) {
  Checkpoint ckpt;
  ckpt.schema = model.schema;
  ckpt.set_meta("head_mode", head_mode_name(model.mode));
  ckpt.set_meta("head_bn", model.head_bn ? "1" : "0");
  ckpt.set_meta("bn_affine", model.bn_affine ? "1" : "0");
  ckpt.set_meta("backbone.widths", detail::join_ints(model.backbone_config.widths));
  ckpt.set_meta("backbone.strides", detail::join_ints(model.backbone_config.strides));
  ckpt.set_meta("backbone.kernel_size", std::to_string(model.backbone_config.kernel_size));
  ckpt.set_meta("backbone.in_channels", std::to_string(model.backbone_config.in_channels));
  for (auto& [name, p] : model.params()) ckpt.tensors.push_back(detail::to_named(name, p));
  auto dump_bn = [&ckpt](const std::string& prefix, const BatchNormState<T>& bn) {
    ckpt.tensors.push_back(detail::to_named(prefix + ".running_mean", bn.running_mean));
    ckpt.tensors.push_back(detail::to_named(prefix + ".running_var", bn.running_var));
  };
  for (std::size_t i = 0; i < model.backbone.stages.size(); ++i)
    dump_bn("backbone." + std::to_string(i) + ".bn", model.backbone.stages[i].bn);
  if (model.mode == HeadMode::FcBaseline) {
    if (model.fc.use_bn) dump_bn("head.fc.bn", model.fc.bn);
  } else if (model.dtm.use_bn) {
    if (model.dtm.templates_gap) dump_bn("head.bn_gap", model.dtm.bn_gap);
    if (model.dtm.templates_gmp) dump_bn("head.bn_gmp", model.dtm.bn_gmp);
  }
  return ckpt;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
  BackboneConfig cfg;
  auto need = [&ckpt](const std::string& key) {
    auto v = ckpt.meta_value(key);
    if (!v) throw IoError("checkpoint: missing metadata '" + key + "'");
    return *v;
  };
  cfg.widths = detail::parse_ints(need("backbone.widths"));
  cfg.strides = detail::parse_ints(need("backbone.strides"));
  cfg.kernel_size = std::stoi(need("backbone.kernel_size"));
  cfg.in_channels = std::stoi(need("backbone.in_channels"));
  const HeadMode mode = head_mode_from_name(need("head_mode"));
  const bool head_bn = need("head_bn") == "1";
  const bool bn_affine = need("bn_affine") == "1";

  Model<T> model = make_model<T>(ckpt.schema, mode, cfg, /*seed=*/0, head_bn, bn_affine);
  for (auto& [name, p] : model.params()) detail::load_into(ckpt, name, p);
  auto read_bn = [&ckpt](const std::string& prefix, BatchNormState<T>& bn) {
    detail::load_into(ckpt, prefix + ".running_mean", bn.running_mean);
    detail::load_into(ckpt, prefix + ".running_var", bn.running_var);
  };
  for (std::size_t i = 0; i < model.backbone.stages.size(); ++i)
    read_bn("backbone." + std::to_string(i) + ".bn", model.backbone.stages[i].bn);
  if (model.mode == HeadMode::FcBaseline) {
    if (model.fc.use_bn) read_bn("head.fc.bn", model.fc.bn);
  } else if (model.dtm.use_bn) {
    if (model.dtm.templates_gap) read_bn("head.bn_gap", model.dtm.bn_gap);
    if (model.dtm.templates_gmp) read_bn("head.bn_gmp", model.dtm.bn_gmp);
  }
  return model;
}

}  // namespace dtm
