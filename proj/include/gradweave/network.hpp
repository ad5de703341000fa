// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradweave/adapters.hpp"
#include "gradweave/graph.hpp"
#include "gradweave/tensor.hpp"

namespace gradweave {

/// Dimensions of the toy two-stream model: a frozen shared backbone of
/// `layers` linear+GeLU blocks over non-overlapping patches, one adapter per
/// block per modality, and a trainable 2-layer decoder back to pixels.
struct NetConfig {
  std::size_t H = 32;
  std::size_t W = 32;
  std::size_t patch = 4;
  std::size_t d = 16;
  std::size_t layers = 2;
  std::size_t dec_hidden = 8;
  AdapterConfig adapter{16, 8};

  std::size_t tokens() const { return (H / patch) * (W / patch); }

  void validate() const {
    if (H < 8 || W < 8 || patch == 0 || H % patch != 0 || W % patch != 0) {
      throw std::invalid_argument("NetConfig: patch must divide H and W, H,W >= 8");
    }
    if (adapter.d != d) throw std::invalid_argument("NetConfig: adapter.d must equal d");
    adapter.validate();
  }
};

struct BackboneLayer {
  Tensor W;  // [in, d]
  Tensor b;  // [1, d]
};

struct DecoderParams {
  Tensor W1, b1;  // [d, dec_hidden], [1, dec_hidden]
  Tensor W2, b2;  // [dec_hidden, patch*patch], [1, patch*patch]
};

/// Frozen backbone plus the three trainable groups theta_R, theta_T, theta_D.
struct ModelParams {
  NetConfig cfg;
  std::vector<BackboneLayer> backbone;
  std::vector<AdapterParams> theta_R;
  std::vector<AdapterParams> theta_T;
  DecoderParams theta_D;
};

/// Paired modality images with ground truth, all H x W. GT is {0,1}.
struct Sample {
  Tensor I_R;
  Tensor I_T;
  Tensor GT;

  void validate() const {
    if (!I_R.same_shape(I_T) || !I_R.same_shape(GT)) {
      throw std::invalid_argument("Sample: I_R, I_T, GT must share one H x W shape");
    }
    for (double v : GT.data()) {
      if (v != 0.0 && v != 1.0) throw std::invalid_argument("Sample: GT entries must be 0 or 1");
    }
  }
};

/// The three decoded logit maps and the two encoder features.
struct StreamOutputs {
  Tensor P_R, P_T, P_F;  // [H, W] logits
  Tensor F_R, F_T;       // [tokens, d]
};

// ---- parameter enumeration ----------------------------------------------

/// Visits every parameter as (path, tensor) in a fixed canonical order.
/// Backbone paths come first; gradient grouping keys off the theta_ prefixes.
template <class MP, class F>
void visit_params(MP& m, F&& f) {
  for (std::size_t i = 0; i < m.backbone.size(); ++i) {
    const std::string p = "backbone.layer" + std::to_string(i);
    f(p + ".W", m.backbone[i].W);
    f(p + ".b", m.backbone[i].b);
  }
  auto stack = [&](const char* name, auto& vec) {
    for (std::size_t i = 0; i < vec.size(); ++i) {
      const std::string p = std::string(name) + ".layer" + std::to_string(i);
      f(p + ".W_down_for", vec[i].W_down_for);
      f(p + ".W_up_for", vec[i].W_up_for);
      f(p + ".W_down_back", vec[i].W_down_back);
      f(p + ".W_up_back", vec[i].W_up_back);
      f(p + ".gate_A", vec[i].gate_A);
      f(p + ".gate_b", vec[i].gate_b);
    }
  };
  stack("theta_R", m.theta_R);
  stack("theta_T", m.theta_T);
  f("theta_D.W1", m.theta_D.W1);
  f("theta_D.b1", m.theta_D.b1);
  f("theta_D.W2", m.theta_D.W2);
  f("theta_D.b2", m.theta_D.b2);
}

inline bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

inline std::size_t group_size(const ModelParams& m, const std::string& prefix) {
  std::size_t n = 0;
  visit_params(m, [&](const std::string& path, const Tensor& t) {
    if (starts_with(path, prefix)) n += t.size();
  });
  return n;
}

/// Flattens a group's gradient entries into one vector, canonical order.
/// Parameters absent from the map contribute zeros.
inline std::vector<double> flatten_group(const GradientMap& gm, const ModelParams& m,
                                         const std::string& prefix) {
  std::vector<double> out;
  out.reserve(group_size(m, prefix));
  visit_params(m, [&](const std::string& path, const Tensor& t) {
    if (!starts_with(path, prefix)) return;
    auto it = gm.find(path);
    if (it == gm.end()) {
      out.insert(out.end(), t.size(), 0.0);
    } else {
      if (!it->second.same_shape(t)) throw std::invalid_argument("flatten_group: shape drift");
      out.insert(out.end(), it->second.data().begin(), it->second.data().end());
    }
  });
  return out;
}

/// theta -= eta * update, walking the group in canonical order.
inline void apply_group_update(ModelParams& m, const std::string& prefix,
                               const std::vector<double>& update, double eta) {
  std::size_t off = 0;
  visit_params(m, [&](const std::string& path, Tensor& t) {
    if (!starts_with(path, prefix)) return;
    if (off + t.size() > update.size()) throw std::invalid_argument("apply_group_update: length");
    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= eta * update[off + i];
    off += t.size();
  });
  if (off != update.size()) throw std::invalid_argument("apply_group_update: length mismatch");
}

// ---- initialization -------------------------------------------------------

/// Frozen patch featurizer standing in for a pretrained encoder: the leading
/// channels respond to meaningful patterns (brightness, edges, blobs, and
/// their negatives), so activation level correlates with content the way it
/// does in a trained backbone. Remaining channels are random for diversity.
inline Tensor structured_patch_filters(std::size_t p, std::size_t d, std::mt19937_64& rng) {
  const std::size_t p2 = p * p;
  Tensor W({p2, d});
  const double gain = 2.0;
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t c = 0; c < p; ++c) {
        const double top = r < p / 2 ? 1.0 : -1.0;
        const double left = c < p / 2 ? 1.0 : -1.0;
        const bool center = r >= p / 4 && r < p - p / 4 && c >= p / 4 && c < p - p / 4;
        double v = 0.0;
        switch (j % 8) {
          case 0: v = 1.0; break;                    // brightness
          case 1: v = -1.0; break;                   // darkness
          case 2: v = top; break;                    // horizontal edge
          case 3: v = left; break;                   // vertical edge
          case 4: v = top * left; break;             // checker / diagonal
          case 5: v = center ? 3.0 : -1.0; break;    // center-surround
          case 6: v = center ? -3.0 : 1.0; break;    // inverted center-surround
          case 7: v = -top * left; break;
        }
        W.at(r * p + c, j) = gain * v / static_cast<double>(p2);
      }
    }
  }
  // jitter distinguishes repeated pattern channels
  for (std::size_t i = 0; i < W.size(); ++i) {
    std::normal_distribution<double> noise(0.0, 0.35 / static_cast<double>(p2));
    W[i] += gain * noise(rng);
  }
  return W;
}

/// Seeded model. The frozen backbone is a structured featurizer plus a
/// near-identity mixing layer; adapters start as exact identities (W_up = 0)
/// with neutral gates (G = 0.5 each).
inline ModelParams init_model(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams m;
  m.cfg = cfg;
  const std::size_t p2 = cfg.patch * cfg.patch;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = (l == 0) ? p2 : cfg.d;
    BackboneLayer layer;
    if (l == 0) {
      layer.W = structured_patch_filters(cfg.patch, cfg.d, rng);
    } else {
      layer.W = random_normal({in, cfg.d}, 0.3 / std::sqrt(static_cast<double>(in)), rng);
      for (std::size_t j = 0; j < std::min(in, cfg.d); ++j) layer.W.at(j, j) += 0.8;
    }
    layer.b = random_normal({1, cfg.d}, 0.01, rng);
    m.backbone.push_back(std::move(layer));
  }
  auto make_stack = [&]() {
    std::vector<AdapterParams> stack;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      AdapterParams a = AdapterParams::shaped(cfg.adapter);
      a.W_down_for = random_normal({cfg.d, cfg.adapter.d_hat},
                                   1.0 / std::sqrt(static_cast<double>(cfg.d)), rng);
      a.W_down_back = random_normal({cfg.d, cfg.adapter.d_hat},
                                    1.0 / std::sqrt(static_cast<double>(cfg.d)), rng);
      // W_up and gate stay zero: adapters are identity at step 0
      stack.push_back(std::move(a));
    }
    return stack;
  };
  m.theta_R = make_stack();
  m.theta_T = make_stack();
  m.theta_D.W1 = random_normal({cfg.d, cfg.dec_hidden},
                               1.0 / std::sqrt(static_cast<double>(cfg.d)), rng);
  m.theta_D.b1 = Tensor({1, cfg.dec_hidden});
  m.theta_D.W2 = random_normal({cfg.dec_hidden, p2},
                               1.0 / std::sqrt(static_cast<double>(cfg.dec_hidden)), rng);
  m.theta_D.b2 = Tensor({1, p2});
  return m;
}

// ---- forward ---------------------------------------------------------------

/// Splits an [H, W] image into non-overlapping patch rows [tokens, p*p].
inline Tensor patchify(const Tensor& image, std::size_t p) {
  const std::size_t H = image.rows(), W = image.cols();
  if (H % p != 0 || W % p != 0) throw std::invalid_argument("patchify: patch must divide H and W");
  const std::size_t pw = W / p;
  Tensor out({(H / p) * pw, p * p});
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      out.at((r / p) * pw + (c / p), (r % p) * p + (c % p)) = image.at(r, c);
    }
  }
  return out;
}

/// Graph-side handles to all registered model tensors. The backbone is
/// registered as inputs, so it never receives gradient entries.
struct ModelNodes {
  std::vector<std::pair<Node, Node>> backbone;  // (W, b) per layer
  std::vector<AdapterNodes> theta_R, theta_T;
  Node dec_W1, dec_b1, dec_W2, dec_b2;
};

inline ModelNodes register_model(Graph& g, const ModelParams& m) {
  ModelNodes n;
  for (const auto& layer : m.backbone) {
    n.backbone.emplace_back(g.input(layer.W), g.input(layer.b));
  }
  for (std::size_t i = 0; i < m.theta_R.size(); ++i) {
    n.theta_R.push_back(register_adapter(g, "theta_R.layer" + std::to_string(i), m.theta_R[i]));
  }
  for (std::size_t i = 0; i < m.theta_T.size(); ++i) {
    n.theta_T.push_back(register_adapter(g, "theta_T.layer" + std::to_string(i), m.theta_T[i]));
  }
  n.dec_W1 = g.param("theta_D.W1", m.theta_D.W1);
  n.dec_b1 = g.param("theta_D.b1", m.theta_D.b1);
  n.dec_W2 = g.param("theta_D.W2", m.theta_D.W2);
  n.dec_b2 = g.param("theta_D.b2", m.theta_D.b2);
  return n;
}

/// Frozen linear+GeLU blocks with the modality's adapter added residually
/// after each block.
inline Node encode(Graph& g, const Tensor& image, const ModelNodes& mn,
                   const std::vector<AdapterNodes>& stack, const NetConfig& cfg, bool decoupled) {
  Node x = g.input(patchify(image, cfg.patch));
  for (std::size_t l = 0; l < mn.backbone.size(); ++l) {
    Node h = g.gelu(g.add_row_bias(g.matmul(x, mn.backbone[l].first), mn.backbone[l].second));
    Node a = decoupled
                 ? decoupled_adapter_forward(g, h, stack[l], cfg.adapter)
                 : vanilla_adapter_forward(g, h, stack[l].W_down_for, stack[l].W_up_for);
    x = g.add(h, a);
  }
  return x;
}

/// Two trainable layers from tokens back to per-pixel logits.
inline Node decode(Graph& g, Node feature, const ModelNodes& mn, const NetConfig& cfg) {
  Node h = g.gelu(g.add_row_bias(g.matmul(feature, mn.dec_W1), mn.dec_b1));
  Node out = g.add_row_bias(g.matmul(h, mn.dec_W2), mn.dec_b2);
  return g.patches_to_image(out, cfg.H, cfg.W, cfg.patch);
}

// ---- losses ----------------------------------------------------------------

/// Boundary-emphasizing pixel weights, w = 1 + 5 |boxmean_k(GT) - GT| with an
/// in-bounds k x k window, k = max(3, odd(H/8)).
inline Tensor pixel_weights(const Tensor& gt) {
  const std::size_t H = gt.rows(), W = gt.cols();
  const std::size_t k = std::max<std::size_t>(3, (H / 8) | 1);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor w({H, W});
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(H); ++r) {
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(W); ++c) {
      double acc = 0.0;
      std::size_t cnt = 0;
      for (std::ptrdiff_t dr = -half; dr <= half; ++dr) {
        for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
          const std::ptrdiff_t rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(H) ||
              cc >= static_cast<std::ptrdiff_t>(W)) {
            continue;
          }
          acc += gt.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
          ++cnt;
        }
      }
      const double mean = acc / static_cast<double>(cnt);
      w.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
          1.0 + 5.0 * std::abs(mean - gt.at(static_cast<std::size_t>(r),
                                            static_cast<std::size_t>(c)));
    }
  }
  return w;
}

/// Weighted BCE on logits: sum(w * bce) / sum(w), stabilized per pixel.
inline Node weighted_bce(Graph& g, Node logits, const Tensor& gt, const Tensor& w) {
  double wsum = 0.0;
  for (double v : w.data()) wsum += v;
  return g.affine(g.sum(g.cmul(g.bce_logits(logits, gt), w)), 1.0 / wsum, 0.0);
}

/// Weighted IoU loss: 1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1).
inline Node weighted_iou(Graph& g, Node logits, const Tensor& gt, const Tensor& w) {
  Tensor wg(w.shape()), w_not_g(w.shape());
  double sum_wg = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    wg[i] = w[i] * gt[i];
    w_not_g[i] = w[i] * (1.0 - gt[i]);
    sum_wg += wg[i];
  }
  Node p = g.sigmoid(logits);
  Node inter = g.affine(g.sum(g.cmul(p, wg)), 1.0, 1.0);
  Node uni = g.affine(g.sum(g.cmul(p, w_not_g)), 1.0, sum_wg + 1.0);
  return g.affine(g.div(inter, uni), -1.0, 1.0);
}

/// Per-stream loss: weighted IoU + weighted BCE with one shared weight map.
inline Node stream_loss(Graph& g, Node logits, const Tensor& gt, const Tensor& w) {
  return g.add(weighted_iou(g, logits, gt, w), weighted_bce(g, logits, gt, w));
}

/// Recorded forward pass of one sample with per-stream losses attached.
struct ForwardTrace {
  Graph graph;
  ModelNodes nodes;
  Node F_R, F_T, P_R, P_T, P_F;
  Node L_F, L_R, L_T, L;
};

/// Full forward: both encoders, three shared-decoder streams
/// P_R = D(F_R), P_T = D(F_T), P_F = D(F_R + F_T), and the losses.
inline ForwardTrace trace_forward(const Sample& s, const ModelParams& m, bool decoupled) {
  s.validate();
  ForwardTrace t;
  t.nodes = register_model(t.graph, m);
  Graph& g = t.graph;
  t.F_R = encode(g, s.I_R, t.nodes, t.nodes.theta_R, m.cfg, decoupled);
  t.F_T = encode(g, s.I_T, t.nodes, t.nodes.theta_T, m.cfg, decoupled);
  t.P_R = decode(g, t.F_R, t.nodes, m.cfg);
  t.P_T = decode(g, t.F_T, t.nodes, m.cfg);
  t.P_F = decode(g, g.add(t.F_R, t.F_T), t.nodes, m.cfg);
  const Tensor w = pixel_weights(s.GT);
  t.L_F = stream_loss(g, t.P_F, s.GT, w);
  t.L_R = stream_loss(g, t.P_R, s.GT, w);
  t.L_T = stream_loss(g, t.P_T, s.GT, w);
  t.L = g.add(g.add(t.L_F, t.L_R), t.L_T);
  return t;
}

/// Tensor-level outputs of the forward pass.
inline StreamOutputs forward_all(const Sample& s, const ModelParams& m, bool decoupled) {
  ForwardTrace t = trace_forward(s, m, decoupled);
  return StreamOutputs{t.graph.value(t.P_R), t.graph.value(t.P_T), t.graph.value(t.P_F),
                       t.graph.value(t.F_R), t.graph.value(t.F_T)};
}

/// Mean of the three per-stream sigmoids; lands in [0,1].
inline Tensor final_prediction(const Tensor& P_R, const Tensor& P_T, const Tensor& P_F) {
  if (!P_R.same_shape(P_T) || !P_R.same_shape(P_F)) {
    throw std::invalid_argument("final_prediction: shape mismatch");
  }
  Tensor out(P_R.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (sigmoid_scalar(P_R[i]) + sigmoid_scalar(P_T[i]) + sigmoid_scalar(P_F[i])) / 3.0;
  }
  return out;
}

// ---- checkpoints -----------------------------------------------------------

namespace detail {

inline void write_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64le(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  write_u64le(os, v);
}

inline std::uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint64_t read_u64le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline double read_f64le(std::istream& is) {
  const std::uint64_t v = read_u64le(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

constexpr char kCkptMagic[6] = {'G', 'W', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

}  // namespace detail

/// Writes every parameter (backbone included) as
/// (path, shape, little-endian f64 payload) records behind a versioned header.
inline void save_checkpoint(const ModelParams& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_u32le(os, detail::kCkptVersion);
  std::uint64_t count = 0;
  visit_params(m, [&](const std::string&, const Tensor&) { ++count; });
  detail::write_u64le(os, count);
  visit_params(m, [&](const std::string& p, const Tensor& t) {
    detail::write_u32le(os, static_cast<std::uint32_t>(p.size()));
    os.write(p.data(), static_cast<std::streamsize>(p.size()));
    detail::write_u32le(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t dim : t.shape()) detail::write_u64le(os, dim);
    for (double v : t.data()) detail::write_f64le(os, v);
  });
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

/// Restores parameters into a model of matching structure. Path or shape
/// mismatches against the target model are errors.
inline void load_checkpoint(ModelParams& m, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[6];
  is.read(magic, 6);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 6) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  const std::uint32_t version = detail::read_u32le(is);
  if (version != detail::kCkptVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint64_t count = detail::read_u64le(is);
  std::map<std::string, Tensor> records;
  for (std::uint64_t r = 0; r < count; ++r) {
    const std::uint32_t plen = detail::read_u32le(is);
    std::string p(plen, '\0');
    is.read(p.data(), plen);
    if (!is) throw std::runtime_error("checkpoint: truncated");
    const std::uint32_t ndim = detail::read_u32le(is);
    std::vector<std::size_t> shape(ndim);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      shape[i] = static_cast<std::size_t>(detail::read_u64le(is));
      n *= shape[i];
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = detail::read_f64le(is);
    records.emplace(std::move(p), Tensor(std::move(shape), std::move(data)));
  }
  std::size_t expected = 0;
  visit_params(m, [&](const std::string&, const Tensor&) { ++expected; });
  if (records.size() != expected) {
    throw std::runtime_error("checkpoint: parameter count mismatch");
  }
  visit_params(m, [&](const std::string& p, Tensor& t) {
    auto it = records.find(p);
    if (it == records.end()) throw std::runtime_error("checkpoint: missing parameter " + p);
    if (!it->second.same_shape(t)) throw std::runtime_error("checkpoint: shape mismatch for " + p);
    t = it->second;
  });
}

}  // namespace gradweave
