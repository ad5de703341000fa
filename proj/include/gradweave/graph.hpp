// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "gradweave/tensor.hpp"

namespace gradweave {

/// Handle to a node on a Graph's tape.
struct Node {
  std::size_t id = 0;
};

/// Parameter path -> gradient tensor (same shape as the parameter).
using GradientMap = std::map<std::string, Tensor>;

/// Recorded forward trace with reverse-mode differentiation.
///
/// Leaves are either inputs (constants, frozen weights) or named parameters.
/// Every op appends a record whose backprop closure scatters the node adjoint
/// onto its inputs. backward() is const and may be called repeatedly on the
/// same trace, once per loss node. Single-threaded per instance.
class Graph {
 public:
  Graph() = default;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Node input(Tensor v) { return push(std::move(v), {}, nullptr, false); }

  /// Smallest distance observed to a masking-decision flip (TopK value gaps,
  /// budget-floor boundaries). Gradient audits use it to reject near-tie
  /// configurations where the mask is not locally constant.
  double mask_decision_margin() const { return mask_margin_; }
  void note_mask_margin(double m) { mask_margin_ = std::min(mask_margin_, m); }

  Node param(const std::string& path, Tensor v) {
    Node n = push(std::move(v), {}, nullptr, true);
    params_.emplace_back(path, n.id);
    return n;
  }

  const Tensor& value(Node n) const { return rec(n.id).value; }
  std::size_t num_nodes() const { return records_.size(); }

  // ---- ops -----------------------------------------------------------

  Node add(Node a, Node b) {
    require_same_shape(a, b, "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(std::move(out), {a.id, b.id},
                [](const Graph&, const BackCtx& c) {
                  c.accumulate(0, c.adj);
                  c.accumulate(1, c.adj);
                });
  }

  Node sub(Node a, Node b) {
    require_same_shape(a, b, "sub");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(std::move(out), {a.id, b.id},
                [](const Graph&, const BackCtx& c) {
                  c.accumulate(0, c.adj);
                  Tensor neg = c.adj;
                  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -neg[i];
                  c.accumulate(1, neg);
                });
  }

  Node mul(Node a, Node b) {
    require_same_shape(a, b, "mul");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(std::move(out), {a.id, b.id},
                [](const Graph& g, const BackCtx& c) {
                  const Tensor& va = g.rec(c.in(0)).value;
                  const Tensor& vb2 = g.rec(c.in(1)).value;
                  Tensor da = c.adj;
                  Tensor db = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i) {
                    da[i] *= vb2[i];
                    db[i] *= va[i];
                  }
                  c.accumulate(0, da);
                  c.accumulate(1, db);
                });
  }

  /// Elementwise multiply by a constant tensor (no gradient into the constant).
  Node cmul(Node a, Tensor constant) {
    if (!value(a).same_shape(constant)) {
      throw std::invalid_argument("cmul: shape mismatch " + value(a).shape_str() + " vs " +
                                  constant.shape_str());
    }
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= constant[i];
    return push(std::move(out), {a.id},
                [cst = std::move(constant)](const Graph&, const BackCtx& c) {
                  Tensor da = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i) da[i] *= cst[i];
                  c.accumulate(0, da);
                });
  }

  /// alpha * a + beta, elementwise with scalar constants.
  Node affine(Node a, double alpha, double beta) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * out[i] + beta;
    return push(std::move(out), {a.id},
                [alpha](const Graph&, const BackCtx& c) {
                  Tensor da = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i) da[i] *= alpha;
                  c.accumulate(0, da);
                });
  }

  Node matmul(Node a, Node b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows()) {
      throw std::invalid_argument("matmul: incompatible shapes " + va.shape_str() + " vs " +
                                  vb.shape_str());
    }
    const std::size_t m = va.rows(), k = va.cols(), n = vb.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = va.at(i, p);
        if (aip == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * vb.at(p, j);
      }
    }
    return push(std::move(out), {a.id, b.id},
                [](const Graph& g, const BackCtx& c) {
                  const Tensor& A = g.rec(c.in(0)).value;
                  const Tensor& B = g.rec(c.in(1)).value;
                  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
                  // dA = adj * B^T ; dB = A^T * adj
                  Tensor da({m, k});
                  Tensor db({k, n});
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                      const double u = c.adj.at(i, j);
                      if (u == 0.0) continue;
                      for (std::size_t p = 0; p < k; ++p) {
                        da.at(i, p) += u * B.at(p, j);
                        db.at(p, j) += u * A.at(i, p);
                      }
                    }
                  }
                  c.accumulate(0, da);
                  c.accumulate(1, db);
                });
  }

  /// x[m,n] + row-broadcast bias b[1,n].
  Node add_row_bias(Node x, Node b) {
    const Tensor& vx = value(x);
    const Tensor& vb = value(b);
    if (vx.rank() != 2 || vb.rank() != 2 || vb.rows() != 1 || vb.cols() != vx.cols()) {
      throw std::invalid_argument("add_row_bias: shape mismatch " + vx.shape_str() + " vs " +
                                  vb.shape_str());
    }
    Tensor out = vx;
    for (std::size_t i = 0; i < vx.rows(); ++i)
      for (std::size_t j = 0; j < vx.cols(); ++j) out.at(i, j) += vb.at(0, j);
    return push(std::move(out), {x.id, b.id},
                [](const Graph&, const BackCtx& c) {
                  c.accumulate(0, c.adj);
                  Tensor db({1, c.adj.cols()});
                  for (std::size_t i = 0; i < c.adj.rows(); ++i)
                    for (std::size_t j = 0; j < c.adj.cols(); ++j) db.at(0, j) += c.adj.at(i, j);
                  c.accumulate(1, db);
                });
  }

  Node gelu(Node a) {
    Tensor out = gradweave::gelu(value(a));
    return push(std::move(out), {a.id},
                [](const Graph& g, const BackCtx& c) {
                  const Tensor& z = g.rec(c.in(0)).value;
                  Tensor da = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i) da[i] *= gelu_derivative_scalar(z[i]);
                  c.accumulate(0, da);
                });
  }

  Node sigmoid(Node a) {
    Tensor out = gradweave::sigmoid(value(a));
    return push(std::move(out), {a.id},
                [](const Graph& g, const BackCtx& c) {
                  const Tensor& s = g.rec(c.self).value;
                  Tensor da = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i) da[i] *= s[i] * (1.0 - s[i]);
                  c.accumulate(0, da);
                });
  }

  /// Per-pixel binary cross-entropy on logits against constant targets,
  /// stabilized as max(p,0) - p*g + log1p(exp(-|p|)).
  Node bce_logits(Node logits, Tensor targets) {
    const Tensor& p = value(logits);
    if (!p.same_shape(targets)) {
      throw std::invalid_argument("bce_logits: shape mismatch");
    }
    Tensor out(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      out[i] = std::max(p[i], 0.0) - p[i] * targets[i] + std::log1p(std::exp(-std::abs(p[i])));
    }
    return push(std::move(out), {logits.id},
                [tg = std::move(targets)](const Graph& g, const BackCtx& c) {
                  const Tensor& lp = g.rec(c.in(0)).value;
                  Tensor da = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i) {
                    da[i] *= sigmoid_scalar(lp[i]) - tg[i];
                  }
                  c.accumulate(0, da);
                });
  }

  Node sum(Node a) {
    double s = 0.0;
    for (double v : value(a).data()) s += v;
    return push(Tensor::scalar(s), {a.id},
                [shape = value(a).shape()](const Graph&, const BackCtx& c) {
                  Tensor da = Tensor::full(shape, c.adj[0]);
                  c.accumulate(0, da);
                });
  }

  /// Mean over rows of x[m,n]; result is the column vector [n,1].
  Node mean_pool_rows(Node x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 2) throw std::invalid_argument("mean_pool_rows: rank-2 input required");
    const std::size_t m = vx.rows(), n = vx.cols();
    Tensor out({n, 1});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += vx.at(i, j);
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    return push(std::move(out), {x.id},
                [m, n](const Graph&, const BackCtx& c) {
                  Tensor dx({m, n});
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      dx.at(i, j) = c.adj[j] / static_cast<double>(m);
                  c.accumulate(0, dx);
                });
  }

  Node div(Node a, Node b) {
    require_same_shape(a, b, "div");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= vb[i];
    return push(std::move(out), {a.id, b.id},
                [](const Graph& g, const BackCtx& c) {
                  const Tensor& va = g.rec(c.in(0)).value;
                  const Tensor& vb2 = g.rec(c.in(1)).value;
                  Tensor da = c.adj;
                  Tensor db = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i) {
                    da[i] /= vb2[i];
                    db[i] *= -va[i] / (vb2[i] * vb2[i]);
                  }
                  c.accumulate(0, da);
                  c.accumulate(1, db);
                });
  }

  /// Broadcast-multiply x by a single-element node s.
  Node scalar_mul(Node x, Node s) {
    if (value(s).size() != 1) throw std::invalid_argument("scalar_mul: s must be a scalar node");
    const double sv = value(s)[0];
    Tensor out = value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
    return push(std::move(out), {x.id, s.id},
                [](const Graph& g, const BackCtx& c) {
                  const Tensor& vx = g.rec(c.in(0)).value;
                  const double s2 = g.rec(c.in(1)).value[0];
                  Tensor dx = c.adj;
                  double ds = 0.0;
                  for (std::size_t i = 0; i < dx.size(); ++i) {
                    ds += c.adj[i] * vx[i];
                    dx[i] *= s2;
                  }
                  c.accumulate(0, dx);
                  c.accumulate(1, Tensor::scalar(ds));
                });
  }

  /// Single element a[i] as a scalar node.
  Node element(Node a, std::size_t i) {
    if (i >= value(a).size()) throw std::invalid_argument("element: index out of range");
    return push(Tensor::scalar(value(a)[i]), {a.id},
                [i, shape = value(a).shape()](const Graph&, const BackCtx& c) {
                  Tensor da(shape);
                  da[i] = c.adj[0];
                  c.accumulate(0, da);
                });
  }

  /// Softmax over all entries (used on small logit vectors).
  Node softmax(Node a) {
    const Tensor& v = value(a);
    Tensor out(v.shape());
    double mx = v[0];
    for (double x : v.data()) mx = std::max(mx, x);
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      out[i] = std::exp(v[i] - mx);
      z += out[i];
    }
    for (std::size_t i = 0; i < v.size(); ++i) out[i] /= z;
    return push(std::move(out), {a.id},
                [](const Graph& g, const BackCtx& c) {
                  // dx_i = y_i (adj_i - sum_j adj_j y_j)
                  const Tensor& sm = g.rec(c.self).value;
                  double dot = 0.0;
                  for (std::size_t i = 0; i < sm.size(); ++i) dot += c.adj[i] * sm[i];
                  Tensor da(sm.shape());
                  for (std::size_t i = 0; i < sm.size(); ++i) da[i] = sm[i] * (c.adj[i] - dot);
                  c.accumulate(0, da);
                });
  }

  /// Per-row TopK mask: keeps k largest (largest=true) or k smallest
  /// (largest=false) entries of each row, zeros the rest. Ties keep the lower
  /// column index. Dropped entries get exactly zero gradient; kept entries
  /// pass the upstream gradient through unchanged.
  Node topk_mask(Node a, std::size_t k, bool largest) {
    const Tensor& v = value(a);
    if (v.rank() != 2) throw std::invalid_argument("topk_mask: rank-2 input required");
    const std::size_t m = v.rows(), n = v.cols();
    if (k > n) throw std::invalid_argument("topk_mask: k out of range");
    std::vector<std::uint8_t> mask(m * n, 0);
    std::vector<std::size_t> order(n);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return largest ? v.at(i, x) > v.at(i, y) : v.at(i, x) < v.at(i, y);
      });
      for (std::size_t r = 0; r < k; ++r) {
        mask[i * n + order[r]] = 1;
        out.at(i, order[r]) = v.at(i, order[r]);
      }
      if (k > 0 && k < n) {
        note_mask_margin(std::abs(v.at(i, order[k - 1]) - v.at(i, order[k])));
      }
    }
    return push(std::move(out), {a.id},
                [mk = std::move(mask)](const Graph&, const BackCtx& c) {
                  Tensor da = c.adj;
                  for (std::size_t i = 0; i < da.size(); ++i)
                    if (!mk[i]) da[i] = 0.0;
                  c.accumulate(0, da);
                });
  }

  /// Reassemble per-patch pixel rows [T, p*p] into an [H, W] image,
  /// patches in row-major order. Pure permutation; gradient is the inverse
  /// scatter.
  Node patches_to_image(Node x, std::size_t H, std::size_t W, std::size_t p) {
    const Tensor& v = value(x);
    if (H % p != 0 || W % p != 0) throw std::invalid_argument("patches_to_image: p must divide H and W");
    const std::size_t T = (H / p) * (W / p);
    if (v.rank() != 2 || v.rows() != T || v.cols() != p * p) {
      throw std::invalid_argument("patches_to_image: expected [" + std::to_string(T) + "x" +
                                  std::to_string(p * p) + "], got " + v.shape_str());
    }
    Tensor out({H, W});
    const std::size_t pw = W / p;
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        const std::size_t t = (r / p) * pw + (c / p);
        const std::size_t inner = (r % p) * p + (c % p);
        out.at(r, c) = v.at(t, inner);
      }
    }
    return push(std::move(out), {x.id},
                [H, W, p, T](const Graph&, const BackCtx& c) {
                  Tensor dx({T, p * p});
                  const std::size_t pw = W / p;
                  for (std::size_t r = 0; r < H; ++r) {
                    for (std::size_t cc = 0; cc < W; ++cc) {
                      const std::size_t t = (r / p) * pw + (cc / p);
                      const std::size_t inner = (r % p) * p + (cc % p);
                      dx.at(t, inner) += c.adj.at(r, cc);
                    }
                  }
                  c.accumulate(0, dx);
                });
  }

  // ---- reverse pass ----------------------------------------------------

  /// Gradients of a scalar loss node with respect to every registered
  /// parameter. Parameters the loss does not reach get zero gradients;
  /// inputs (frozen values) get no entry.
  GradientMap backward(Node loss) const {
    if (loss.id >= records_.size()) throw std::invalid_argument("backward: foreign node");
    if (rec(loss.id).value.size() != 1) {
      throw std::invalid_argument("backward: loss node must be scalar, got " +
                                  rec(loss.id).value.shape_str());
    }
    std::vector<Tensor> adjoints(records_.size());
    adjoints[loss.id] = Tensor::full(rec(loss.id).value.shape(), 1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      const Record& r = records_[id];
      if (!r.grad_reachable || adjoints[id].size() == 0 || !r.backprop) continue;
      BackCtx ctx{adjoints[id], r.inputs, adjoints, id, records_};
      r.backprop(*this, ctx);
    }
    GradientMap out;
    for (const auto& [path, id] : params_) {
      if (adjoints[id].size() != 0) {
        out.emplace(path, std::move(adjoints[id]));
      } else {
        out.emplace(path, Tensor::zeros(rec(id).value.shape()));
      }
    }
    return out;
  }

 private:
  struct Record;

  /// Closure context handed to backprop lambdas.
  struct BackCtx {
    const Tensor& adj;
    const std::vector<std::size_t>& inputs;
    std::vector<Tensor>& adjoints;
    std::size_t self;
    const std::vector<Record>& records;

    std::size_t in(std::size_t k) const { return inputs[k]; }

    void accumulate(std::size_t k, const Tensor& g) const {
      const std::size_t id = inputs[k];
      if (!records[id].grad_reachable) return;
      Tensor& slot = adjoints[id];
      if (slot.size() == 0) {
        slot = g;
      } else {
        for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
      }
    }
  };

  using BackFn = std::function<void(const Graph&, const BackCtx&)>;

  struct Record {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackFn backprop;
    bool grad_reachable = false;
  };

  Node push(Tensor value, std::vector<std::size_t> inputs, BackFn fn, bool is_param = false) {
    bool reach = is_param;
    for (std::size_t id : inputs) reach = reach || records_[id].grad_reachable;
    records_.push_back(Record{std::move(value), std::move(inputs), std::move(fn), reach});
    return Node{records_.size() - 1};
  }

  const Record& rec(std::size_t id) const { return records_[id]; }

  void require_same_shape(Node a, Node b, const char* op) const {
    if (!value(a).same_shape(value(b))) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + value(a).shape_str() +
                                  " vs " + value(b).shape_str());
    }
  }

  std::vector<Record> records_;
  std::vector<std::pair<std::string, std::size_t>> params_;
  double mask_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace gradweave
