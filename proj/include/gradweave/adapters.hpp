// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "gradweave/graph.hpp"
#include "gradweave/tensor.hpp"

namespace gradweave {

/// Channel counts and activation-budget constants for one adapter.
struct AdapterConfig {
  std::size_t d = 0;        // input/output channels
  std::size_t d_hat = 32;   // bottleneck channels
  double alpha_for = 0.45;  // predefined foreground activation ratio
  double alpha_back = 0.35; // predefined background activation ratio
  double beta = 0.1;        // temperature scale on the learnable gate

  void validate() const {
    if (d_hat < 1 || d_hat > d) {
      throw std::invalid_argument("AdapterConfig: need 1 <= d_hat <= d");
    }
    if (alpha_for < 0.0 || alpha_for > 1.0 || alpha_back < 0.0 || alpha_back > 1.0 || beta < 0.0) {
      throw std::invalid_argument("AdapterConfig: alpha in [0,1], beta >= 0");
    }
    if (alpha_for + beta > 1.0 || alpha_back + beta > 1.0) {
      throw std::invalid_argument("AdapterConfig: alpha + beta must not exceed 1");
    }
  }
};

/// Trainable tensors for a decoupled adapter pair plus its gate.
/// The foreground pathway doubles as the vanilla adapter when masking is off.
struct AdapterParams {
  Tensor W_down_for;  // [d, d_hat]
  Tensor W_up_for;    // [d_hat, d]
  Tensor W_down_back; // [d, d_hat]
  Tensor W_up_back;   // [d_hat, d]
  Tensor gate_A;      // [2, d], applied to the token-mean-pooled feature
  Tensor gate_b;      // [2, 1]

  static AdapterParams shaped(const AdapterConfig& cfg) {
    cfg.validate();
    AdapterParams p;
    p.W_down_for = Tensor({cfg.d, cfg.d_hat});
    p.W_up_for = Tensor({cfg.d_hat, cfg.d});
    p.W_down_back = Tensor({cfg.d, cfg.d_hat});
    p.W_up_back = Tensor({cfg.d_hat, cfg.d});
    p.gate_A = Tensor({2, cfg.d});
    p.gate_b = Tensor({2, 1});
    return p;
  }
};

/// Graph-side handles to one adapter's registered parameters.
struct AdapterNodes {
  Node W_down_for, W_up_for, W_down_back, W_up_back, gate_A, gate_b;
};

inline AdapterNodes register_adapter(Graph& g, const std::string& prefix, const AdapterParams& p) {
  return AdapterNodes{
      g.param(prefix + ".W_down_for", p.W_down_for), g.param(prefix + ".W_up_for", p.W_up_for),
      g.param(prefix + ".W_down_back", p.W_down_back), g.param(prefix + ".W_up_back", p.W_up_back),
      g.param(prefix + ".gate_A", p.gate_A), g.param(prefix + ".gate_b", p.gate_b)};
}

/// Bottleneck adapter: up-projection of GeLU of down-projection, per token.
inline Node vanilla_adapter_forward(Graph& g, Node x, Node W_down, Node W_up) {
  return g.matmul(g.gelu(g.matmul(x, W_down)), W_up);
}

/// Tensor-level convenience wrapper of the same computation.
inline Tensor vanilla_adapter_forward(const Tensor& x, const Tensor& W_down, const Tensor& W_up) {
  Graph g;
  Node out = vanilla_adapter_forward(g, g.input(x), g.input(W_down), g.input(W_up));
  return g.value(out);
}

/// Per-row TopK mask on a plain tensor; same semantics and tie-break
/// (lower column index wins) as the graph op.
inline Tensor topk_mask(const Tensor& v, std::size_t k, bool largest) {
  Graph g;
  Node out = g.topk_mask(g.input(v), k, largest);
  return g.value(out);
}

/// Learnable activation ratios: softmax of a linear map of the
/// token-mean-pooled feature. Returns (G_for, G_back), positive, summing to 1.
inline std::pair<double, double> gate_ratios(const Tensor& x, const Tensor& gate_A,
                                             const Tensor& gate_b) {
  Graph g;
  Node pooled = g.mean_pool_rows(g.input(x));
  Node logits = g.add(g.matmul(g.input(gate_A), pooled), g.input(gate_b));
  Node sm = g.softmax(logits);
  return {g.value(sm)[0], g.value(sm)[1]};
}

/// Integer channel budgets: floor(d_hat * (alpha + beta * G)) per pathway.
inline std::pair<std::size_t, std::size_t> activation_budget(const AdapterConfig& cfg, double G_for,
                                                             double G_back) {
  if (G_for < 0.0 || G_for > 1.0 || G_back < 0.0 || G_back > 1.0) {
    throw std::invalid_argument("activation_budget: gate ratios must lie in [0,1]");
  }
  const auto budget = [&](double alpha, double G) {
    return static_cast<std::size_t>(
        std::floor(static_cast<double>(cfg.d_hat) * (alpha + cfg.beta * G)));
  };
  return {budget(cfg.alpha_for, G_for), budget(cfg.alpha_back, G_back)};
}

/// Decoupled adapter: foreground pathway keeps the P_for largest bottleneck
/// channels per token, background pathway keeps the P_back smallest, and the
/// two up-projected outputs are summed. Budgets come from the gate; the floor
/// passes no gradient, so each pathway output is additionally scaled by
/// (0.5 + G) to keep the gate trainable. Zero-initialized gates make that
/// scale exactly 1.
inline Node decoupled_adapter_forward(Graph& g, Node x, const AdapterNodes& a,
                                      const AdapterConfig& cfg) {
  cfg.validate();
  Node pooled = g.mean_pool_rows(x);
  Node logits = g.add(g.matmul(a.gate_A, pooled), a.gate_b);
  Node gates = g.softmax(logits);
  Node g_for = g.element(gates, 0);
  Node g_back = g.element(gates, 1);
  const auto [P_for, P_back] = activation_budget(cfg, g.value(g_for)[0], g.value(g_back)[0]);
  if (cfg.beta > 0.0) {
    // distance of each budget argument to the nearest floor boundary, in gate
    // units; lets gradient audits reject configurations where a tiny gate
    // perturbation would change the integer budget
    const auto floor_margin = [&](double alpha, double G) {
      const double arg = static_cast<double>(cfg.d_hat) * (alpha + cfg.beta * G);
      const double frac = arg - std::floor(arg);
      return std::min(frac, 1.0 - frac) / (static_cast<double>(cfg.d_hat) * cfg.beta);
    };
    g.note_mask_margin(floor_margin(cfg.alpha_for, g.value(g_for)[0]));
    g.note_mask_margin(floor_margin(cfg.alpha_back, g.value(g_back)[0]));
  }

  Node fore = g.matmul(g.topk_mask(g.gelu(g.matmul(x, a.W_down_for)), P_for, true), a.W_up_for);
  Node back = g.matmul(g.topk_mask(g.gelu(g.matmul(x, a.W_down_back)), P_back, false), a.W_up_back);
  return g.add(g.scalar_mul(fore, g.affine(g_for, 1.0, 0.5)),
               g.scalar_mul(back, g.affine(g_back, 1.0, 0.5)));
}

inline Tensor decoupled_adapter_forward(const Tensor& x, const AdapterParams& p,
                                        const AdapterConfig& cfg) {
  Graph g;
  AdapterNodes a{g.input(p.W_down_for), g.input(p.W_up_for), g.input(p.W_down_back),
                 g.input(p.W_up_back), g.input(p.gate_A), g.input(p.gate_b)};
  // inputs instead of params: evaluation only
  Node out = decoupled_adapter_forward(g, g.input(x), a, cfg);
  return g.value(out);
}

}  // namespace gradweave
