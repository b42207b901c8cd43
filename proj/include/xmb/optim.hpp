#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "xmb/error.hpp"
#include "xmb/mat.hpp"
#include "xmb/tape.hpp"

namespace xmb {

// Stacks rows of several nodes (all of equal width) into one node.
inline Var stack_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("stack_rows of nothing");
  Tape& t = *parts.front().tape;
  std::vector<Mat> vals;
  std::vector<std::size_t> ids;
  bool ng = false;
  for (Var p : parts) {
    if (p.tape != &t) throw ContractError("stack_rows across tapes");
    vals.push_back(p.value());
    ids.push_back(p.id);
    ng = ng || t.needs_grad(p.id);
  }
  Mat out = vstack(vals);
  return t.record(std::move(out), ng,
                  [ids](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    std::size_t off = 0;
                    for (std::size_t id : ids) {
                      const std::size_t n = tp.value(id).size();
                      if (tp.needs_grad(id)) {
                        Mat& gi = tp.grad_ref(id);
                        for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
                      }
                      off += n;
                    }
                  },
                  "stack_rows");
}

enum class OptimizerKind { Sgd, Adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

// First-order optimizer over a fixed list of parameter matrices. Optional
// masks pin selected entries at their current (zero) value.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double momentum = 0.0) : kind_(kind), lr_(lr), momentum_(momentum) {}

  void step(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
            const std::vector<const Mat*>& masks = {}) {
    if (params.size() != grads.size()) throw ContractError("optimizer param/grad count mismatch");
    if (m_.empty()) {
      for (const Mat* p : params) {
        m_.emplace_back(p->rows, p->cols, 0.0);
        v_.emplace_back(p->rows, p->cols, 0.0);
      }
    }
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Mat& p = *params[k];
      const Mat& g = grads[k];
      const Mat* mask = k < masks.size() ? masks[k] : nullptr;
      for (std::size_t i = 0; i < p.size(); ++i) {
        double step = 0.0;
        if (kind_ == OptimizerKind::Sgd) {
          m_[k][i] = momentum_ * m_[k][i] + g[i];
          step = lr_ * m_[k][i];
        } else {
          m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * g[i];
          v_[k][i] = b2 * v_[k][i] + (1.0 - b2) * g[i] * g[i];
          step = lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps);
        }
        p[i] -= step;
        if (mask && (*mask)[i] == 0.0) p[i] = 0.0;
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  std::size_t t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace xmb
