#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "xmb/error.hpp"
#include "xmb/mat.hpp"

namespace xmb {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Mat& value() const;
  const Mat& grad() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node
// vector is already topologically sorted. Single-threaded by construction.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Var leaf(Mat value) { return push(std::move(value), true, {}, "leaf"); }
  Var constant(Mat value) { return push(std::move(value), false, {}, "constant"); }

  Var record(Mat value, bool needs_grad, Backward backward, const char* op) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite result in ") + op);
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  Mat& grad_ref(std::size_t id) { return nodes_[id].grad; }
  const Mat& grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Fills the gradient of `loss` (a 1×1 node) into every node. Gradients are
  // reset first, so repeated calls are idempotent.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("loss node belongs to another tape");
    const Mat& lv = nodes_[loss.id].value;
    if (lv.rows != 1 || lv.cols != 1) throw ContractError("backward needs a scalar loss, got " + lv.shape_str());
    for (auto& n : nodes_) n.grad = Mat(n.value.rows, n.value.cols, 0.0);
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, i);
    }
    for (const auto& n : nodes_) {
      if (!n.grad.all_finite()) throw NumericError("non-finite gradient");
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward backward;
    bool needs_grad = false;
  };

  Var push(Mat value, bool needs_grad, Backward bw, const char* op) {
    return record(std::move(value), needs_grad, std::move(bw), op);
  }

  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->value(id); }
inline const Mat& Var::grad() const { return tape->grad(id); }

namespace detail {

inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

// b either matches a or is a single row broadcast across a's rows.
inline bool broadcastable(const Mat& a, const Mat& b) {
  return a.same_shape(b) || (b.rows == 1 && b.cols == a.cols);
}

inline void accumulate_broadcast(const Mat& g, Mat& target, double sign) {
  if (target.rows == g.rows) {
    for (std::size_t i = 0; i < g.size(); ++i) target[i] += sign * g[i];
  } else {
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) target[c] += sign * g(r, c);
  }
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  detail::require(detail::broadcastable(av, bv), "add " + av.shape_str() + " + " + bv.shape_str());
  Mat out = av;
  if (bv.rows == av.rows) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  } else {
    for (std::size_t r = 0; r < out.rows; ++r)
      for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bv[c];
  }
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    if (tp.needs_grad(ia)) detail::accumulate_broadcast(g, tp.grad_ref(ia), 1.0);
                    if (tp.needs_grad(ib)) detail::accumulate_broadcast(g, tp.grad_ref(ib), 1.0);
                  },
                  "add");
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  detail::require(detail::broadcastable(av, bv), "sub " + av.shape_str() + " - " + bv.shape_str());
  Mat out = av;
  if (bv.rows == av.rows) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  } else {
    for (std::size_t r = 0; r < out.rows; ++r)
      for (std::size_t c = 0; c < out.cols; ++c) out(r, c) -= bv[c];
  }
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    if (tp.needs_grad(ia)) detail::accumulate_broadcast(g, tp.grad_ref(ia), 1.0);
                    if (tp.needs_grad(ib)) detail::accumulate_broadcast(g, tp.grad_ref(ib), -1.0);
                  },
                  "sub");
}

inline Var scale(Var a, double s) {
  Mat out = a.value();
  for (double& v : out.data) v *= s;
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.record(std::move(out), t.needs_grad(ia),
                  [ia, s](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    Mat& ga = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                  },
                  "scale");
}

// Elementwise product; both operands must share a shape.
inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  detail::require(av.same_shape(bv), "mul " + av.shape_str() + " .* " + bv.shape_str());
  Mat out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    if (tp.needs_grad(ia)) {
                      const Mat& bvv = tp.value(ib);
                      Mat& ga = tp.grad_ref(ia);
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvv[i];
                    }
                    if (tp.needs_grad(ib)) {
                      const Mat& avv = tp.value(ia);
                      Mat& gb = tp.grad_ref(ib);
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avv[i];
                    }
                  },
                  "mul");
}

// Multiplies row r of `a` by weights[r].
inline Var scale_rows(Var a, std::vector<double> weights) {
  const Mat& av = a.value();
  detail::require(weights.size() == av.rows, "scale_rows weight count " + std::to_string(weights.size()) +
                                                 " for " + av.shape_str());
  Mat out = av;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) *= weights[r];
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.record(std::move(out), t.needs_grad(ia),
                  [ia, w = std::move(weights)](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    Mat& ga = tp.grad_ref(ia);
                    for (std::size_t r = 0; r < g.rows; ++r)
                      for (std::size_t c = 0; c < g.cols; ++c) ga(r, c) += w[r] * g(r, c);
                  },
                  "scale_rows");
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.record(Mat(1, 1, s), t.needs_grad(ia),
                  [ia](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0];
                    for (double& v : tp.grad_ref(ia).data) v += g;
                  },
                  "sum");
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ContractError("mean of empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// X · Wᵀ for X: B×in and W: out×in.
inline Var linear(Var x, Var w) {
  detail::same_tape(x, w);
  Mat out = la::matmul_nt(x.value(), w.value());
  Tape& t = *x.tape;
  const std::size_t ix = x.id, iw = w.id;
  return t.record(std::move(out), t.needs_grad(ix) || t.needs_grad(iw),
                  [ix, iw](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    if (tp.needs_grad(ix)) la::add_matmul_nn(g, tp.value(iw), tp.grad_ref(ix));
                    if (tp.needs_grad(iw)) la::add_matmul_tn(g, tp.value(ix), tp.grad_ref(iw));
                  },
                  "linear");
}

// X · Wᵀ + b with b a 1×out row.
inline Var affine(Var x, Var w, Var b) {
  detail::same_tape(x, w);
  detail::same_tape(x, b);
  const Mat& bv = b.value();
  detail::require(bv.rows == 1 && bv.cols == w.value().rows,
                  "affine bias " + bv.shape_str() + " for weight " + w.value().shape_str());
  Mat out = la::matmul_nt(x.value(), w.value());
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bv[c];
  Tape& t = *x.tape;
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return t.record(std::move(out), t.needs_grad(ix) || t.needs_grad(iw) || t.needs_grad(ib),
                  [ix, iw, ib](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    if (tp.needs_grad(ix)) la::add_matmul_nn(g, tp.value(iw), tp.grad_ref(ix));
                    if (tp.needs_grad(iw)) la::add_matmul_tn(g, tp.value(ix), tp.grad_ref(iw));
                    if (tp.needs_grad(ib)) detail::accumulate_broadcast(g, tp.grad_ref(ib), 1.0);
                  },
                  "affine");
}

inline Var tanh(Var a) {
  Mat out = a.value();
  for (double& v : out.data) v = std::tanh(v);
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.record(std::move(out), t.needs_grad(ia),
                  [ia](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    const Mat& y = tp.value(self);
                    Mat& ga = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
                  },
                  "tanh");
}

// Column-wise concatenation [a | b].
inline Var concat(Var a, Var b) {
  detail::same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  detail::require(av.rows == bv.rows, "concat rows " + av.shape_str() + " | " + bv.shape_str());
  Mat out(av.rows, av.cols + bv.cols);
  for (std::size_t r = 0; r < av.rows; ++r) {
    std::copy(av.row_span(r).begin(), av.row_span(r).end(), out.row_span(r).begin());
    std::copy(bv.row_span(r).begin(), bv.row_span(r).end(), out.row_span(r).begin() + av.cols);
  }
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  const std::size_t ac = av.cols;
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib, ac](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    for (std::size_t r = 0; r < g.rows; ++r) {
                      for (std::size_t c = 0; c < g.cols; ++c) {
                        if (c < ac) {
                          if (tp.needs_grad(ia)) tp.grad_ref(ia)(r, c) += g(r, c);
                        } else if (tp.needs_grad(ib)) {
                          tp.grad_ref(ib)(r, c - ac) += g(r, c);
                        }
                      }
                    }
                  },
                  "concat");
}

// Row lookup: out[r] = table[index[r]].
inline Var gather(Var table, const std::vector<int>& index) {
  const Mat& tv = table.value();
  Mat out(index.size(), tv.cols);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const int k = index[r];
    if (k < 0 || static_cast<std::size_t>(k) >= tv.rows) {
      throw IndexError("gather index " + std::to_string(k) + " outside table of " + std::to_string(tv.rows));
    }
    std::copy(tv.row_span(k).begin(), tv.row_span(k).end(), out.row_span(r).begin());
  }
  Tape& t = *table.tape;
  const std::size_t it = table.id;
  return t.record(std::move(out), t.needs_grad(it),
                  [it, index](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    Mat& gt = tp.grad_ref(it);
                    for (std::size_t r = 0; r < index.size(); ++r)
                      for (std::size_t c = 0; c < g.cols; ++c) gt(index[r], c) += g(r, c);
                  },
                  "gather");
}

// Per-row cross entropy −log softmax(logits)[target]. A target of -1 masks
// the row (zero loss, zero gradient). Returns B×1.
inline Var softmax_xent(Var logits, const std::vector<int>& targets) {
  const Mat& lv = logits.value();
  detail::require(targets.size() == lv.rows, "softmax_xent target count " + std::to_string(targets.size()) +
                                                 " for " + lv.shape_str());
  Mat out(lv.rows, 1);
  Mat probs(lv.rows, lv.cols);
  for (std::size_t r = 0; r < lv.rows; ++r) {
    const int k = targets[r];
    if (k < -1 || k >= static_cast<int>(lv.cols)) {
      throw IndexError("softmax_xent target " + std::to_string(k) + " outside " + std::to_string(lv.cols));
    }
    auto row = lv.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < lv.cols; ++c) {
      probs(r, c) = std::exp(row[c] - mx);
      z += probs(r, c);
    }
    for (std::size_t c = 0; c < lv.cols; ++c) probs(r, c) /= z;
    out[r] = k < 0 ? 0.0 : (mx + std::log(z) - row[k]);
  }
  Tape& t = *logits.tape;
  const std::size_t il = logits.id;
  return t.record(std::move(out), t.needs_grad(il),
                  [il, targets, probs = std::move(probs)](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    Mat& gl = tp.grad_ref(il);
                    for (std::size_t r = 0; r < probs.rows; ++r) {
                      if (targets[r] < 0) continue;
                      for (std::size_t c = 0; c < probs.cols; ++c) gl(r, c) += g[r] * probs(r, c);
                      gl(r, targets[r]) -= g[r];
                    }
                  },
                  "softmax_xent");
}

inline constexpr double kCosineFloor = 1e-12;

// Row-wise cosine similarity; b may be a single broadcast row. Returns B×1.
// The denominator ‖a‖‖b‖ is floored at kCosineFloor.
inline Var cosine(Var a, Var b) {
  detail::same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  detail::require(detail::broadcastable(av, bv), "cosine " + av.shape_str() + " vs " + bv.shape_str());
  const bool bc = bv.rows != av.rows;
  Mat out(av.rows, 1);
  for (std::size_t r = 0; r < av.rows; ++r) {
    auto ar = av.row_span(r);
    auto br = bv.row_span(bc ? 0 : r);
    out[r] = la::dot(ar, br) / std::max(la::norm(ar) * la::norm(br), kCosineFloor);
  }
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib, bc](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    const Mat& avv = tp.value(ia);
                    const Mat& bvv = tp.value(ib);
                    const Mat& cs = tp.value(self);
                    for (std::size_t r = 0; r < avv.rows; ++r) {
                      auto ar = avv.row_span(r);
                      auto br = bvv.row_span(bc ? 0 : r);
                      const double na = la::norm(ar), nb = la::norm(br);
                      const double den = na * nb;
                      const bool floored = den < kCosineFloor;
                      const double d = floored ? kCosineFloor : den;
                      for (std::size_t c = 0; c < avv.cols; ++c) {
                        // Quotient rule; with the floor active the denominator is a constant.
                        double da = br[c] / d;
                        double db = ar[c] / d;
                        if (!floored) {
                          da -= cs[r] * ar[c] / (na * na);
                          db -= cs[r] * br[c] / (nb * nb);
                        }
                        if (tp.needs_grad(ia)) tp.grad_ref(ia)(r, c) += g[r] * da;
                        if (tp.needs_grad(ib)) tp.grad_ref(ib)(bc ? 0 : r, c) += g[r] * db;
                      }
                    }
                  },
                  "cosine");
}

// Row-wise ‖a − b‖²; b may be a single broadcast row. Returns B×1.
inline Var sqnorm_diff(Var a, Var b) {
  detail::same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  detail::require(detail::broadcastable(av, bv), "sqnorm_diff " + av.shape_str() + " vs " + bv.shape_str());
  const bool bc = bv.rows != av.rows;
  Mat out(av.rows, 1);
  for (std::size_t r = 0; r < av.rows; ++r) {
    auto ar = av.row_span(r);
    auto br = bv.row_span(bc ? 0 : r);
    double s = 0.0;
    for (std::size_t c = 0; c < av.cols; ++c) s += (ar[c] - br[c]) * (ar[c] - br[c]);
    out[r] = s;
  }
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib, bc](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    const Mat& avv = tp.value(ia);
                    const Mat& bvv = tp.value(ib);
                    for (std::size_t r = 0; r < avv.rows; ++r) {
                      for (std::size_t c = 0; c < avv.cols; ++c) {
                        const double d = 2.0 * g[r] * (avv(r, c) - bvv(bc ? 0 : r, c));
                        if (tp.needs_grad(ia)) tp.grad_ref(ia)(r, c) += d;
                        if (tp.needs_grad(ib)) tp.grad_ref(ib)(bc ? 0 : r, c) -= d;
                      }
                    }
                  },
                  "sqnorm_diff");
}

// Mean over entries of (a − b)², a and b of equal shape. Returns 1×1.
inline Var mse(Var a, Var b) {
  detail::same_tape(a, b);
  detail::require(a.value().same_shape(b.value()), "mse " + a.value().shape_str() + " vs " + b.value().shape_str());
  const Mat& av = a.value();
  const Mat& bv = b.value();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  Tape& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(Mat(1, 1, s / n), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib, n](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0];
                    const Mat& avv = tp.value(ia);
                    const Mat& bvv = tp.value(ib);
                    for (std::size_t i = 0; i < avv.size(); ++i) {
                      const double d = 2.0 * g * (avv[i] - bvv[i]) / n;
                      if (tp.needs_grad(ia)) tp.grad_ref(ia)[i] += d;
                      if (tp.needs_grad(ib)) tp.grad_ref(ib)[i] -= d;
                    }
                  },
                  "mse");
}

// Forward value `forward`, backward identity (straight-through estimator).
inline Var straight_through(Var a, Mat forward) {
  detail::require(forward.same_shape(a.value()), "straight_through shape " + forward.shape_str());
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.record(std::move(forward), t.needs_grad(ia),
                  [ia](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    Mat& ga = tp.grad_ref(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  },
                  "straight_through");
}

}  // namespace xmb
