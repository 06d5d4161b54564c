#pragma once

// Reverse-mode automatic differentiation over Eigen double matrices.
// A Tape owns the computation graph of one forward pass; Vars are cheap
// handles into it. Persistent parameters live in Param objects and are
// bound to a tape as leaves; after backward() their gradients are folded
// back into Param::grad in creation order, so results are deterministic.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gfslt/errors.hpp"

namespace gfslt::ad {

using Mat = Eigen::MatrixXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& val() const;
  long rows() const { return val().rows(); }
  long cols() const { return val().cols(); }
};

// A persistent, optimizable tensor. `grad` accumulates across backward
// passes until the optimizer consumes and zeroes it.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Mat v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {
    grad = Mat::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(); }
};

class Tape {
 public:
  Var constant(Mat v) { return push(std::move(v), false, {}, nullptr); }

  // A gradient-tracked leaf not tied to a Param (used by tests and by the
  // two-stage batch assembly in training).
  Var leaf(Mat v) { return push(std::move(v), true, {}, nullptr); }

  Var param(Param& p) {
    auto it = bound_index_.find(&p);
    if (it != bound_index_.end()) return Var{this, it->second};
    Var v = push(p.value, p.trainable, {}, nullptr);
    bound_index_.emplace(&p, v.id);
    bound_.emplace_back(&p, v.id);
    return v;
  }

  const Mat& val(Var v) const { return nodes_[v.id].val; }
  Mat& mutable_val(Var v) { return nodes_[v.id].val; }

  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  bool has_grad(Var v) const { return nodes_[v.id].grad_set; }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Creates a node. `backward` receives the tape and the node's output
  // gradient and must accumulate into its parents via accum_grad().
  Var push(Mat val, bool requires_grad, std::vector<int> parents,
           std::function<void(Tape&, const Mat&)> backward) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void accum_grad(int id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.grad_set) {
      n.grad = g;
      n.grad_set = true;
    } else {
      n.grad += g;
    }
  }

  void backward(Var loss) {
    if (loss.val().size() != 1)
      throw ShapeError("backward: loss must be a 1x1 scalar");
    accum_grad(loss.id, Mat::Ones(1, 1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.grad_set || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    for (auto& [p, id] : bound_) {
      if (nodes_[id].grad_set) p->grad += nodes_[id].grad;
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool grad_set = false;
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Tape&, const Mat&)> backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<Param*, int>> bound_;
  std::unordered_map<Param*, int> bound_index_;
};

inline const Mat& Var::val() const { return tape->val(*this); }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}

inline void check_same_tape(std::initializer_list<Var> vs) {
  const Tape* t = nullptr;
  for (const Var& v : vs) {
    if (!v.valid()) throw ConfigError("op applied to an invalid Var");
    if (t && v.tape != t) throw ConfigError("op mixes Vars from two tapes");
    t = v.tape;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / arithmetic ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add: shape mismatch");
  Tape& t = *a.tape;
  return t.push(a.val() + b.val(), detail::any_grad({a, b}), {a.id, b.id},
                [a, b](Tape& t, const Mat& g) {
                  t.accum_grad(a.id, g);
                  t.accum_grad(b.id, g);
                });
}

inline Var sub(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("sub: shape mismatch");
  Tape& t = *a.tape;
  return t.push(a.val() - b.val(), detail::any_grad({a, b}), {a.id, b.id},
                [a, b](Tape& t, const Mat& g) {
                  t.accum_grad(a.id, g);
                  t.accum_grad(b.id, -g);
                });
}

inline Var mul(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul: shape mismatch");
  Tape& t = *a.tape;
  return t.push(a.val().cwiseProduct(b.val()), detail::any_grad({a, b}),
                {a.id, b.id}, [a, b](Tape& t, const Mat& g) {
                  t.accum_grad(a.id, g.cwiseProduct(b.val()));
                  t.accum_grad(b.id, g.cwiseProduct(a.val()));
                });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.push(a.val() * s, t.requires_grad(a), {a.id},
                [a, s](Tape& t, const Mat& g) { t.accum_grad(a.id, g * s); });
}

// x * s where s is a 1x1 Var (learnable scalar such as 1/temperature).
inline Var scale_by(Var x, Var s) {
  detail::check_same_tape({x, s});
  if (s.val().size() != 1) throw ShapeError("scale_by: scalar must be 1x1");
  Tape& t = *x.tape;
  double sv = s.val()(0, 0);
  return t.push(x.val() * sv, detail::any_grad({x, s}), {x.id, s.id},
                [x, s, sv](Tape& t, const Mat& g) {
                  t.accum_grad(x.id, g * sv);
                  Mat gs(1, 1);
                  gs(0, 0) = g.cwiseProduct(x.val()).sum();
                  t.accum_grad(s.id, gs);
                });
}

// Elementwise exp; used on scalar log-temperatures.
inline Var exp(Var x) {
  Tape& t = *x.tape;
  Mat y = x.val().array().exp();
  return t.push(y, t.requires_grad(x), {x.id}, [x, y](Tape& t, const Mat& g) {
    t.accum_grad(x.id, g.cwiseProduct(y));
  });
}

// Exact (erf-based) GELU.
inline Var gelu(Var x) {
  Tape& t = *x.tape;
  const Mat& xv = x.val();
  Mat y = xv.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  });
  return t.push(y, t.requires_grad(x), {x.id}, [x](Tape& t, const Mat& g) {
    Mat d = x.val().unaryExpr([](double v) {
      double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
      double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
      return cdf + v * pdf;
    });
    t.accum_grad(x.id, g.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------------------
// Matrix products and layout ops
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dim mismatch");
  Tape& t = *a.tape;
  return t.push(a.val() * b.val(), detail::any_grad({a, b}), {a.id, b.id},
                [a, b](Tape& t, const Mat& g) {
                  t.accum_grad(a.id, g * b.val().transpose());
                  t.accum_grad(b.id, a.val().transpose() * g);
                });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dim mismatch");
  Tape& t = *a.tape;
  return t.push(a.val() * b.val().transpose(), detail::any_grad({a, b}),
                {a.id, b.id}, [a, b](Tape& t, const Mat& g) {
                  t.accum_grad(a.id, g * b.val());
                  t.accum_grad(b.id, g.transpose() * a.val());
                });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.push(a.val().transpose(), t.requires_grad(a), {a.id},
                [a](Tape& t, const Mat& g) {
                  t.accum_grad(a.id, g.transpose());
                });
}

// y = x * W^T + 1 b, with W (out x in) and b (1 x out).
inline Var linear(Var x, Var w, Var b) {
  detail::check_same_tape({x, w, b});
  if (x.cols() != w.cols())
    throw ShapeError("linear: input dim " + std::to_string(x.cols()) +
                     " != weight in-dim " + std::to_string(w.cols()));
  if (b.rows() != 1 || b.cols() != w.rows())
    throw ShapeError("linear: bias shape mismatch");
  Tape& t = *x.tape;
  Mat y = (x.val() * w.val().transpose()).rowwise() + b.val().row(0);
  return t.push(std::move(y), detail::any_grad({x, w, b}), {x.id, w.id, b.id},
                [x, w, b](Tape& t, const Mat& g) {
                  t.accum_grad(x.id, g * w.val());
                  t.accum_grad(w.id, g.transpose() * x.val());
                  t.accum_grad(b.id, g.colwise().sum());
                });
}

inline Var concat_cols(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row mismatch");
  Tape& t = *a.tape;
  Mat y(a.rows(), a.cols() + b.cols());
  y << a.val(), b.val();
  long ca = a.cols();
  return t.push(std::move(y), detail::any_grad({a, b}), {a.id, b.id},
                [a, b, ca](Tape& t, const Mat& g) {
                  t.accum_grad(a.id, g.leftCols(ca));
                  t.accum_grad(b.id, g.rightCols(g.cols() - ca));
                });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty list");
  Tape& t = *parts[0].tape;
  long rows = 0;
  long cols = parts[0].cols();
  bool rg = false;
  std::vector<int> pids;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: col mismatch");
    rows += p.rows();
    rg = rg || t.requires_grad(p);
    pids.push_back(p.id);
  }
  Mat y(rows, cols);
  long r = 0;
  for (const Var& p : parts) {
    y.middleRows(r, p.rows()) = p.val();
    r += p.rows();
  }
  auto ps = parts;
  return t.push(std::move(y), rg, pids, [ps](Tape& t, const Mat& g) {
    long r = 0;
    for (const Var& p : ps) {
      t.accum_grad(p.id, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

inline Var slice_cols(Var a, long start, long n) {
  Tape& t = *a.tape;
  if (start < 0 || start + n > a.cols()) throw ShapeError("slice_cols: range");
  return t.push(a.val().middleCols(start, n), t.requires_grad(a), {a.id},
                [a, start, n](Tape& t, const Mat& g) {
                  Mat gi = Mat::Zero(a.rows(), a.cols());
                  gi.middleCols(start, n) = g;
                  t.accum_grad(a.id, gi);
                });
}

// Gathers rows of `table` by index; backward scatter-adds. Serves both
// embedding lookup (table = V x K params) and class-token extraction.
inline Var gather_rows(Var table, std::vector<long> ids) {
  Tape& t = *table.tape;
  for (long i : ids)
    if (i < 0 || i >= table.rows())
      throw LookupError("gather_rows: index out of range");
  Mat y(static_cast<long>(ids.size()), table.cols());
  for (size_t r = 0; r < ids.size(); ++r) y.row(r) = table.val().row(ids[r]);
  return t.push(std::move(y), t.requires_grad(table), {table.id},
                [table, ids = std::move(ids)](Tape& t, const Mat& g) {
                  Mat gi = Mat::Zero(table.rows(), table.cols());
                  for (size_t r = 0; r < ids.size(); ++r)
                    gi.row(ids[r]) += g.row(r);
                  t.accum_grad(table.id, gi);
                });
}

// Tiles the whole matrix `n` times along the row axis; backward sums the
// per-tile gradients.
inline Var repeat_rows(Var a, long n) {
  if (n < 1) throw ShapeError("repeat_rows: n must be >= 1");
  Tape& t = *a.tape;
  long r = a.rows();
  Mat y(r * n, a.cols());
  for (long i = 0; i < n; ++i) y.middleRows(i * r, r) = a.val();
  return t.push(std::move(y), t.requires_grad(a), {a.id},
                [a, n, r](Tape& t, const Mat& g) {
                  Mat gi = Mat::Zero(r, g.cols());
                  for (long i = 0; i < n; ++i) gi += g.middleRows(i * r, r);
                  t.accum_grad(a.id, gi);
                });
}

// Interleaves row blocks of `a` and `b`: output block k is block_a rows of
// `a` followed by block_b rows of `b`. Used to lay out per-frame token
// groups (class token + patch tokens) contiguously.
inline Var interleave_rows(Var a, Var b, long block_a, long block_b) {
  detail::check_same_tape({a, b});
  if (a.cols() != b.cols()) throw ShapeError("interleave_rows: col mismatch");
  if (block_a < 1 || block_b < 1 || a.rows() % block_a != 0 ||
      b.rows() % block_b != 0 || a.rows() / block_a != b.rows() / block_b)
    throw ShapeError("interleave_rows: inconsistent block structure");
  Tape& t = *a.tape;
  long nblocks = a.rows() / block_a;
  long stride = block_a + block_b;
  Mat y(nblocks * stride, a.cols());
  for (long k = 0; k < nblocks; ++k) {
    y.middleRows(k * stride, block_a) = a.val().middleRows(k * block_a, block_a);
    y.middleRows(k * stride + block_a, block_b) =
        b.val().middleRows(k * block_b, block_b);
  }
  return t.push(std::move(y), detail::any_grad({a, b}), {a.id, b.id},
                [a, b, block_a, block_b, nblocks](Tape& t, const Mat& g) {
                  long stride = block_a + block_b;
                  Mat ga(nblocks * block_a, g.cols());
                  Mat gb(nblocks * block_b, g.cols());
                  for (long k = 0; k < nblocks; ++k) {
                    ga.middleRows(k * block_a, block_a) =
                        g.middleRows(k * stride, block_a);
                    gb.middleRows(k * block_b, block_b) =
                        g.middleRows(k * stride + block_a, block_b);
                  }
                  t.accum_grad(a.id, ga);
                  t.accum_grad(b.id, gb);
                });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(Var x) {
  Tape& t = *x.tape;
  Mat y(1, 1);
  y(0, 0) = x.val().sum();
  return t.push(y, t.requires_grad(x), {x.id}, [x](Tape& t, const Mat& g) {
    t.accum_grad(x.id, Mat::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

inline Var mean_all(Var x) { return scale(sum_all(x), 1.0 / x.val().size()); }

// Row-wise log-sum-exp, returned as a T x 1 column.
inline Var logsumexp_rows(Var x) {
  Tape& t = *x.tape;
  const Mat& xv = x.val();
  Mat y(xv.rows(), 1);
  for (long i = 0; i < xv.rows(); ++i) {
    double m = xv.row(i).maxCoeff();
    y(i, 0) = m + std::log((xv.row(i).array() - m).exp().sum());
  }
  return t.push(y, t.requires_grad(x), {x.id}, [x, y](Tape& t, const Mat& g) {
    Mat gi(x.rows(), x.cols());
    for (long i = 0; i < x.rows(); ++i)
      gi.row(i) =
          g(i, 0) * (x.val().row(i).array() - y(i, 0)).exp().matrix();
    t.accum_grad(x.id, gi);
  });
}

// Main diagonal of a square matrix, as an N x 1 column.
inline Var diag_col(Var x) {
  if (x.rows() != x.cols()) throw ShapeError("diag_col: square input required");
  Tape& t = *x.tape;
  Mat y = x.val().diagonal();
  return t.push(y, t.requires_grad(x), {x.id}, [x](Tape& t, const Mat& g) {
    Mat gi = Mat::Zero(x.rows(), x.cols());
    gi.diagonal() = g.col(0);
    t.accum_grad(x.id, gi);
  });
}

// ---------------------------------------------------------------------------
// Normalization / pooling / regularization
// ---------------------------------------------------------------------------

inline Var normalize_rows(Var x) {
  Tape& t = *x.tape;
  const Mat& xv = x.val();
  Eigen::VectorXd norms = xv.rowwise().norm();
  for (long i = 0; i < norms.size(); ++i)
    if (norms(i) == 0.0)
      throw ValueError("normalize_rows: zero-norm row " + std::to_string(i));
  Mat y = xv.array().colwise() / norms.array();
  return t.push(y, t.requires_grad(x), {x.id},
                [x, y, norms](Tape& t, const Mat& g) {
                  Mat gi(x.rows(), x.cols());
                  for (long i = 0; i < x.rows(); ++i) {
                    double dot = g.row(i).dot(y.row(i));
                    gi.row(i) = (g.row(i) - dot * y.row(i)) / norms(i);
                  }
                  t.accum_grad(x.id, gi);
                });
}

// Mean over rows whose mask entry is nonzero; returns a 1 x dim row.
inline Var masked_mean_pool(Var x, const std::vector<uint8_t>& mask) {
  if (static_cast<long>(mask.size()) != x.rows())
    throw ShapeError("masked_mean_pool: mask length mismatch");
  long n = 0;
  for (uint8_t m : mask) n += (m != 0);
  if (n == 0) throw ValueError("masked_mean_pool: no valid positions");
  Tape& t = *x.tape;
  Mat y = Mat::Zero(1, x.cols());
  for (long i = 0; i < x.rows(); ++i)
    if (mask[i]) y += x.val().row(i);
  y /= static_cast<double>(n);
  return t.push(y, t.requires_grad(x), {x.id},
                [x, mask, n](Tape& t, const Mat& g) {
                  Mat gi = Mat::Zero(x.rows(), x.cols());
                  for (long i = 0; i < x.rows(); ++i)
                    if (mask[i]) gi.row(i) = g.row(0) / static_cast<double>(n);
                  t.accum_grad(x.id, gi);
                });
}

// Mean-pools non-overlapping row groups of size `factor`; a shorter final
// group is pooled as-is. Invalid rows (mask zero) are excluded from the
// group mean; a group with no valid rows yields a zero row.
inline Var time_pool_rows(Var x, long factor,
                          const std::vector<uint8_t>& mask) {
  if (factor < 1) throw ConfigError("time_pool_rows: factor must be >= 1");
  if (static_cast<long>(mask.size()) != x.rows())
    throw ShapeError("time_pool_rows: mask length mismatch");
  Tape& t = *x.tape;
  long T = x.rows();
  long P = (T + factor - 1) / factor;
  Mat y = Mat::Zero(P, x.cols());
  std::vector<long> counts(P, 0);
  for (long i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    y.row(i / factor) += x.val().row(i);
    counts[i / factor]++;
  }
  for (long p = 0; p < P; ++p)
    if (counts[p] > 0) y.row(p) /= static_cast<double>(counts[p]);
  return t.push(std::move(y), t.requires_grad(x), {x.id},
                [x, factor, mask, counts](Tape& t, const Mat& g) {
                  Mat gi = Mat::Zero(x.rows(), x.cols());
                  for (long i = 0; i < x.rows(); ++i) {
                    long p = i / factor;
                    if (mask[i] && counts[p] > 0)
                      gi.row(i) = g.row(p) / static_cast<double>(counts[p]);
                  }
                  t.accum_grad(x.id, gi);
                });
}

inline std::vector<uint8_t> pooled_mask(const std::vector<uint8_t>& mask,
                                        long factor) {
  long T = static_cast<long>(mask.size());
  long P = (T + factor - 1) / factor;
  std::vector<uint8_t> out(P, 0);
  for (long i = 0; i < T; ++i)
    if (mask[i]) out[i / factor] = 1;
  return out;
}

// Inverted-dropout on the forward path; identity when `training` is false.
inline Var dropout(Var x, double rate, std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate in [0,1)");
  Tape& t = *x.tape;
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Mat m(x.rows(), x.cols());
  for (long i = 0; i < x.rows(); ++i)
    for (long j = 0; j < x.cols(); ++j)
      m(i, j) = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return t.push(x.val().cwiseProduct(m), t.requires_grad(x), {x.id},
                [x, m](Tape& t, const Mat& g) {
                  t.accum_grad(x.id, g.cwiseProduct(m));
                });
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

// Mean of |a - b| over all entries. The literal per-entry L2 norm of the
// teacher-matching loss: for scalars, ||x||_2 = |x|.
inline Var mean_abs_diff(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mean_abs_diff: shape mismatch");
  Tape& t = *a.tape;
  long n = a.val().size();
  Mat y(1, 1);
  y(0, 0) = (a.val() - b.val()).cwiseAbs().sum() / static_cast<double>(n);
  return t.push(y, detail::any_grad({a, b}), {a.id, b.id},
                [a, b, n](Tape& t, const Mat& g) {
                  Mat s = (a.val() - b.val()).unaryExpr([](double v) {
                    return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
                  });
                  Mat gi = g(0, 0) / static_cast<double>(n) * s;
                  t.accum_grad(a.id, gi);
                  t.accum_grad(b.id, -gi);
                });
}

// Mean of (a - b)^2 over all entries.
inline Var mean_sq_diff(Var a, Var b) {
  detail::check_same_tape({a, b});
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mean_sq_diff: shape mismatch");
  Tape& t = *a.tape;
  long n = a.val().size();
  Mat d = a.val() - b.val();
  Mat y(1, 1);
  y(0, 0) = d.squaredNorm() / static_cast<double>(n);
  return t.push(y, detail::any_grad({a, b}), {a.id, b.id},
                [a, b, n](Tape& t, const Mat& g) {
                  Mat gi =
                      2.0 * g(0, 0) / static_cast<double>(n) *
                      (a.val() - b.val());
                  t.accum_grad(a.id, gi);
                  t.accum_grad(b.id, -gi);
                });
}

// Sum over rows of -log softmax(logits_row)[target_row]. Rows whose target
// equals `pad_id` are skipped. Returns {sum, counted rows}.
struct TokenCrossEntropy {
  Var sum;
  long count = 0;
};

inline TokenCrossEntropy cross_entropy_tokens(Var logits,
                                              const std::vector<int>& targets,
                                              int pad_id) {
  if (static_cast<long>(targets.size()) != logits.rows())
    throw ShapeError("cross_entropy_tokens: target length mismatch");
  Tape& t = *logits.tape;
  const Mat& L = logits.val();
  for (int id : targets)
    if (id < 0 || id >= L.cols())
      throw LookupError("cross_entropy_tokens: target id out of vocab");
  double total = 0.0;
  long count = 0;
  Mat lse(L.rows(), 1);
  for (long i = 0; i < L.rows(); ++i) {
    double m = L.row(i).maxCoeff();
    lse(i, 0) = m + std::log((L.row(i).array() - m).exp().sum());
    if (targets[i] != pad_id) {
      total += lse(i, 0) - L(i, targets[i]);
      count++;
    }
  }
  Mat y(1, 1);
  y(0, 0) = total;
  Var s = t.push(y, t.requires_grad(logits), {logits.id},
                 [logits, targets, pad_id, lse](Tape& t, const Mat& g) {
                   const Mat& L = logits.val();
                   Mat gi = Mat::Zero(L.rows(), L.cols());
                   for (long i = 0; i < L.rows(); ++i) {
                     if (targets[i] == pad_id) continue;
                     gi.row(i) = (L.row(i).array() - lse(i, 0)).exp().matrix();
                     gi(i, targets[i]) -= 1.0;
                   }
                   t.accum_grad(logits.id, g(0, 0) * gi);
                 });
  return {s, count};
}

// ---------------------------------------------------------------------------
// Normalization layers (fused forward/backward)
// ---------------------------------------------------------------------------

// Per-row layer normalization with affine parameters gamma/beta (1 x dim).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::check_same_tape({x, gamma, beta});
  if (gamma.cols() != x.cols() || beta.cols() != x.cols())
    throw ShapeError("layer_norm: affine shape mismatch");
  Tape& t = *x.tape;
  const Mat& xv = x.val();
  long D = xv.cols();
  Eigen::VectorXd mu = xv.rowwise().mean();
  Mat centered = xv.colwise() - mu;
  Eigen::VectorXd var = centered.array().square().rowwise().mean();
  Eigen::VectorXd istd = (var.array() + eps).rsqrt();
  Mat xhat = centered.array().colwise() * istd.array();
  Mat y = (xhat.array().rowwise() * gamma.val().row(0).array()).rowwise() +
          beta.val().row(0).array();
  return t.push(y, detail::any_grad({x, gamma, beta}),
                {x.id, gamma.id, beta.id},
                [x, gamma, beta, xhat, istd, D](Tape& t, const Mat& g) {
                  Mat gxhat =
                      g.array().rowwise() * gamma.val().row(0).array();
                  Mat gi(x.rows(), x.cols());
                  for (long i = 0; i < x.rows(); ++i) {
                    double m1 = gxhat.row(i).mean();
                    double m2 = gxhat.row(i).dot(xhat.row(i)) / D;
                    gi.row(i) = istd(i) * (gxhat.row(i).array() - m1 -
                                           xhat.row(i).array() * m2);
                  }
                  t.accum_grad(x.id, gi);
                  t.accum_grad(gamma.id, g.cwiseProduct(xhat).colwise().sum());
                  t.accum_grad(beta.id, g.colwise().sum());
                });
}

}  // namespace gfslt::ad
