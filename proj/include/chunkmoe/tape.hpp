// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "chunkmoe/tensor.hpp"

namespace chunkmoe {

/// Reverse-mode tape over Tensor<T> with a hand-derived backward per
/// primitive. Ids are creation-ordered, so walking them from the root down
/// visits primitives in exact reverse order of the forward pass.
///
/// The tape is single-owner: build a graph, call backward(root) once, read
/// gradients, discard.
template <typename T>
class Tape {
 public:
  using Id = std::uint32_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // -- leaves ---------------------------------------------------------------

  Id leaf(Tensor<T> value, bool needs_grad = true) {
    return push(std::move(value), needs_grad, nullptr);
  }

  Id constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Id scalar_constant(T v) { return constant(Tensor<T>::full(1, 1, v)); }

  // -- accessors ------------------------------------------------------------

  const Tensor<T>& value(Id id) const { return vals_[id]; }

  /// Gradient of the last backward() root w.r.t. value `id`. Zeros if the
  /// value was never touched by backward (including an empty tape).
  Tensor<T> grad(Id id) const {
    const Tensor<T>& g = grads_[id];
    if (g.empty()) return Tensor<T>::zeros(vals_[id].rows(), vals_[id].cols());
    return g;
  }

  T scalar(Id id) const {
    check_contract(vals_[id].size() == 1, "tape: value is not a scalar");
    return vals_[id].flat()[0];
  }

  std::size_t num_values() const { return vals_.size(); }

  // -- linear algebra -------------------------------------------------------

  Id matmul(Id a, Id b) {
    Tensor<T> out = chunkmoe::matmul(vals_[a], vals_[b]);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Id o) {
      const Tensor<T>& g = grads_[o];
      if (needs(a)) accum(a, chunkmoe::matmul_nt(g, vals_[b]));
      if (needs(b)) accum(b, chunkmoe::matmul_tn(vals_[a], g));
    });
  }

  /// C = A * B^T
  Id matmul_nt(Id a, Id b) {
    Tensor<T> out = chunkmoe::matmul_nt(vals_[a], vals_[b]);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Id o) {
      const Tensor<T>& g = grads_[o];
      if (needs(a)) accum(a, chunkmoe::matmul(g, vals_[b]));
      if (needs(b)) accum(b, chunkmoe::matmul_tn(g, vals_[a]));
    });
  }

  Id add(Id a, Id b) {
    Tensor<T> out = chunkmoe::add(vals_[a], vals_[b]);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Id o) {
      if (needs(a)) accum(a, grads_[o]);
      if (needs(b)) accum(b, grads_[o]);
    });
  }

  Id scale(Id a, T c) {
    Tensor<T> out = chunkmoe::scale(vals_[a], c);
    return push(std::move(out), needs(a), [this, a, c](Id o) {
      if (needs(a)) accum(a, chunkmoe::scale(grads_[o], c));
    });
  }

  Id hadamard(Id a, Id b) {
    Tensor<T> out = chunkmoe::hadamard(vals_[a], vals_[b]);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Id o) {
      const Tensor<T>& g = grads_[o];
      if (needs(a)) accum(a, chunkmoe::hadamard(g, vals_[b]));
      if (needs(b)) accum(b, chunkmoe::hadamard(g, vals_[a]));
    });
  }

  // -- elementwise ----------------------------------------------------------

  Id relu(Id a) {
    Tensor<T> out = chunkmoe::relu(vals_[a]);
    return push(std::move(out), needs(a), [this, a](Id o) {
      if (!needs(a)) return;
      const Tensor<T>& x = vals_[a];
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i)
        dx.flat()[i] = x.flat()[i] > T{0} ? g.flat()[i] : T{0};
      accum(a, std::move(dx));
    });
  }

  Id swish(Id a) {
    Tensor<T> out = chunkmoe::swish(vals_[a]);
    return push(std::move(out), needs(a), [this, a](Id o) {
      if (!needs(a)) return;
      const Tensor<T>& x = vals_[a];
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T s = sigmoid_scalar(x.flat()[i]);
        dx.flat()[i] = g.flat()[i] * s * (T{1} + x.flat()[i] * (T{1} - s));
      }
      accum(a, std::move(dx));
    });
  }

  Id sigmoid(Id a) {
    Tensor<T> out = chunkmoe::sigmoid(vals_[a]);
    return push(std::move(out), needs(a), [this, a](Id o) {
      if (!needs(a)) return;
      const Tensor<T>& y = vals_[o];
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(y.rows(), y.cols());
      for (std::size_t i = 0; i < y.size(); ++i)
        dx.flat()[i] = g.flat()[i] * y.flat()[i] * (T{1} - y.flat()[i]);
      accum(a, std::move(dx));
    });
  }

  Id exp(Id a) {
    Tensor<T> out = chunkmoe::exp(vals_[a]);
    return push(std::move(out), needs(a), [this, a](Id o) {
      if (needs(a)) accum(a, chunkmoe::hadamard(grads_[o], vals_[o]));
    });
  }

  Id log(Id a, T floor = T(kLogClampFloor)) {
    Tensor<T> out = chunkmoe::log(vals_[a], floor);
    return push(std::move(out), needs(a), [this, a, floor](Id o) {
      if (!needs(a)) return;
      const Tensor<T>& x = vals_[a];
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i)
        dx.flat()[i] = x.flat()[i] > floor ? g.flat()[i] / x.flat()[i] : T{0};
      accum(a, std::move(dx));
    });
  }

  Id clamp(Id a, T lo, T hi) {
    Tensor<T> out = chunkmoe::clamp(vals_[a], lo, hi);
    return push(std::move(out), needs(a), [this, a, lo, hi](Id o) {
      if (!needs(a)) return;
      const Tensor<T>& x = vals_[a];
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x.flat()[i];
        dx.flat()[i] = (v >= lo && v <= hi) ? g.flat()[i] : T{0};
      }
      accum(a, std::move(dx));
    });
  }

  // -- normalizations -------------------------------------------------------

  /// Row-wise RMSNorm with per-column gain. gain is a [1 x cols] value.
  Id rmsnorm_rows(Id x, Id gain, T eps = T(kRmsNormEps)) {
    check_contract(vals_[gain].rows() == 1 && vals_[gain].cols() == vals_[x].cols(),
                   "tape.rmsnorm_rows: gain must be [1 x cols]");
    Tensor<T> out = chunkmoe::rmsnorm_rows<T>(vals_[x], vals_[gain].flat(), eps);
    return push(std::move(out), needs(x) || needs(gain), [this, x, gain, eps](Id o) {
      const Tensor<T>& in = vals_[x];
      const Tensor<T>& gn = vals_[gain];
      const Tensor<T>& g = grads_[o];
      const std::size_t n = in.cols();
      Tensor<T> dx(in.rows(), n);
      Tensor<T> dgain(1, n);
      for (std::size_t r = 0; r < in.rows(); ++r) {
        const T* v = in.row(r);
        const T* gr = g.row(r);
        T ms{0};
        for (std::size_t c = 0; c < n; ++c) ms += v[c] * v[c];
        ms /= static_cast<T>(n);
        const T rms = std::sqrt(ms + eps);
        const T inv = T{1} / rms;
        T dot{0};  // sum_c g_c * gain_c * v_c
        for (std::size_t c = 0; c < n; ++c) dot += gr[c] * gn.flat()[c] * v[c];
        const T coef = dot / (static_cast<T>(n) * rms * rms * rms);
        T* dxr = dx.row(r);
        for (std::size_t c = 0; c < n; ++c) {
          dxr[c] = gn.flat()[c] * gr[c] * inv - v[c] * coef;
          dgain.flat()[c] += gr[c] * v[c] * inv;
        }
      }
      if (needs(x)) accum(x, std::move(dx));
      if (needs(gain)) accum(gain, std::move(dgain));
    });
  }

  /// y_c = x_c / sum(row). Rows must have nonzero sums.
  Id row_normalize(Id x) {
    const Tensor<T>& in = vals_[x];
    Tensor<T> out(in.rows(), in.cols());
    for (std::size_t r = 0; r < in.rows(); ++r) {
      T s{0};
      for (std::size_t c = 0; c < in.cols(); ++c) s += in(r, c);
      check_contract(s != T{0}, "row_normalize: zero row sum");
      for (std::size_t c = 0; c < in.cols(); ++c) out(r, c) = in(r, c) / s;
    }
    check_finite(out, "row_normalize");
    return push(std::move(out), needs(x), [this, x](Id o) {
      if (!needs(x)) return;
      const Tensor<T>& in = vals_[x];
      const Tensor<T>& y = vals_[o];
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(in.rows(), in.cols());
      for (std::size_t r = 0; r < in.rows(); ++r) {
        T s{0}, dot{0};
        for (std::size_t c = 0; c < in.cols(); ++c) {
          s += in(r, c);
          dot += g(r, c) * y(r, c);
        }
        for (std::size_t c = 0; c < in.cols(); ++c) dx(r, c) = (g(r, c) - dot) / s;
      }
      accum(x, std::move(dx));
    });
  }

  Id softmax_rows(Id x) {
    Tensor<T> out = chunkmoe::softmax_rows(vals_[x]);
    return push(std::move(out), needs(x), [this, x](Id o) {
      if (!needs(x)) return;
      const Tensor<T>& y = vals_[o];
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(y.rows(), y.cols());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        T dot{0};
        for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
        for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = y(r, c) * (g(r, c) - dot);
      }
      accum(x, std::move(dx));
    });
  }

  /// Softmax over the causal prefix of each row of a square score matrix:
  /// row i is a distribution over columns 0..i, zero beyond.
  Id causal_softmax(Id scores) {
    const Tensor<T>& s = vals_[scores];
    check_contract(s.rows() == s.cols(), "causal_softmax: scores must be square");
    const std::size_t L = s.rows();
    Tensor<T> out(L, L);
    for (std::size_t i = 0; i < L; ++i) {
      T mx = s(i, 0);
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
      T sum{0};
      for (std::size_t j = 0; j <= i; ++j) {
        out(i, j) = std::exp(s(i, j) - mx);
        sum += out(i, j);
      }
      const T inv = T{1} / sum;
      for (std::size_t j = 0; j <= i; ++j) out(i, j) *= inv;
    }
    check_finite(out, "causal_softmax");
    return push(std::move(out), needs(scores), [this, scores](Id o) {
      if (!needs(scores)) return;
      const Tensor<T>& y = vals_[o];
      const Tensor<T>& g = grads_[o];
      const std::size_t L = y.rows();
      Tensor<T> dx(L, L);
      for (std::size_t i = 0; i < L; ++i) {
        T dot{0};
        for (std::size_t j = 0; j <= i; ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j <= i; ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
      }
      accum(scores, std::move(dx));
    });
  }

  // -- structural ops -------------------------------------------------------

  /// Elementwise product with a constant 0/1 mask (straight-through
  /// selection: gradient flows only where the mask is set).
  Id mask(Id x, Tensor<T> m) {
    check_contract(vals_[x].same_shape(m), "mask: shape mismatch");
    Tensor<T> out = chunkmoe::hadamard(vals_[x], m);
    auto mp = std::make_shared<Tensor<T>>(std::move(m));
    return push(std::move(out), needs(x), [this, x, mp](Id o) {
      if (needs(x)) accum(x, chunkmoe::hadamard(grads_[o], *mp));
    });
  }

  Id col(Id x, std::size_t j) {
    const Tensor<T>& in = vals_[x];
    check_contract(j < in.cols(), "col: index out of range");
    Tensor<T> out(in.rows(), 1);
    for (std::size_t r = 0; r < in.rows(); ++r) out(r, 0) = in(r, j);
    return push(std::move(out), needs(x), [this, x, j](Id o) {
      if (!needs(x)) return;
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(vals_[x].rows(), vals_[x].cols());
      for (std::size_t r = 0; r < dx.rows(); ++r) dx(r, j) = g(r, 0);
      accum(x, std::move(dx));
    });
  }

  Id concat_cols(Id a, Id b) {
    const Tensor<T>& ta = vals_[a];
    const Tensor<T>& tb = vals_[b];
    check_contract(ta.rows() == tb.rows(), "concat_cols: row mismatch");
    Tensor<T> out(ta.rows(), ta.cols() + tb.cols());
    for (std::size_t r = 0; r < ta.rows(); ++r) {
      for (std::size_t c = 0; c < ta.cols(); ++c) out(r, c) = ta(r, c);
      for (std::size_t c = 0; c < tb.cols(); ++c) out(r, ta.cols() + c) = tb(r, c);
    }
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Id o) {
      const Tensor<T>& g = grads_[o];
      const std::size_t ca = vals_[a].cols();
      if (needs(a)) {
        Tensor<T> da(g.rows(), ca);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < ca; ++c) da(r, c) = g(r, c);
        accum(a, std::move(da));
      }
      if (needs(b)) {
        Tensor<T> db(g.rows(), vals_[b].cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < db.cols(); ++c) db(r, c) = g(r, ca + c);
        accum(b, std::move(db));
      }
    });
  }

  Id slice_cols(Id x, std::size_t c0, std::size_t c1) {
    const Tensor<T>& in = vals_[x];
    check_contract(c0 < c1 && c1 <= in.cols(), "slice_cols: bad range");
    Tensor<T> out(in.rows(), c1 - c0);
    for (std::size_t r = 0; r < in.rows(); ++r)
      for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = in(r, c);
    return push(std::move(out), needs(x), [this, x, c0](Id o) {
      if (!needs(x)) return;
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(vals_[x].rows(), vals_[x].cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) dx(r, c0 + c) = g(r, c);
      accum(x, std::move(dx));
    });
  }

  Id slice_rows(Id x, std::size_t r0, std::size_t r1) {
    const Tensor<T>& in = vals_[x];
    check_contract(r0 < r1 && r1 <= in.rows(), "slice_rows: bad range");
    Tensor<T> out(r1 - r0, in.cols());
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = 0; c < in.cols(); ++c) out(r - r0, c) = in(r, c);
    return push(std::move(out), needs(x), [this, x, r0](Id o) {
      if (!needs(x)) return;
      const Tensor<T>& g = grads_[o];
      Tensor<T> dx(vals_[x].rows(), vals_[x].cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) dx(r0 + r, c) = g(r, c);
      accum(x, std::move(dx));
    });
  }

  /// y[r,c] = x[r,c] * s[r].  s is [n x 1].
  Id scale_rows(Id x, Id s) {
    const Tensor<T>& in = vals_[x];
    const Tensor<T>& sv = vals_[s];
    check_contract(sv.rows() == in.rows() && sv.cols() == 1, "scale_rows: s must be [rows x 1]");
    Tensor<T> out(in.rows(), in.cols());
    for (std::size_t r = 0; r < in.rows(); ++r)
      for (std::size_t c = 0; c < in.cols(); ++c) out(r, c) = in(r, c) * sv(r, 0);
    return push(std::move(out), needs(x) || needs(s), [this, x, s](Id o) {
      const Tensor<T>& in = vals_[x];
      const Tensor<T>& sv = vals_[s];
      const Tensor<T>& g = grads_[o];
      if (needs(x)) {
        Tensor<T> dx(in.rows(), in.cols());
        for (std::size_t r = 0; r < in.rows(); ++r)
          for (std::size_t c = 0; c < in.cols(); ++c) dx(r, c) = g(r, c) * sv(r, 0);
        accum(x, std::move(dx));
      }
      if (needs(s)) {
        Tensor<T> ds(in.rows(), 1);
        for (std::size_t r = 0; r < in.rows(); ++r) {
          T acc{0};
          for (std::size_t c = 0; c < in.cols(); ++c) acc += g(r, c) * in(r, c);
          ds(r, 0) = acc;
        }
        accum(s, std::move(ds));
      }
    });
  }

  /// Vertical concatenation of equal-width parts.
  Id stack_rows(const std::vector<Id>& parts) {
    check_contract(!parts.empty(), "stack_rows: no parts");
    std::size_t rows = 0;
    const std::size_t cols = vals_[parts[0]].cols();
    bool ng = false;
    for (Id p : parts) {
      check_contract(vals_[p].cols() == cols, "stack_rows: column mismatch");
      rows += vals_[p].rows();
      ng = ng || needs(p);
    }
    Tensor<T> out(rows, cols);
    std::size_t r0 = 0;
    for (Id p : parts) {
      const Tensor<T>& t = vals_[p];
      for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) out(r0 + r, c) = t(r, c);
      r0 += t.rows();
    }
    auto pp = std::make_shared<std::vector<Id>>(parts);
    return push(std::move(out), ng, [this, pp](Id o) {
      const Tensor<T>& g = grads_[o];
      std::size_t r0 = 0;
      for (Id p : *pp) {
        const std::size_t pr = vals_[p].rows();
        if (needs(p)) {
          Tensor<T> dp(pr, g.cols());
          for (std::size_t r = 0; r < pr; ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) dp(r, c) = g(r0 + r, c);
          accum(p, std::move(dp));
        }
        r0 += pr;
      }
    });
  }

  /// Horizontal concatenation of equal-height parts.
  Id stack_cols(const std::vector<Id>& parts) {
    check_contract(!parts.empty(), "stack_cols: no parts");
    std::size_t cols = 0;
    const std::size_t rows = vals_[parts[0]].rows();
    bool ng = false;
    for (Id p : parts) {
      check_contract(vals_[p].rows() == rows, "stack_cols: row mismatch");
      cols += vals_[p].cols();
      ng = ng || needs(p);
    }
    Tensor<T> out(rows, cols);
    std::size_t c0 = 0;
    for (Id p : parts) {
      const Tensor<T>& t = vals_[p];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) out(r, c0 + c) = t(r, c);
      c0 += t.cols();
    }
    auto pp = std::make_shared<std::vector<Id>>(parts);
    return push(std::move(out), ng, [this, pp](Id o) {
      const Tensor<T>& g = grads_[o];
      std::size_t c0 = 0;
      for (Id p : *pp) {
        const std::size_t pc = vals_[p].cols();
        if (needs(p)) {
          Tensor<T> dp(g.rows(), pc);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < pc; ++c) dp(r, c) = g(r, c0 + c);
          accum(p, std::move(dp));
        }
        c0 += pc;
      }
    });
  }

  /// Embedding lookup: out[r,:] = table[ids[r],:].
  Id gather_rows(Id table, std::vector<int> ids) {
    const Tensor<T>& tb = vals_[table];
    Tensor<T> out(ids.size(), tb.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
      check_contract(ids[r] >= 0 && static_cast<std::size_t>(ids[r]) < tb.rows(),
                     "gather_rows: id out of range");
      for (std::size_t c = 0; c < tb.cols(); ++c) out(r, c) = tb(ids[r], c);
    }
    auto idp = std::make_shared<std::vector<int>>(std::move(ids));
    return push(std::move(out), needs(table), [this, table, idp](Id o) {
      if (!needs(table)) return;
      const Tensor<T>& g = grads_[o];
      Tensor<T> dt(vals_[table].rows(), vals_[table].cols());
      for (std::size_t r = 0; r < idp->size(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) dt((*idp)[r], c) += g(r, c);
      accum(table, std::move(dt));
    });
  }

  // -- reductions -----------------------------------------------------------

  Id sum_all(Id x) {
    T acc{0};
    for (T v : vals_[x].flat()) acc += v;
    return push(Tensor<T>::full(1, 1, acc), needs(x), [this, x](Id o) {
      if (!needs(x)) return;
      accum(x, Tensor<T>::full(vals_[x].rows(), vals_[x].cols(), grads_[o].flat()[0]));
    });
  }

  Id mean_all(Id x) {
    const T n = static_cast<T>(vals_[x].size());
    T acc{0};
    for (T v : vals_[x].flat()) acc += v;
    return push(Tensor<T>::full(1, 1, acc / n), needs(x), [this, x, n](Id o) {
      if (!needs(x)) return;
      accum(x, Tensor<T>::full(vals_[x].rows(), vals_[x].cols(), grads_[o].flat()[0] / n));
    });
  }

  /// Mean negative log-likelihood of `targets` under row-wise softmax of
  /// `logits`.
  Id cross_entropy(Id logits, std::vector<int> targets) {
    const Tensor<T>& lg = vals_[logits];
    check_contract(targets.size() == lg.rows(), "cross_entropy: targets size != rows");
    T total{0};
    for (std::size_t r = 0; r < lg.rows(); ++r) {
      const int t = targets[r];
      check_contract(t >= 0 && static_cast<std::size_t>(t) < lg.cols(),
                     "cross_entropy: target out of range");
      const T* in = lg.row(r);
      T mx = in[0];
      for (std::size_t c = 1; c < lg.cols(); ++c) mx = std::max(mx, in[c]);
      T sum{0};
      for (std::size_t c = 0; c < lg.cols(); ++c) sum += std::exp(in[c] - mx);
      total += std::log(sum) + mx - in[t];
    }
    const T n = static_cast<T>(lg.rows());
    Tensor<T> out = Tensor<T>::full(1, 1, total / n);
    check_finite(out, "cross_entropy");
    auto tp = std::make_shared<std::vector<int>>(std::move(targets));
    return push(std::move(out), needs(logits), [this, logits, tp, n](Id o) {
      if (!needs(logits)) return;
      const Tensor<T>& lg = vals_[logits];
      const T gscale = grads_[o].flat()[0] / n;
      Tensor<T> dx(lg.rows(), lg.cols());
      for (std::size_t r = 0; r < lg.rows(); ++r) {
        const T* in = lg.row(r);
        T mx = in[0];
        for (std::size_t c = 1; c < lg.cols(); ++c) mx = std::max(mx, in[c]);
        T sum{0};
        for (std::size_t c = 0; c < lg.cols(); ++c) sum += std::exp(in[c] - mx);
        const T inv = T{1} / sum;
        T* d = dx.row(r);
        for (std::size_t c = 0; c < lg.cols(); ++c) d[c] = std::exp(in[c] - mx) * inv * gscale;
        d[(*tp)[r]] -= gscale;
      }
      accum(logits, std::move(dx));
    });
  }

  // -- extension point --------------------------------------------------------

  /// Records an externally computed op (fused losses live outside the tape).
  /// `back` receives the output id; it reads upstream_grad(out) and calls
  /// add_grad on its inputs.
  Id custom_op(Tensor<T> value, bool needs_grad, std::function<void(Id)> back) {
    return push(std::move(value), needs_grad, std::move(back));
  }

  void add_grad(Id id, Tensor<T> g) { accum(id, std::move(g)); }

  const Tensor<T>& upstream_grad(Id id) const { return grads_[id]; }

  bool requires_grad(Id id) const { return needs_grad_[id]; }

  // -- backward -------------------------------------------------------------

  /// Seeds d(root)=1 and replays recorded primitives in reverse creation
  /// order. root must be a 1x1 scalar.
  void backward(Id root) {
    check_contract(vals_[root].size() == 1, "backward: root must be a scalar");
    accum(root, Tensor<T>::full(1, 1, T{1}));
    for (std::size_t i = root + 1; i-- > 0;) {
      if (backs_[i] && !grads_[i].empty()) backs_[i](static_cast<Id>(i));
    }
  }

 private:
  bool needs(Id id) const { return needs_grad_[id]; }

  void accum(Id id, Tensor<T> g) {
    if (!needs_grad_[id]) return;
    Tensor<T>& slot = grads_[id];
    if (slot.empty()) {
      slot = std::move(g);
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) slot.flat()[i] += g.flat()[i];
    }
  }

  Id push(Tensor<T> value, bool needs_grad, std::function<void(Id)> back) {
    check_finite(value, "tape");
    vals_.push_back(std::move(value));
    grads_.emplace_back();
    needs_grad_.push_back(needs_grad);
    backs_.push_back(needs_grad ? std::move(back) : nullptr);
    return static_cast<Id>(vals_.size() - 1);
  }

  // deques: stable references while the tape grows.
  std::deque<Tensor<T>> vals_;
  std::deque<Tensor<T>> grads_;
  std::vector<bool> needs_grad_;
  std::vector<std::function<void(Id)>> backs_;
};

}  // namespace chunkmoe
