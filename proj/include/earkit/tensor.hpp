/* Copyright 2026 The Earkit Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Dense f64 tensors with reverse-mode gradient accumulation on an explicit
// tape. Only the primitives the model needs are provided; every one of them
// has a hand-written backward that is validated against central finite
// differences in the test suite.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "earkit/common.hpp"
#include "earkit/rng.hpp"

namespace earkit::grad {

class Tape;

struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;  // row-major values
  std::vector<double> g;  // gradient accumulator, allocated on first use
  bool requires_grad = false;
  uint64_t producer_id = 0;  // id of the tape that produced this node, 0 for leaves

  int64_t size() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), 0.0);
  }
  void zero_grad() { g.assign(v.size(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline TensorPtr make_tensor(std::vector<int> shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->v.assign(static_cast<size_t>(t->size()), 0.0);
  t->requires_grad = requires_grad;
  return t;
}

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<double> values,
                             bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->v = std::move(values);
  t->requires_grad = requires_grad;
  if (static_cast<int64_t>(t->v.size()) != t->size())
    throw Error(ErrorCode::kShapeMismatch,
                "value count does not match shape " + shape_str(t->shape));
  return t;
}

inline TensorPtr make_scalar(double x, bool requires_grad = false) {
  return make_tensor({1}, {x}, requires_grad);
}

inline TensorPtr randn(std::vector<int> shape, double stddev, Rng& rng) {
  auto t = make_tensor(std::move(shape));
  for (auto& x : t->v) x = rng.normal(0.0, stddev);
  return t;
}

/// Ordered record of executed differentiable primitives. Replaying the tape
/// backward visits them in strict reverse execution order. Each pass computes
/// its gradient contribution from a clean slate and then folds it into the
/// persistent leaf accumulators, so a second backward on the same root adds
/// exactly the same delta again (bitwise) while tape-internal node gradients
/// are rebuilt every pass.
class Tape {
 public:
  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(TensorPtr out, std::initializer_list<TensorPtr> inputs,
              std::function<void()> backward) {
    out->producer_id = id_;
    for (const auto& in : inputs) {
      if (!in || !in->requires_grad || in->producer_id == id_) continue;
      if (leaf_seen_.insert(in.get()).second) leaves_.push_back(in);
    }
    outputs_.push_back(std::move(out));
    backward_.push_back(std::move(backward));
  }

  bool produced(const Tensor* t) const { return t->producer_id == id_; }
  size_t op_count() const { return backward_.size(); }

  void run_backward(const TensorPtr& root) {
    if (root->size() != 1)
      throw Error(ErrorCode::kContract, "backward root must be scalar");
    if (!produced(root.get()))
      throw Error(ErrorCode::kDetachedGraph, "root was not produced by this tape");
    for (auto& out : outputs_) out->zero_grad();
    std::vector<std::vector<double>> stash(leaves_.size());
    for (size_t i = 0; i < leaves_.size(); ++i) {
      stash[i] = std::move(leaves_[i]->g);
      leaves_[i]->zero_grad();
    }
    root->g[0] += 1.0;
    for (size_t i = backward_.size(); i-- > 0;) backward_[i]();
    for (size_t i = 0; i < leaves_.size(); ++i) {
      if (stash[i].empty()) continue;
      auto& g = leaves_[i]->g;
      for (size_t j = 0; j < g.size(); ++j) g[j] += stash[i][j];
    }
  }

 private:
  static uint64_t next_id() {
    static uint64_t counter = 0;
    return ++counter;
  }

  uint64_t id_;
  std::vector<TensorPtr> outputs_;
  std::vector<std::function<void()>> backward_;
  std::vector<TensorPtr> leaves_;
  std::unordered_set<const Tensor*> leaf_seen_;
};

inline void backward(Tape& tape, const TensorPtr& root) { tape.run_backward(root); }

namespace detail {

inline bool want_grad(Tape* tape, std::initializer_list<const TensorPtr*> inputs) {
  if (!tape) return false;
  for (auto* in : inputs)
    if ((*in)->requires_grad) return true;
  return false;
}

// c[m x n] += a[m x k] * b[k x n], plain ikj loop kept cache-friendly.
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
inline void gemm_at_acc(const double* a, const double* b, double* c, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<size_t>(p) * m;
    const double* bp = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
inline void gemm_bt_acc(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * n;
    double* ci = c + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* bp = b + static_cast<size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += ai[j] * bp[j];
      ci[p] += acc;
    }
  }
}

}  // namespace detail

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b, Tape* tape) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
    throw Error(ErrorCode::kShapeMismatch,
                "matmul shapes " + shape_str(a->shape) + " and " + shape_str(b->shape));
  int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = make_tensor({m, n});
  detail::gemm_acc(a->v.data(), b->v.data(), out->v.data(), m, k, n);
  if (detail::want_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record(out, {a, b}, [a, b, out, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        detail::gemm_bt_acc(out->g.data(), b->v.data(), a->g.data(), m, n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        detail::gemm_at_acc(a->v.data(), out->g.data(), b->g.data(), m, k, n);
      }
    });
  }
  return out;
}

/// x[m x k] * w[k x n] + bias broadcast over rows.
inline TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                        Tape* tape) {
  if (x->shape.size() != 2 || w->shape.size() != 2 || x->shape[1] != w->shape[0])
    throw Error(ErrorCode::kShapeMismatch,
                "linear shapes " + shape_str(x->shape) + " and " + shape_str(w->shape));
  int m = x->shape[0], k = x->shape[1], n = w->shape[1];
  if (b && b->size() != n)
    throw Error(ErrorCode::kShapeMismatch, "linear bias " + shape_str(b->shape));
  auto out = make_tensor({m, n});
  if (b) {
    for (int i = 0; i < m; ++i)
      std::copy(b->v.begin(), b->v.end(), out->v.begin() + static_cast<size_t>(i) * n);
  }
  detail::gemm_acc(x->v.data(), w->v.data(), out->v.data(), m, k, n);
  bool need = b ? detail::want_grad(tape, {&x, &w, &b}) : detail::want_grad(tape, {&x, &w});
  if (need) {
    out->requires_grad = true;
    tape->record(out, {x, w, b}, [x, w, b, out, m, k, n] {
      if (x->requires_grad) {
        x->ensure_grad();
        detail::gemm_bt_acc(out->g.data(), w->v.data(), x->g.data(), m, n, k);
      }
      if (w->requires_grad) {
        w->ensure_grad();
        detail::gemm_at_acc(x->v.data(), out->g.data(), w->g.data(), m, k, n);
      }
      if (b && b->requires_grad) {
        b->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) b->g[j] += out->g[static_cast<size_t>(i) * n + j];
      }
    });
  }
  return out;
}

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b, Tape* tape) {
  if (a->shape != b->shape)
    throw Error(ErrorCode::kShapeMismatch,
                "add shapes " + shape_str(a->shape) + " and " + shape_str(b->shape));
  auto out = make_tensor(a->shape);
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
  if (detail::want_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record(out, {a, b}, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < out->g.size(); ++i) a->g[i] += out->g[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < out->g.size(); ++i) b->g[i] += out->g[i];
      }
    });
  }
  return out;
}

inline TensorPtr scale(const TensorPtr& a, double s, Tape* tape) {
  auto out = make_tensor(a->shape);
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] * s;
  if (detail::want_grad(tape, {&a})) {
    out->requires_grad = true;
    tape->record(out, {a}, [a, out, s] {
      if (!a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < out->g.size(); ++i) a->g[i] += s * out->g[i];
    });
  }
  return out;
}

inline TensorPtr sum_all(const TensorPtr& a, Tape* tape) {
  auto out = make_scalar(std::accumulate(a->v.begin(), a->v.end(), 0.0));
  if (detail::want_grad(tape, {&a})) {
    out->requires_grad = true;
    tape->record(out, {a}, [a, out] {
      if (!a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += out->g[0];
    });
  }
  return out;
}

inline TensorPtr gelu(const TensorPtr& a, Tape* tape) {
  static constexpr double kInvSqrt2 = 0.70710678118654752440;
  static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  auto out = make_tensor(a->shape);
  for (size_t i = 0; i < out->v.size(); ++i) {
    double x = a->v[i];
    out->v[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  if (detail::want_grad(tape, {&a})) {
    out->requires_grad = true;
    tape->record(out, {a}, [a, out] {
      if (!a->requires_grad) return;
      a->ensure_grad();
      for (size_t i = 0; i < a->g.size(); ++i) {
        double x = a->v[i];
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        a->g[i] += out->g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

/// Row-wise layer normalization with learned gain/offset.
inline TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma,
                            const TensorPtr& beta, Tape* tape, double eps = 1e-5) {
  int m = x->rows(), d = x->cols();
  if (gamma->size() != d || beta->size() != d)
    throw Error(ErrorCode::kShapeMismatch, "layer_norm affine params mismatch");
  auto out = make_tensor(x->shape);
  auto xhat = std::make_shared<std::vector<double>>(x->v.size());
  auto inv_sd = std::make_shared<std::vector<double>>(m);
  for (int i = 0; i < m; ++i) {
    const double* xi = x->v.data() + static_cast<size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xi[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= d;
    double isd = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[i] = isd;
    double* hi = xhat->data() + static_cast<size_t>(i) * d;
    double* oi = out->v.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      hi[j] = (xi[j] - mu) * isd;
      oi[j] = gamma->v[j] * hi[j] + beta->v[j];
    }
  }
  if (detail::want_grad(tape, {&x, &gamma, &beta})) {
    out->requires_grad = true;
    tape->record(out, {x, gamma, beta}, [x, gamma, beta, out, xhat, inv_sd, m, d] {
      for (int i = 0; i < m; ++i) {
        const double* go = out->g.data() + static_cast<size_t>(i) * d;
        const double* hi = xhat->data() + static_cast<size_t>(i) * d;
        if (gamma->requires_grad) {
          gamma->ensure_grad();
          for (int j = 0; j < d; ++j) gamma->g[j] += go[j] * hi[j];
        }
        if (beta->requires_grad) {
          beta->ensure_grad();
          for (int j = 0; j < d; ++j) beta->g[j] += go[j];
        }
        if (x->requires_grad) {
          x->ensure_grad();
          double* gx = x->g.data() + static_cast<size_t>(i) * d;
          double mean_gh = 0.0, mean_ghh = 0.0;
          for (int j = 0; j < d; ++j) {
            double gh = go[j] * gamma->v[j];
            mean_gh += gh;
            mean_ghh += gh * hi[j];
          }
          mean_gh /= d;
          mean_ghh /= d;
          for (int j = 0; j < d; ++j) {
            double gh = go[j] * gamma->v[j];
            gx[j] += (*inv_sd)[i] * (gh - mean_gh - hi[j] * mean_ghh);
          }
        }
      }
    });
  }
  return out;
}

/// Row-wise softmax with max subtraction.
inline TensorPtr softmax_rows(const TensorPtr& x, Tape* tape) {
  int m = x->rows(), d = x->cols();
  auto out = make_tensor(x->shape);
  for (int i = 0; i < m; ++i) {
    const double* xi = x->v.data() + static_cast<size_t>(i) * d;
    double* oi = out->v.data() + static_cast<size_t>(i) * d;
    double mx = xi[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      z += oi[j];
    }
    for (int j = 0; j < d; ++j) oi[j] /= z;
  }
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record(out, {x}, [x, out, m, d] {
      if (!x->requires_grad) return;
      x->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double* y = out->v.data() + static_cast<size_t>(i) * d;
        const double* gy = out->g.data() + static_cast<size_t>(i) * d;
        double* gx = x->g.data() + static_cast<size_t>(i) * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < d; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

/// 1-D convolution over time. x is [T x Cin]; w is [Cout x (K*Cin)] laid out
/// as (tap, channel); output is [Tout x Cout] with
/// Tout = (T + 2*pad - K) / stride + 1.
inline TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                        int kernel, int stride, int pad, Tape* tape) {
  int t_in = x->rows(), c_in = x->cols();
  int c_out = w->rows();
  if (w->cols() != kernel * c_in)
    throw Error(ErrorCode::kShapeMismatch,
                "conv1d weight " + shape_str(w->shape) + " expects cols " +
                    std::to_string(kernel * c_in));
  if (b && b->size() != c_out)
    throw Error(ErrorCode::kShapeMismatch, "conv1d bias " + shape_str(b->shape));
  int t_out = (t_in + 2 * pad - kernel) / stride + 1;
  if (t_out <= 0) throw Error(ErrorCode::kShapeMismatch, "conv1d input too short");
  auto out = make_tensor({t_out, c_out});
  for (int to = 0; to < t_out; ++to) {
    double* orow = out->v.data() + static_cast<size_t>(to) * c_out;
    if (b)
      for (int co = 0; co < c_out; ++co) orow[co] = b->v[co];
    for (int kk = 0; kk < kernel; ++kk) {
      int ti = to * stride - pad + kk;
      if (ti < 0 || ti >= t_in) continue;
      const double* xrow = x->v.data() + static_cast<size_t>(ti) * c_in;
      for (int co = 0; co < c_out; ++co) {
        const double* wrow = w->v.data() + static_cast<size_t>(co) * (kernel * c_in) +
                             static_cast<size_t>(kk) * c_in;
        double acc = 0.0;
        for (int ci = 0; ci < c_in; ++ci) acc += xrow[ci] * wrow[ci];
        orow[co] += acc;
      }
    }
  }
  bool need = b ? detail::want_grad(tape, {&x, &w, &b}) : detail::want_grad(tape, {&x, &w});
  if (need) {
    out->requires_grad = true;
    tape->record(out, {x, w, b}, [x, w, b, out, kernel, stride, pad, t_in, c_in, c_out, t_out] {
      for (int to = 0; to < t_out; ++to) {
        const double* grow = out->g.data() + static_cast<size_t>(to) * c_out;
        if (b && b->requires_grad) {
          b->ensure_grad();
          for (int co = 0; co < c_out; ++co) b->g[co] += grow[co];
        }
        for (int kk = 0; kk < kernel; ++kk) {
          int ti = to * stride - pad + kk;
          if (ti < 0 || ti >= t_in) continue;
          const double* xrow = x->v.data() + static_cast<size_t>(ti) * c_in;
          for (int co = 0; co < c_out; ++co) {
            double go = grow[co];
            if (go == 0.0) continue;
            size_t woff = static_cast<size_t>(co) * (kernel * c_in) +
                          static_cast<size_t>(kk) * c_in;
            if (w->requires_grad) {
              w->ensure_grad();
              for (int ci = 0; ci < c_in; ++ci) w->g[woff + ci] += go * xrow[ci];
            }
            if (x->requires_grad) {
              x->ensure_grad();
              double* gxrow = x->g.data() + static_cast<size_t>(ti) * c_in;
              for (int ci = 0; ci < c_in; ++ci) gxrow[ci] += go * w->v[woff + ci];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Gathers rows of an embedding table. Backward scatter-adds into the table.
inline TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids,
                                  Tape* tape) {
  int v_size = table->rows(), d = table->cols();
  for (int id : ids)
    if (id < 0 || id >= v_size)
      throw Error(ErrorCode::kContract, "embedding id " + std::to_string(id) +
                                            " outside table of " + std::to_string(v_size));
  auto out = make_tensor({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->v.begin() + static_cast<size_t>(ids[i]) * d, d,
                out->v.begin() + i * d);
  if (detail::want_grad(tape, {&table})) {
    out->requires_grad = true;
    auto ids_copy = ids;
    tape->record(out, {table}, [table, out, ids_copy, d] {
      if (!table->requires_grad) return;
      table->ensure_grad();
      for (size_t i = 0; i < ids_copy.size(); ++i) {
        const double* go = out->g.data() + i * d;
        double* gt = table->g.data() + static_cast<size_t>(ids_copy[i]) * d;
        for (int j = 0; j < d; ++j) gt[j] += go[j];
      }
    });
  }
  return out;
}

inline TensorPtr concat_rows(const TensorPtr& a, const TensorPtr& b, Tape* tape) {
  if (a->cols() != b->cols())
    throw Error(ErrorCode::kShapeMismatch,
                "concat_rows widths " + shape_str(a->shape) + " and " + shape_str(b->shape));
  int d = a->cols();
  auto out = make_tensor({a->rows() + b->rows(), d});
  std::copy(a->v.begin(), a->v.end(), out->v.begin());
  std::copy(b->v.begin(), b->v.end(), out->v.begin() + a->v.size());
  if (detail::want_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record(out, {a, b}, [a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += out->g[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < b->g.size(); ++i) b->g[i] += out->g[a->v.size() + i];
      }
    });
  }
  return out;
}

inline TensorPtr slice_rows(const TensorPtr& x, int begin, int count, Tape* tape) {
  if (begin < 0 || count < 0 || begin + count > x->rows())
    throw Error(ErrorCode::kShapeMismatch, "slice_rows out of range");
  int d = x->cols();
  auto out = make_tensor({count, d});
  std::copy_n(x->v.begin() + static_cast<size_t>(begin) * d, static_cast<size_t>(count) * d,
              out->v.begin());
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record(out, {x}, [x, out, begin, d] {
      if (!x->requires_grad) return;
      x->ensure_grad();
      double* gx = x->g.data() + static_cast<size_t>(begin) * d;
      for (size_t i = 0; i < out->g.size(); ++i) gx[i] += out->g[i];
    });
  }
  return out;
}

/// Multi-head scaled dot-product attention with an explicit boolean
/// visibility matrix. allowed[i*Tk+j] says whether query row i may attend key
/// row j. Disallowed positions get an additive -1e9 bias before the softmax,
/// which underflows to an exactly-zero attention weight.
inline TensorPtr attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                           const std::vector<uint8_t>& allowed, int n_heads, Tape* tape) {
  int tq = q->rows(), tk = k->rows(), d = q->cols();
  if (k->cols() != d || v->cols() != d || v->rows() != tk)
    throw Error(ErrorCode::kShapeMismatch, "attention q/k/v disagree");
  if (d % n_heads != 0)
    throw Error(ErrorCode::kShapeMismatch, "attention width not divisible by heads");
  if (allowed.size() != static_cast<size_t>(tq) * tk)
    throw Error(ErrorCode::kShapeMismatch, "attention visibility matrix size");
  for (int i = 0; i < tq; ++i) {
    bool any = false;
    for (int j = 0; j < tk; ++j) any |= allowed[static_cast<size_t>(i) * tk + j] != 0;
    if (!any)
      throw Error(ErrorCode::kDegenerateMask,
                  "attention row " + std::to_string(i) + " attends nothing");
  }
  int hd = d / n_heads;
  double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  auto out = make_tensor({tq, d});
  // Attention weights are kept for the backward pass: [head][tq x tk].
  auto weights = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n_heads) * tq * tk);
  for (int h = 0; h < n_heads; ++h) {
    int off = h * hd;
    double* wbase = weights->data() + static_cast<size_t>(h) * tq * tk;
    for (int i = 0; i < tq; ++i) {
      const double* qi = q->v.data() + static_cast<size_t>(i) * d + off;
      double* wrow = wbase + static_cast<size_t>(i) * tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < tk; ++j) {
        const double* kj = k->v.data() + static_cast<size_t>(j) * d + off;
        double s = 0.0;
        for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
        s *= sc;
        if (!allowed[static_cast<size_t>(i) * tk + j]) s += -1e9;
        wrow[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int j = 0; j < tk; ++j) {
        wrow[j] = std::exp(wrow[j] - mx);
        z += wrow[j];
      }
      double* orow = out->v.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < tk; ++j) {
        wrow[j] /= z;
        if (wrow[j] == 0.0) continue;
        const double* vj = v->v.data() + static_cast<size_t>(j) * d + off;
        for (int c = 0; c < hd; ++c) orow[c] += wrow[j] * vj[c];
      }
    }
  }
  if (detail::want_grad(tape, {&q, &k, &v})) {
    out->requires_grad = true;
    tape->record(out, {q, k, v}, [q, k, v, out, weights, n_heads, tq, tk, d, hd, sc] {
      std::vector<double> da(tk), ds(tk);
      for (int h = 0; h < n_heads; ++h) {
        int off = h * hd;
        const double* wbase = weights->data() + static_cast<size_t>(h) * tq * tk;
        for (int i = 0; i < tq; ++i) {
          const double* wrow = wbase + static_cast<size_t>(i) * tk;
          const double* go = out->g.data() + static_cast<size_t>(i) * d + off;
          // dA[j] = dO . V_j ; dS = A * (dA - sum(dA*A))
          double dot = 0.0;
          for (int j = 0; j < tk; ++j) {
            if (wrow[j] == 0.0) {
              da[j] = 0.0;
              continue;
            }
            const double* vj = v->v.data() + static_cast<size_t>(j) * d + off;
            double a = 0.0;
            for (int c = 0; c < hd; ++c) a += go[c] * vj[c];
            da[j] = a;
            dot += a * wrow[j];
          }
          for (int j = 0; j < tk; ++j) ds[j] = wrow[j] * (da[j] - dot);
          if (v->requires_grad) {
            v->ensure_grad();
            for (int j = 0; j < tk; ++j) {
              if (wrow[j] == 0.0) continue;
              double* gv = v->g.data() + static_cast<size_t>(j) * d + off;
              for (int c = 0; c < hd; ++c) gv[c] += wrow[j] * go[c];
            }
          }
          if (q->requires_grad) {
            q->ensure_grad();
            double* gq = q->g.data() + static_cast<size_t>(i) * d + off;
            for (int j = 0; j < tk; ++j) {
              if (ds[j] == 0.0) continue;
              const double* kj = k->v.data() + static_cast<size_t>(j) * d + off;
              for (int c = 0; c < hd; ++c) gq[c] += sc * ds[j] * kj[c];
            }
          }
          if (k->requires_grad) {
            k->ensure_grad();
            const double* qi = q->v.data() + static_cast<size_t>(i) * d + off;
            for (int j = 0; j < tk; ++j) {
              if (ds[j] == 0.0) continue;
              double* gk = k->g.data() + static_cast<size_t>(j) * d + off;
              for (int c = 0; c < hd; ++c) gk[c] += sc * ds[j] * qi[c];
            }
          }
        }
      }
    });
  }
  return out;
}

/// Self-attention over a padded sequence: every query row may attend exactly
/// the valid key positions. Rows at invalid query positions are still defined;
/// callers are expected to ignore them downstream.
inline TensorPtr masked_attention(const TensorPtr& q, const TensorPtr& k,
                                  const TensorPtr& v, const std::vector<bool>& valid,
                                  int n_heads, Tape* tape) {
  int t = q->rows();
  if (static_cast<int>(valid.size()) != t)
    throw Error(ErrorCode::kShapeMismatch, "mask length != sequence length");
  bool any = false;
  for (bool b : valid) any |= b;
  if (!any) throw Error(ErrorCode::kDegenerateMask, "all positions masked");
  std::vector<uint8_t> allowed(static_cast<size_t>(t) * t);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j)
      allowed[static_cast<size_t>(i) * t + j] = valid[j] ? 1 : 0;
  return attention(q, k, v, allowed, n_heads, tape);
}

struct MaskedLoss {
  TensorPtr loss_sum;  // scalar: -sum over masked positions of log p(target)
  int count = 0;       // number of masked-true positions
};

/// Fused log-softmax cross-entropy over the positions where loss_mask is
/// true. Positions with mask=false contribute exactly zero to both the value
/// and every gradient; their target entries are never read.
inline MaskedLoss masked_cross_entropy(const TensorPtr& logits,
                                       const std::vector<int>& targets,
                                       const std::vector<bool>& loss_mask, Tape* tape) {
  int l = logits->rows(), vocab = logits->cols();
  if (static_cast<int>(targets.size()) != l || static_cast<int>(loss_mask.size()) != l)
    throw Error(ErrorCode::kShapeMismatch, "cross-entropy target/mask length");
  int count = 0;
  for (bool m : loss_mask) count += m ? 1 : 0;
  if (count == 0)
    throw Error(ErrorCode::kEmptyAnswer, "loss mask has no answer positions");
  auto probs = std::make_shared<std::vector<double>>();
  std::vector<int> positions;
  positions.reserve(count);
  double total = 0.0;
  for (int t = 0; t < l; ++t) {
    if (!loss_mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= vocab)
      throw Error(ErrorCode::kContract, "target id outside vocabulary");
    positions.push_back(t);
    const double* row = logits->v.data() + static_cast<size_t>(t) * vocab;
    double mx = row[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    double log_z = mx + std::log(z);
    total += log_z - row[targets[t]];
    if (detail::want_grad(tape, {&logits})) {
      size_t base = probs->size();
      probs->resize(base + vocab);
      for (int j = 0; j < vocab; ++j)
        (*probs)[base + j] = std::exp(row[j] - log_z);
    }
  }
  auto out = make_scalar(total);
  if (detail::want_grad(tape, {&logits})) {
    out->requires_grad = true;
    auto tgt = targets;
    tape->record(out, {logits}, [logits, out, probs, positions, tgt, vocab] {
      if (!logits->requires_grad) return;
      logits->ensure_grad();
      double go = out->g[0];
      for (size_t i = 0; i < positions.size(); ++i) {
        int t = positions[i];
        double* gl = logits->g.data() + static_cast<size_t>(t) * vocab;
        const double* p = probs->data() + i * vocab;
        for (int j = 0; j < vocab; ++j) gl[j] += go * p[j];
        gl[tgt[t]] -= go;
      }
    });
  }
  return {out, count};
}

/// Per-entry sigmoid binary cross-entropy against 0/1 targets, summed.
inline MaskedLoss sigmoid_bce(const TensorPtr& logits, const std::vector<double>& targets,
                              Tape* tape) {
  if (targets.size() != logits->v.size())
    throw Error(ErrorCode::kShapeMismatch, "bce target size");
  double total = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    double x = logits->v[i], y = targets[i];
    // log(1 + e^x) computed stably
    double softplus = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    total += softplus - y * x;
  }
  auto out = make_scalar(total);
  if (detail::want_grad(tape, {&logits})) {
    out->requires_grad = true;
    auto tgt = targets;
    tape->record(out, {logits}, [logits, out, tgt] {
      if (!logits->requires_grad) return;
      logits->ensure_grad();
      double go = out->g[0];
      for (size_t i = 0; i < tgt.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-logits->v[i]));
        logits->g[i] += go * (s - tgt[i]);
      }
    });
  }
  return {out, static_cast<int>(targets.size())};
}

/// Max relative gradient error between the tape backward and central finite
/// differences, over every coordinate of x. f must build a scalar from x on
/// the tape it is given.
inline double finite_diff_check(
    const std::function<TensorPtr(Tape&, const TensorPtr&)>& f, const TensorPtr& x,
    double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw Error(ErrorCode::kContract, "finite-difference eps outside [1e-7, 1e-3]");
  x->requires_grad = true;
  x->zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    auto root = f(tape, x);
    backward(tape, root);
    x->ensure_grad();
    analytic = x->g;
  }
  double worst = 0.0;
  for (size_t i = 0; i < x->v.size(); ++i) {
    double keep = x->v[i];
    x->v[i] = keep + eps;
    Tape tp;
    double fp = f(tp, x)->v[0];
    x->v[i] = keep - eps;
    Tape tm;
    double fm = f(tm, x)->v[0];
    x->v[i] = keep;
    double central = (fp - fm) / (2.0 * eps);
    double err = std::abs(analytic[i] - central) /
                 (std::abs(analytic[i]) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

/// Named parameter collection. Iteration order is the lexicographic path
/// order, which keeps optimizer updates and serialization deterministic.
class ParamSet {
 public:
  TensorPtr add(const std::string& path, TensorPtr t, bool trainable) {
    auto [it, fresh] = params_.emplace(path, Entry{t, trainable});
    if (!fresh) throw Error(ErrorCode::kContract, "duplicate parameter path " + path);
    t->requires_grad = trainable;
    return t;
  }

  TensorPtr get(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end())
      throw Error(ErrorCode::kContract, "unknown parameter " + path);
    return it->second.tensor;
  }

  bool trainable(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end())
      throw Error(ErrorCode::kContract, "unknown parameter " + path);
    return it->second.trainable;
  }

  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [path, e] : params_) {
      if (path.rfind(prefix, 0) == 0) {
        e.trainable = trainable;
        e.tensor->requires_grad = trainable;
      }
    }
  }

  void zero_grad() {
    for (auto& [path, e] : params_) e.tensor->zero_grad();
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [path, e] : params_) fn(path, e.tensor, e.trainable);
  }

  size_t size() const { return params_.size(); }

  /// FNV hash over the values of parameters selected by a path predicate.
  uint64_t value_hash(const std::function<bool(const std::string&)>& select) const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [path, e] : params_) {
      if (!select(path)) continue;
      h = fnv1a64(path.data(), path.size(), h);
      h = fnv1a64(e.tensor->v.data(), e.tensor->v.size() * sizeof(double), h);
    }
    return h;
  }

 private:
  struct Entry {
    TensorPtr tensor;
    bool trainable;
  };
  std::map<std::string, Entry> params_;
};

}  // namespace earkit::grad
