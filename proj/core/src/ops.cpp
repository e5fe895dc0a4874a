// Copyright 2026 The icolab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "icolab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

namespace icolab {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace ops {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <class T>
NodePtr<T> new_node(Shape shape) {
  auto n = std::make_shared<TensorNode<T>>();
  n->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  n->shape = std::move(shape);
  return n;
}

template <class T>
void check_finite(const TensorNode<T>& n, const char* kernel) {
  for (const T v : n.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite output from kernel '") + kernel + "' (shape " +
                         shape_str(n.shape) + ")");
    }
  }
}

template <class T>
BasicTensor<T> finish(Tape<T>& tape, NodePtr<T> out, const char* kernel,
                      std::vector<NodePtr<T>> inputs, typename Tape<T>::BackwardFn fn) {
  check_finite(*out, kernel);
  tape.record(out, std::move(inputs), std::move(fn));
  return BasicTensor<T>(std::move(out));
}

// The message is only built when the check fails.
#define OP_REQUIRE(cond, kernel, msg) \
  do {                                \
    if (!(cond)) throw ContractViolation(std::string(kernel) + ": " + (msg)); \
  } while (0)

// Splits shape at `axis` into (outer, extent, inner).
struct AxisSplit {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  r.extent = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <class T>
BasicTensor<T> matmul(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b,
                      bool transpose_b) {
  constexpr const char* kName = "matmul";
  OP_REQUIRE(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3), kName,
          "operands must both be rank 2 or both rank 3, got " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  const bool batched = a.rank() == 3;
  const int64_t batch = batched ? a.dim(0) : 1;
  if (batched) OP_REQUIRE(b.dim(0) == batch, kName, "batch extents differ");
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const int64_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  OP_REQUIRE(k == bk, kName,
          "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
              (transpose_b ? " (b transposed)" : ""));
  Shape os = batched ? Shape{batch, m, n} : Shape{m, n};
  auto out = new_node<T>(os);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out->value.data();
  for (int64_t s = 0; s < batch; ++s) {
    ConstMap<T> A(pa + s * m * k, m, k);
    MutMap<T> C(pc + s * m * n, m, n);
    if (transpose_b) {
      ConstMap<T> B(pb + s * n * k, n, k);
      C.noalias() = A * B.transpose();
    } else {
      ConstMap<T> B(pb + s * k * n, k, n);
      C.noalias() = A * B;
    }
  }
  return finish<T>(
      tape, out, kName, {a.shared_node(), b.shared_node()},
      [batch, m, k, n, transpose_b](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
        auto ga = accumulate_grad(in[0]);
        auto gb = accumulate_grad(in[1]);
        const T* pa = in[0]->value.data();
        const T* pb = in[1]->value.data();
        const T* pg = o.grad.data();
        for (int64_t s = 0; s < batch; ++s) {
          ConstMap<T> G(pg + s * m * n, m, n);
          if (!ga.empty()) {
            MutMap<T> GA(ga.data() + s * m * k, m, k);
            if (transpose_b) {
              GA.noalias() += G * ConstMap<T>(pb + s * n * k, n, k);
            } else {
              GA.noalias() += G * ConstMap<T>(pb + s * k * n, k, n).transpose();
            }
          }
          if (!gb.empty()) {
            ConstMap<T> A(pa + s * m * k, m, k);
            if (transpose_b) {
              MutMap<T> GB(gb.data() + s * n * k, n, k);
              GB.noalias() += G.transpose() * A;
            } else {
              MutMap<T> GB(gb.data() + s * k * n, k, n);
              GB.noalias() += A.transpose() * G;
            }
          }
        }
      });
}

template <class T>
BasicTensor<T> add(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  OP_REQUIRE(a.shape() == b.shape(), "add",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = new_node<T>(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] + bv[i];
  return finish<T>(tape, out, "add", {a.shared_node(), b.shared_node()},
                   [](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     for (int j = 0; j < 2; ++j) {
                       auto g = accumulate_grad(in[static_cast<size_t>(j)]);
                       for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                     }
                   });
}

template <class T>
BasicTensor<T> mul(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  OP_REQUIRE(a.shape() == b.shape(), "mul",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = new_node<T>(a.shape());
  const auto av = a.data();
  const auto bv = b.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] * bv[i];
  return finish<T>(tape, out, "mul", {a.shared_node(), b.shared_node()},
                   [](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto ga = accumulate_grad(in[0]);
                     auto gb = accumulate_grad(in[1]);
                     for (size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * in[1]->value[i];
                     for (size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * in[0]->value[i];
                   });
}

template <class T>
BasicTensor<T> scale(Tape<T>& tape, const BasicTensor<T>& a, T factor) {
  auto out = new_node<T>(a.shape());
  const auto av = a.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] * factor;
  return finish<T>(tape, out, "scale", {a.shared_node()},
                   [factor](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
                   });
}

template <class T>
BasicTensor<T> add_bias(Tape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  OP_REQUIRE(x.rank() == 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1), "add_bias",
          "expected [M,N] + [N], got " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  const auto bv = bias.data();
  for (int64_t r = 0; r < m; ++r)
    for (int64_t c = 0; c < n; ++c) out->value[r * n + c] = xv[r * n + c] + bv[c];
  return finish<T>(tape, out, "add_bias", {x.shared_node(), bias.shared_node()},
                   [m, n](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto gx = accumulate_grad(in[0]);
                     auto gb = accumulate_grad(in[1]);
                     for (size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                     if (!gb.empty())
                       for (int64_t r = 0; r < m; ++r)
                         for (int64_t c = 0; c < n; ++c) gb[c] += o.grad[r * n + c];
                   });
}

template <class T>
BasicTensor<T> softmax(Tape<T>& tape, const BasicTensor<T>& x) {
  OP_REQUIRE(x.rank() >= 1, "softmax", "needs rank >= 1");
  const int64_t cols = x.dim(-1);
  const int64_t rows = cols == 0 ? 0 : x.numel() / cols;
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * cols;
    T* dst = out->value.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t c = 0; c < cols; ++c) mx = std::max(mx, src[c]);
    T total = 0;
    for (int64_t c = 0; c < cols; ++c) {
      dst[c] = std::exp(src[c] - mx);
      total += dst[c];
    }
    const T inv = T(1) / total;
    for (int64_t c = 0; c < cols; ++c) dst[c] *= inv;
  }
  return finish<T>(tape, out, "softmax", {x.shared_node()},
                   [rows, cols](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     if (g.empty()) return;
                     for (int64_t r = 0; r < rows; ++r) {
                       const T* y = o.value.data() + r * cols;
                       const T* dy = o.grad.data() + r * cols;
                       T dot = 0;
                       for (int64_t c = 0; c < cols; ++c) dot += y[c] * dy[c];
                       for (int64_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
                     }
                   });
}

template <class T>
BasicTensor<T> rmsnorm(Tape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& gain, T eps) {
  OP_REQUIRE(x.rank() == 2 && gain.rank() == 1 && gain.dim(0) == x.dim(1), "rmsnorm",
          "expected [M,N] with gain [N], got " + shape_str(x.shape()) + ", " +
              shape_str(gain.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  auto out = new_node<T>(x.shape());
  std::vector<T> inv_rms(static_cast<size_t>(m));
  const auto xv = x.data();
  const auto gv = gain.data();
  for (int64_t r = 0; r < m; ++r) {
    T ss = 0;
    for (int64_t c = 0; c < n; ++c) ss += xv[r * n + c] * xv[r * n + c];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    inv_rms[static_cast<size_t>(r)] = inv;
    for (int64_t c = 0; c < n; ++c) out->value[r * n + c] = xv[r * n + c] * inv * gv[c];
  }
  return finish<T>(
      tape, out, "rmsnorm", {x.shared_node(), gain.shared_node()},
      [m, n, inv_rms = std::move(inv_rms)](const TensorNode<T>& o,
                                           std::span<TensorNode<T>* const> in) {
        auto gx = accumulate_grad(in[0]);
        auto gg = accumulate_grad(in[1]);
        const T* xv = in[0]->value.data();
        const T* gv = in[1]->value.data();
        for (int64_t r = 0; r < m; ++r) {
          const T inv = inv_rms[static_cast<size_t>(r)];
          const T* dy = o.grad.data() + r * n;
          const T* xr = xv + r * n;
          if (!gg.empty())
            for (int64_t c = 0; c < n; ++c) gg[c] += dy[c] * xr[c] * inv;
          if (!gx.empty()) {
            T dot = 0;
            for (int64_t c = 0; c < n; ++c) dot += dy[c] * gv[c] * xr[c];
            const T coef = inv * inv * inv * dot / static_cast<T>(n);
            for (int64_t c = 0; c < n; ++c) gx[r * n + c] += inv * dy[c] * gv[c] - coef * xr[c];
          }
        }
      });
}

template <class T>
BasicTensor<T> gelu(Tape<T>& tape, const BasicTensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  for (size_t i = 0; i < out->value.size(); ++i) {
    const T v = xv[i];
    out->value[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return finish<T>(tape, out, "gelu", {x.shared_node()},
                   [](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     for (size_t i = 0; i < g.size(); ++i) {
                       const T v = in[0]->value[i];
                       const T u = kC * (v + kA * v * v * v);
                       const T t = std::tanh(u);
                       const T du = kC * (T(1) + T(3) * kA * v * v);
                       const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
                       g[i] += o.grad[i] * d;
                     }
                   });
}

template <class T>
BasicTensor<T> tanh(Tape<T>& tape, const BasicTensor<T>& x) {
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::tanh(xv[i]);
  return finish<T>(tape, out, "tanh", {x.shared_node()},
                   [](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     for (size_t i = 0; i < g.size(); ++i) {
                       const T y = o.value[i];
                       g[i] += o.grad[i] * (T(1) - y * y);
                     }
                   });
}

template <class T>
BasicTensor<T> embedding(Tape<T>& tape, const BasicTensor<T>& table, std::span<const int> ids) {
  OP_REQUIRE(table.rank() == 2, "embedding", "table must be [V,D], got " + shape_str(table.shape()));
  const int64_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  for (int id : idv) {
    OP_REQUIRE(id >= 0 && id < vocab, "embedding",
            "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
  }
  auto out = new_node<T>({static_cast<int64_t>(idv.size()), d});
  const auto tv = table.data();
  for (size_t r = 0; r < idv.size(); ++r)
    std::copy_n(tv.data() + idv[r] * d, d, out->value.data() + static_cast<int64_t>(r) * d);
  return finish<T>(tape, out, "embedding", {table.shared_node()},
                   [d, idv = std::move(idv)](const TensorNode<T>& o,
                                             std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     if (g.empty()) return;
                     for (size_t r = 0; r < idv.size(); ++r) {
                       const T* src = o.grad.data() + static_cast<int64_t>(r) * d;
                       T* dst = g.data() + idv[r] * d;
                       for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
                     }
                   });
}

template <class T>
BasicTensor<T> cross_entropy(Tape<T>& tape, const BasicTensor<T>& logits,
                             std::span<const int> targets, Reduction reduction) {
  OP_REQUIRE(logits.rank() == 2, "cross_entropy",
          "logits must be [M,V], got " + shape_str(logits.shape()));
  const int64_t m = logits.dim(0), v = logits.dim(1);
  OP_REQUIRE(static_cast<int64_t>(targets.size()) == m, "cross_entropy",
          "target count " + std::to_string(targets.size()) + " != rows " + std::to_string(m));
  std::vector<int> tv(targets.begin(), targets.end());
  int64_t counted = 0;
  for (int t : tv) {
    OP_REQUIRE(t >= -1 && t < v, "cross_entropy",
            "target " + std::to_string(t) + " outside vocabulary of " + std::to_string(v));
    counted += t >= 0;
  }
  const auto lv = logits.data();
  std::vector<T> probs(static_cast<size_t>(m * v), T(0));
  T total = 0;
  for (int64_t r = 0; r < m; ++r) {
    if (tv[static_cast<size_t>(r)] < 0) continue;
    const T* row = lv.data() + r * v;
    T mx = row[0];
    for (int64_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    T z = 0;
    for (int64_t c = 0; c < v; ++c) {
      probs[r * v + c] = std::exp(row[c] - mx);
      z += probs[r * v + c];
    }
    for (int64_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    total += -(row[tv[static_cast<size_t>(r)]] - mx - std::log(z));
  }
  const T norm = (reduction == Reduction::kMean && counted > 0) ? T(1) / static_cast<T>(counted)
                                                                 : T(1);
  auto out = new_node<T>({});
  out->value[0] = total * norm;
  return finish<T>(
      tape, out, "cross_entropy", {logits.shared_node()},
      [m, v, norm, tv = std::move(tv), probs = std::move(probs)](
          const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
        auto g = accumulate_grad(in[0]);
        if (g.empty()) return;
        const T up = o.grad[0] * norm;
        for (int64_t r = 0; r < m; ++r) {
          const int t = tv[static_cast<size_t>(r)];
          if (t < 0) continue;
          for (int64_t c = 0; c < v; ++c) g[r * v + c] += up * probs[r * v + c];
          g[r * v + t] -= up;
        }
      });
}

template <class T>
BasicTensor<T> concat(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b, int axis) {
  OP_REQUIRE(a.rank() == b.rank() && a.rank() > 0, "concat", "rank mismatch");
  if (axis < 0) axis += static_cast<int>(a.rank());
  OP_REQUIRE(axis >= 0 && axis < a.rank(), "concat", "axis out of range");
  for (int i = 0; i < a.rank(); ++i) {
    if (i != axis) {
      OP_REQUIRE(a.dim(i) == b.dim(i), "concat",
              "extents differ off-axis: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  const AxisSplit sa = split_at(a.shape(), axis);
  const AxisSplit sb = split_at(b.shape(), axis);
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] += b.dim(axis);
  auto out = new_node<T>(os);
  const int64_t ca = sa.extent * sa.inner, cb = sb.extent * sb.inner;
  const auto av = a.data();
  const auto bv = b.data();
  for (int64_t o = 0; o < sa.outer; ++o) {
    T* dst = out->value.data() + o * (ca + cb);
    std::copy_n(av.data() + o * ca, ca, dst);
    std::copy_n(bv.data() + o * cb, cb, dst + ca);
  }
  return finish<T>(tape, out, "concat", {a.shared_node(), b.shared_node()},
                   [outer = sa.outer, ca, cb](const TensorNode<T>& o,
                                              std::span<TensorNode<T>* const> in) {
                     auto ga = accumulate_grad(in[0]);
                     auto gb = accumulate_grad(in[1]);
                     for (int64_t r = 0; r < outer; ++r) {
                       const T* src = o.grad.data() + r * (ca + cb);
                       if (!ga.empty())
                         for (int64_t i = 0; i < ca; ++i) ga[r * ca + i] += src[i];
                       if (!gb.empty())
                         for (int64_t i = 0; i < cb; ++i) gb[r * cb + i] += src[ca + i];
                     }
                   });
}

template <class T>
BasicTensor<T> masked_fill(Tape<T>& tape, const BasicTensor<T>& x, std::span<const uint8_t> hidden,
                           T fill_value) {
  OP_REQUIRE(x.rank() >= 2, "masked_fill", "needs rank >= 2");
  const int64_t plane = x.dim(-2) * x.dim(-1);
  OP_REQUIRE(static_cast<int64_t>(hidden.size()) == plane, "masked_fill",
          "mask has " + std::to_string(hidden.size()) + " entries, expected " +
              std::to_string(plane));
  std::vector<uint8_t> hv(hidden.begin(), hidden.end());
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  const int64_t planes = x.numel() / std::max<int64_t>(plane, 1);
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t i = 0; i < plane; ++i)
      out->value[p * plane + i] = hv[static_cast<size_t>(i)] ? fill_value : xv[p * plane + i];
  return finish<T>(tape, out, "masked_fill", {x.shared_node()},
                   [plane, planes, hv = std::move(hv)](const TensorNode<T>& o,
                                                       std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     if (g.empty()) return;
                     for (int64_t p = 0; p < planes; ++p)
                       for (int64_t i = 0; i < plane; ++i)
                         if (!hv[static_cast<size_t>(i)]) g[p * plane + i] += o.grad[p * plane + i];
                   });
}

template <class T>
BasicTensor<T> split_heads(Tape<T>& tape, const BasicTensor<T>& x, int64_t n_heads) {
  OP_REQUIRE(x.rank() == 2 && n_heads > 0 && x.dim(1) % n_heads == 0, "split_heads",
          "expected [T, H*Dh], got " + shape_str(x.shape()));
  const int64_t t = x.dim(0), dh = x.dim(1) / n_heads, h = n_heads;
  auto out = new_node<T>({h, t, dh});
  const auto xv = x.data();
  for (int64_t r = 0; r < t; ++r)
    for (int64_t hh = 0; hh < h; ++hh)
      std::copy_n(xv.data() + r * h * dh + hh * dh, dh, out->value.data() + (hh * t + r) * dh);
  return finish<T>(tape, out, "split_heads", {x.shared_node()},
                   [t, h, dh](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     if (g.empty()) return;
                     for (int64_t r = 0; r < t; ++r)
                       for (int64_t hh = 0; hh < h; ++hh)
                         for (int64_t c = 0; c < dh; ++c)
                           g[r * h * dh + hh * dh + c] += o.grad[(hh * t + r) * dh + c];
                   });
}

template <class T>
BasicTensor<T> merge_heads(Tape<T>& tape, const BasicTensor<T>& x) {
  OP_REQUIRE(x.rank() == 3, "merge_heads", "expected [H,T,Dh], got " + shape_str(x.shape()));
  const int64_t h = x.dim(0), t = x.dim(1), dh = x.dim(2);
  auto out = new_node<T>({t, h * dh});
  const auto xv = x.data();
  for (int64_t hh = 0; hh < h; ++hh)
    for (int64_t r = 0; r < t; ++r)
      std::copy_n(xv.data() + (hh * t + r) * dh, dh, out->value.data() + r * h * dh + hh * dh);
  return finish<T>(tape, out, "merge_heads", {x.shared_node()},
                   [t, h, dh](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     if (g.empty()) return;
                     for (int64_t hh = 0; hh < h; ++hh)
                       for (int64_t r = 0; r < t; ++r)
                         for (int64_t c = 0; c < dh; ++c)
                           g[(hh * t + r) * dh + c] += o.grad[r * h * dh + hh * dh + c];
                   });
}

template <class T>
BasicTensor<T> rope(Tape<T>& tape, const BasicTensor<T>& x, std::span<const int64_t> positions,
                    double base) {
  OP_REQUIRE(x.rank() == 3 && x.dim(2) % 2 == 0, "rope",
          "expected [H,T,Dh] with even Dh, got " + shape_str(x.shape()));
  const int64_t h = x.dim(0), t = x.dim(1), dh = x.dim(2), half = dh / 2;
  OP_REQUIRE(static_cast<int64_t>(positions.size()) == t, "rope", "one position per row required");
  // cos/sin table per (row, frequency), computed in double for both precisions.
  std::vector<T> cs(static_cast<size_t>(t * half)), sn(static_cast<size_t>(t * half));
  for (int64_t r = 0; r < t; ++r) {
    for (int64_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double ang = static_cast<double>(positions[static_cast<size_t>(r)]) * freq;
      cs[r * half + i] = static_cast<T>(std::cos(ang));
      sn[r * half + i] = static_cast<T>(std::sin(ang));
    }
  }
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  for (int64_t hh = 0; hh < h; ++hh) {
    for (int64_t r = 0; r < t; ++r) {
      const T* src = xv.data() + (hh * t + r) * dh;
      T* dst = out->value.data() + (hh * t + r) * dh;
      for (int64_t i = 0; i < half; ++i) {
        const T c = cs[r * half + i], s = sn[r * half + i];
        dst[i] = src[i] * c - src[i + half] * s;
        dst[i + half] = src[i] * s + src[i + half] * c;
      }
    }
  }
  return finish<T>(tape, out, "rope", {x.shared_node()},
                   [h, t, dh, half, cs = std::move(cs), sn = std::move(sn)](
                       const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     if (g.empty()) return;
                     for (int64_t hh = 0; hh < h; ++hh) {
                       for (int64_t r = 0; r < t; ++r) {
                         const T* dy = o.grad.data() + (hh * t + r) * dh;
                         T* dx = g.data() + (hh * t + r) * dh;
                         for (int64_t i = 0; i < half; ++i) {
                           const T c = cs[r * half + i], s = sn[r * half + i];
                           dx[i] += dy[i] * c + dy[i + half] * s;
                           dx[i + half] += -dy[i] * s + dy[i + half] * c;
                         }
                       }
                     }
                   });
}

template <class T>
BasicTensor<T> select_rows(Tape<T>& tape, const BasicTensor<T>& x, std::span<const int64_t> rows) {
  OP_REQUIRE(x.rank() >= 2, "select_rows", "needs rank >= 2");
  const int64_t r_in = x.dim(-2), c = x.dim(-1);
  const int64_t outer = x.numel() / std::max<int64_t>(r_in * c, 1);
  std::vector<int64_t> idx(rows.begin(), rows.end());
  for (int64_t i : idx) {
    OP_REQUIRE(i >= 0 && i < r_in, "select_rows",
            "row " + std::to_string(i) + " outside extent " + std::to_string(r_in));
  }
  const auto r_out = static_cast<int64_t>(idx.size());
  Shape os = x.shape();
  os[os.size() - 2] = r_out;
  auto out = new_node<T>(os);
  const auto xv = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t r = 0; r < r_out; ++r)
      std::copy_n(xv.data() + (o * r_in + idx[static_cast<size_t>(r)]) * c, c,
                  out->value.data() + (o * r_out + r) * c);
  return finish<T>(tape, out, "select_rows", {x.shared_node()},
                   [outer, r_in, r_out, c, idx = std::move(idx)](
                       const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     if (g.empty()) return;
                     for (int64_t b = 0; b < outer; ++b)
                       for (int64_t r = 0; r < r_out; ++r) {
                         const T* src = o.grad.data() + (b * r_out + r) * c;
                         T* dst = g.data() + (b * r_in + idx[static_cast<size_t>(r)]) * c;
                         for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                       }
                   });
}

template <class T>
BasicTensor<T> sum(Tape<T>& tape, const BasicTensor<T>& x) {
  auto out = new_node<T>({});
  T total = 0;
  for (const T v : x.data()) total += v;
  out->value[0] = total;
  return finish<T>(tape, out, "sum", {x.shared_node()},
                   [](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     for (auto& v : g) v += o.grad[0];
                   });
}

template <class T>
BasicTensor<T> reshape(Tape<T>& tape, const BasicTensor<T>& x, Shape shape) {
  OP_REQUIRE(shape_numel(shape) == x.numel(), "reshape",
          "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto out = new_node<T>(std::move(shape));
  std::copy(x.data().begin(), x.data().end(), out->value.begin());
  return finish<T>(tape, out, "reshape", {x.shared_node()},
                   [](const TensorNode<T>& o, std::span<TensorNode<T>* const> in) {
                     auto g = accumulate_grad(in[0]);
                     for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                   });
}

template <class T>
std::vector<double> row_nll(const BasicTensor<T>& logits, std::span<const int> targets) {
  OP_REQUIRE(logits.rank() == 2 && static_cast<int64_t>(targets.size()) == logits.dim(0), "row_nll",
          "expected [M,V] logits with M targets");
  const int64_t m = logits.dim(0), v = logits.dim(1);
  std::vector<double> out(static_cast<size_t>(m), 0.0);
  const auto lv = logits.data();
  for (int64_t r = 0; r < m; ++r) {
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0) continue;
    OP_REQUIRE(t < v, "row_nll", "target outside vocabulary");
    const T* row = lv.data() + r * v;
    double mx = row[0];
    for (int64_t c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0;
    for (int64_t c = 0; c < v; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    out[static_cast<size_t>(r)] = -(static_cast<double>(row[t]) - mx - std::log(z));
  }
  return out;
}

#define ICOLAB_INSTANTIATE_OPS(T)                                                                \
  template BasicTensor<T> matmul(Tape<T>&, const BasicTensor<T>&, const BasicTensor<T>&, bool); \
  template BasicTensor<T> add(Tape<T>&, const BasicTensor<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> mul(Tape<T>&, const BasicTensor<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> scale(Tape<T>&, const BasicTensor<T>&, T);                            \
  template BasicTensor<T> add_bias(Tape<T>&, const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> softmax(Tape<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> rmsnorm(Tape<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);   \
  template BasicTensor<T> gelu(Tape<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> tanh(Tape<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> embedding(Tape<T>&, const BasicTensor<T>&, std::span<const int>);     \
  template BasicTensor<T> cross_entropy(Tape<T>&, const BasicTensor<T>&, std::span<const int>, \
                                        Reduction);                                             \
  template BasicTensor<T> concat(Tape<T>&, const BasicTensor<T>&, const BasicTensor<T>&, int);  \
  template BasicTensor<T> masked_fill(Tape<T>&, const BasicTensor<T>&,                          \
                                      std::span<const uint8_t>, T);                             \
  template BasicTensor<T> split_heads(Tape<T>&, const BasicTensor<T>&, int64_t);                \
  template BasicTensor<T> merge_heads(Tape<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> rope(Tape<T>&, const BasicTensor<T>&, std::span<const int64_t>,       \
                               double);                                                         \
  template BasicTensor<T> select_rows(Tape<T>&, const BasicTensor<T>&,                          \
                                      std::span<const int64_t>);                                \
  template BasicTensor<T> sum(Tape<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> reshape(Tape<T>&, const BasicTensor<T>&, Shape);                      \
  template std::vector<double> row_nll(const BasicTensor<T>&, std::span<const int>);

ICOLAB_INSTANTIATE_OPS(float)
ICOLAB_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace icolab
