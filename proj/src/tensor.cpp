/* Copyright 2026 The apebert Authors. All Rights Reserved.

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
#include "ape/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "ape/errors.hpp"

namespace ape {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
std::vector<T>& grad_of(detail::Node<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node.grad;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<NodePtr<T>> parents,
                      std::function<void(detail::Node<T>&)> backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (g_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const NodePtr<T>& p) { return p->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

void require_rank2(const Shape& shape, const char* op) {
  if (shape.size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(shape));
  }
}

// C[m x n] += A[m x k] * B[k x n]. Every C(i, j) is accumulated over p in
// ascending order whatever m is, so a row's result never depends on the
// other rows in the call.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (product(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return grad_of(*node_);
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->data, requires_grad);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node<T>* node : order) {
    if (node->backward) node->grad.clear();
  }
  grad_of(*node_)[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>({m, n}, std::move(out), {a.node(), b.node()},
                        [m, k, n](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto bt = transposed(pb.data.data(), k, n);
                            gemm_acc(self.grad.data(), bt.data(), grad_of(pa).data(), m, n, k);
                          }
                          if (pb.requires_grad) {
                            auto at = transposed(pa.data.data(), m, k);
                            gemm_acc(at.data(), self.grad.data(), grad_of(pb).data(), k, m, n);
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a.shape(), "transpose");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  return make_result<T>({cols, rows}, transposed(a.data().data(), rows, cols), {a.node()},
                        [rows, cols](detail::Node<T>& self) {
                          auto back = transposed(self.grad.data(), cols, rows);
                          auto& g = grad_of(*self.parents[0]);
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += back[i];
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                        [](detail::Node<T>& self) {
                          for (auto& parent : self.parents) {
                            if (!parent->requires_grad) continue;
                            auto& g = grad_of(*parent);
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  require_rank2(a.shape(), "add_bias");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(a.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return make_result<T>(a.shape(), std::move(out), {a.node(), bias.node()},
                        [m, n](detail::Node<T>& self) {
                          if (self.parents[0]->requires_grad) {
                            auto& g = grad_of(*self.parents[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (self.parents[1]->requires_grad) {
                            auto& g = grad_of(*self.parents[1]);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                        [](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& g = grad_of(pa);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * pb.data[i];
                          }
                          if (pb.requires_grad) {
                            auto& g = grad_of(pb);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * pa.data[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a.node()}, [factor](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return make_result<T>(Shape{}, {total}, {a.node()}, [](detail::Node<T>& self) {
    auto& g = grad_of(*self.parents[0]);
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];

  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * len * inner + r;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>(shape, std::move(out), {x.node()},
                        [outer, inner, len](detail::Node<T>& self) {
                          auto& g = grad_of(*self.parents[0]);
                          const auto& y = self.data;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t r = 0; r < inner; ++r) {
                              const std::size_t base = o * len * inner + r;
                              T dot = 0;
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t at = base + j * inner;
                                dot += y[at] * self.grad[at];
                              }
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t at = base + j * inner;
                                g[at] += y[at] * (self.grad[at] - dot);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match input " +
                         shape_string(x.shape()));
  }
  const std::size_t m = x.numel() / n;
  std::vector<T> out(x.numel()), normed(x.numel()), rstd(m);
  const auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = in.data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normed[i * n + j] = (row[j] - mean) * rstd[i];
      out[i * n + j] = normed[i * n + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [m, n, normed = std::move(normed), rstd = std::move(rstd)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) {
          auto& g = grad_of(pg);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * normed[i * n + j];
        }
        if (pb.requires_grad) {
          auto& g = grad_of(pb);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
        if (px.requires_grad) {
          auto& g = grad_of(px);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = 0, mean_dn = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[i * n + j] * pg.data[j];
              mean_d += d;
              mean_dn += d * normed[i * n + j];
            }
            mean_d /= static_cast<T>(n);
            mean_dn /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[i * n + j] * pg.data[j];
              g[i * n + j] += rstd[i] * (d - mean_d - normed[i * n + j] * mean_dn);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = in[i] * T(0.5) * (T(1) + std::erf(in[i] * kInvSqrt2));
  }
  return make_result<T>(x.shape(), std::move(out), {x.node()}, [](detail::Node<T>& self) {
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    auto& px = *self.parents[0];
    auto& g = grad_of(px);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = px.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, bool training, Rng& rng) {
  if (!(p >= T(0) && p < T(1))) {
    throw ParameterError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == T(0)) return x;
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> mask(x.numel()), out(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = uniform01(rng) < static_cast<double>(p) ? T(0) : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x.node()},
                        [mask = std::move(mask)](detail::Node<T>& self) {
                          auto& g = grad_of(*self.parents[0]);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += self.grad[i] * mask[i];
                        });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids) {
  require_rank2(table.shape(), "embedding");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<T> out(ids.size() * width);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= rows) {
      throw LengthError("embedding: index " + std::to_string(ids[r]) + " outside table of " +
                        std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().data() + ids[r] * width, width, out.data() + r * width);
  }
  std::vector<TokenId> kept(ids.begin(), ids.end());
  return make_result<T>({ids.size(), width}, std::move(out), {table.node()},
                        [width, kept = std::move(kept)](detail::Node<T>& self) {
                          auto& g = grad_of(*self.parents[0]);
                          for (std::size_t r = 0; r < kept.size(); ++r) {
                            T* dst = g.data() + kept[r] * width;
                            const T* src = self.grad.data() + r * width;
                            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, std::span<const TokenId> targets,
                                       T epsilon, TokenId pad_id) {
  require_rank2(logits.shape(), "cross_entropy");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(logits.shape()) + " logits");
  }
  if (!(epsilon >= T(0) && epsilon < T(1))) {
    throw ParameterError("cross_entropy: epsilon must be in [0, 1)");
  }
  if (vocab < 2) throw DimensionError("cross_entropy: vocabulary must have at least 2 entries");
  std::size_t count = 0;
  for (TokenId t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ParameterError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    }
    if (t != pad_id) ++count;
  }
  if (count == 0) throw ParameterError("cross_entropy: every target is padding (empty loss)");

  const double on = 1.0 - static_cast<double>(epsilon);
  const double off = static_cast<double>(epsilon) / static_cast<double>(vocab - 1);
  std::vector<T> probs(n * vocab, T(0));
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == pad_id) continue;
    const auto row = logits.data().subspan(i * vocab, vocab);
    const auto logp = log_softmax_row(row);
    double row_loss = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const double q = static_cast<TokenId>(v) == targets[i] ? on : off;
      row_loss -= q * logp[v];
      probs[i * vocab + v] = static_cast<T>(std::exp(logp[v]));
    }
    total += row_loss;
  }
  const T loss = static_cast<T>(total / static_cast<double>(count));
  std::vector<TokenId> kept(targets.begin(), targets.end());
  return make_result<T>(
      Shape{}, {loss}, {logits.node()},
      [n, vocab, count, on, off, pad_id, kept = std::move(kept),
       probs = std::move(probs)](detail::Node<T>& self) {
        auto& g = grad_of(*self.parents[0]);
        const T upstream = self.grad[0] / static_cast<T>(count);
        for (std::size_t i = 0; i < n; ++i) {
          if (kept[i] == pad_id) continue;
          for (std::size_t v = 0; v < vocab; ++v) {
            const T q = static_cast<T>(static_cast<TokenId>(v) == kept[i] ? on : off);
            g[i * vocab + v] += upstream * (probs[i * vocab + v] - q);
          }
        }
      });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& queries, const Tensor<T>& keys, const Tensor<T>& values,
                    const AttentionLayout& layout, T dropout_p, bool training, Rng& rng) {
  require_rank2(queries.shape(), "attention");
  require_rank2(keys.shape(), "attention");
  require_rank2(values.shape(), "attention");
  const std::size_t batch = layout.batch, tq = layout.query_len, tk = layout.key_len;
  const std::size_t hidden = queries.dim(1), heads = layout.heads;
  if (heads == 0 || hidden % heads != 0) {
    throw ConfigError("attention: hidden size " + std::to_string(hidden) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (queries.dim(0) != batch * tq || keys.dim(0) != batch * tk || values.shape() != keys.shape() ||
      keys.dim(1) != hidden) {
    throw DimensionError("attention: queries " + shape_string(queries.shape()) + ", keys " +
                         shape_string(keys.shape()) + ", values " +
                         shape_string(values.shape()) + " inconsistent with layout");
  }
  if (!layout.key_padding.empty() && layout.key_padding.size() != batch * tk) {
    throw DimensionError("attention: key padding mask has wrong size");
  }
  if (!(dropout_p >= T(0) && dropout_p < T(1))) {
    throw ParameterError("attention: dropout probability must be in [0, 1)");
  }
  if (layout.causal && tq > tk) throw DimensionError("attention: causal with more queries than keys");

  const std::size_t head_dim = hidden / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(head_dim));
  const bool drop = training && dropout_p > T(0);
  const T keep_scale = T(1) / (T(1) - dropout_p);
  const std::size_t offset = tk - std::min(tk, tq);
  const auto q = queries.data();
  const auto k = keys.data();
  const auto v = values.data();

  // allowed(b, i, j)
  auto allowed = [&layout, tk, offset](std::size_t b, std::size_t i, std::size_t j) {
    if (!layout.key_padding.empty() && layout.key_padding[b * tk + j]) return false;
    if (layout.causal && j > i + offset) return false;
    return true;
  };

  std::vector<T> out(batch * tq * hidden, T(0));
  std::vector<T> probs(batch * heads * tq * tk, T(0));
  std::vector<T> dropped;
  if (drop) dropped.assign(probs.size(), T(0));
  std::vector<T> scores(tk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq; ++i) {
        const T* qrow = q.data() + (b * tq + i) * hidden + h * head_dim;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < tk; ++j) {
          if (!allowed(b, i, j)) continue;
          const T* krow = k.data() + (b * tk + j) * hidden + h * head_dim;
          T dot = 0;
          for (std::size_t d = 0; d < head_dim; ++d) dot += qrow[d] * krow[d];
          scores[j] = dot * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        T* prow = probs.data() + ((b * heads + h) * tq + i) * tk;
        T total = 0;
        for (std::size_t j = 0; j < tk; ++j) {
          if (!allowed(b, i, j)) continue;
          prow[j] = std::exp(scores[j] - mx);
          total += prow[j];
        }
        if (total == T(0)) continue;  // no visible key: output stays zero
        T* orow = out.data() + (b * tq + i) * hidden + h * head_dim;
        for (std::size_t j = 0; j < tk; ++j) {
          if (!allowed(b, i, j)) continue;
          prow[j] /= total;
          T weight = prow[j];
          if (drop) {
            weight = uniform01(rng) < static_cast<double>(dropout_p) ? T(0) : weight * keep_scale;
            dropped[prow - probs.data() + j] = weight;
          }
          const T* vrow = v.data() + (b * tk + j) * hidden + h * head_dim;
          for (std::size_t d = 0; d < head_dim; ++d) orow[d] += weight * vrow[d];
        }
      }
    }
  }

  return make_result<T>(
      {batch * tq, hidden}, std::move(out), {queries.node(), keys.node(), values.node()},
      [batch, tq, tk, heads, hidden, head_dim, scale_factor, keep_scale,
       probs = std::move(probs), dropped = std::move(dropped)](detail::Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        std::vector<T> scratch;
        std::vector<T>* gq = pq.requires_grad ? &grad_of(pq) : &scratch;
        std::vector<T> scratch_k, scratch_v;
        std::vector<T>* gk = pk.requires_grad ? &grad_of(pk) : &scratch_k;
        std::vector<T>* gv = pv.requires_grad ? &grad_of(pv) : &scratch_v;
        if (!pq.requires_grad) scratch.assign(pq.data.size(), T(0));
        if (!pk.requires_grad) scratch_k.assign(pk.data.size(), T(0));
        if (!pv.requires_grad) scratch_v.assign(pv.data.size(), T(0));
        std::vector<T> dprob(tk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < tq; ++i) {
              const std::size_t prow_at = ((b * heads + h) * tq + i) * tk;
              const T* prow = probs.data() + prow_at;
              const T* gout = self.grad.data() + (b * tq + i) * hidden + h * head_dim;
              T weighted = 0;
              for (std::size_t j = 0; j < tk; ++j) {
                if (prow[j] == T(0)) {
                  dprob[j] = 0;
                  continue;
                }
                const T weight = dropped.empty() ? prow[j] : dropped[prow_at + j];
                const std::size_t vat = (b * tk + j) * hidden + h * head_dim;
                T dw = 0;
                for (std::size_t d = 0; d < head_dim; ++d) {
                  dw += gout[d] * pv.data[vat + d];
                  (*gv)[vat + d] += weight * gout[d];
                }
                if (!dropped.empty()) dw *= dropped[prow_at + j] == T(0) ? T(0) : keep_scale;
                dprob[j] = dw;
                weighted += prow[j] * dw;
              }
              const std::size_t qat = (b * tq + i) * hidden + h * head_dim;
              for (std::size_t j = 0; j < tk; ++j) {
                if (prow[j] == T(0)) continue;
                const T ds = prow[j] * (dprob[j] - weighted) * scale_factor;
                const std::size_t kat = (b * tk + j) * hidden + h * head_dim;
                for (std::size_t d = 0; d < head_dim; ++d) {
                  (*gq)[qat + d] += ds * pk.data[kat + d];
                  (*gk)[kat + d] += ds * pq.data[qat + d];
                }
              }
            }
          }
        }
      });
}

template <typename T>
std::vector<double> log_softmax_row(std::span<const T> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : row) mx = std::max(mx, static_cast<double>(v));
  double total = 0;
  for (T v : row) total += std::exp(static_cast<double>(v) - mx);
  const double log_total = std::log(total) + mx;
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - log_total;
  return out;
}

#define APE_INSTANTIATE(T)                                                                     \
  template class Tensor<T>;                                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> dropout(const Tensor<T>&, T, bool, Rng&);                                 \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const TokenId>);                    \
  template Tensor<T> cross_entropy_label_smoothed(const Tensor<T>&, std::span<const TokenId>,  \
                                                  T, TokenId);                                 \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                               const AttentionLayout&, T, bool, Rng&);                         \
  template std::vector<double> log_softmax_row(std::span<const T>);

APE_INSTANTIATE(float)
APE_INSTANTIATE(double)

#undef APE_INSTANTIATE

}  // namespace ape
