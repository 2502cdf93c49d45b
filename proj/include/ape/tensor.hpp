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
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ape {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::string shape_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into self.parents[*]->grad.
  std::function<void(Node&)> backward;
};

}  // namespace detail

// Dense row-major tensor with reverse-mode autodiff. Copies are shallow:
// two Tensor handles may refer to the same storage, which is how parameter
// tying is expressed.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access, used by optimizers and checkpoint loading.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  // Populates grad of every reachable tensor that requires grad. Leaf
  // gradients accumulate across calls; intermediate ones are recomputed.
  void backward() const;

  bool shares_storage(const Tensor& other) const { return node_ == other.node_; }
  // Deep copy without graph history.
  Tensor clone(bool requires_grad = false) const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Key layout for fused attention over a batch of padded sequences.
// Query rows are [batch * query_len], key/value rows [batch * key_len].
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::size_t heads = 1;
  // batch * key_len entries, nonzero marks a padded key.
  std::vector<std::uint8_t> key_padding;
  // Query i sits at absolute position i + (key_len - query_len) and sees
  // keys at positions <= its own.
  bool causal = false;
};

using Rng = std::mt19937_64;

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
// a[m x n] + bias[n] broadcast over rows.
template <typename T> Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> dropout(const Tensor<T>& x, T p, bool training, Rng& rng);
// Rows of `table` selected by `ids`: [ids.size() x table.dim(1)].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids);

// Mean over non-pad rows of the cross-entropy between softmax(logits) and a
// target distribution with 1-epsilon on the gold id and epsilon/(V-1) on
// every other id.
template <typename T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, std::span<const TokenId> targets,
                                       T epsilon, TokenId pad_id);

// Scaled dot-product attention over `layout.heads` heads, masked keys
// excluded before the softmax. Dropout is applied to attention weights.
template <typename T>
Tensor<T> attention(const Tensor<T>& queries, const Tensor<T>& keys, const Tensor<T>& values,
                    const AttentionLayout& layout, T dropout_p, bool training, Rng& rng);

// Numerically stable log-softmax of one row, no graph.
template <typename T> std::vector<double> log_softmax_row(std::span<const T> row);

}  // namespace ape
