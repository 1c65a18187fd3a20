#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "longenc/tensor.hpp"

namespace longenc {

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reverse-mode tape over a closed op set. One tape per forward pass; leaves
// registered before the forward ops consume them. backward() walks the ops in
// reverse and drops intermediate values/grads as soon as they are consumed, so
// peak memory during backward stays close to the forward peak.
template <typename T>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, /*keep=*/requires_grad, nullptr);
  }
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(Var v) const { return node(v.id).value; }
  std::size_t num_nodes() const { return nodes_.size(); }

  // Gradient of the last backward() loss w.r.t. a leaf.
  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v.id);
    if (!n.keep) throw std::logic_error("grad(): only leaf grads are retained");
    return n.grad;
  }

  void backward(Var loss);

  // --- op builders -------------------------------------------------------

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T c);
  Var relu(Var a);
  Var rms_norm(Var x, Var scale, T eps = T(1e-6));
  // Probability rows; fully-masked rows come out all-zero and are counted in
  // *dead_rows. Callers own the dead-row policy (see attention/model).
  Var softmax_masked(Var logits, std::shared_ptr<const std::vector<std::uint8_t>> mask,
                     std::size_t* dead_rows = nullptr);
  // Embedding lookup. ids[i] == -1 yields a zero row and receives no gradient.
  Var gather_rows(Var table, std::shared_ptr<const std::vector<std::int64_t>> ids);
  // Relative-bias add: out[h,i,j] = x[h,i,j] + table[h, bucket[i*m+j]] with the
  // bucket map shared across heads. Gradient scatter-adds into the table rows.
  Var add_rel_bias(Var x, Var table, std::shared_ptr<const std::vector<std::int32_t>> bucket);
  // Mean NLL over non-pad targets. Throws NumericError if every target is pad.
  Var cross_entropy(Var logits, std::shared_ptr<const std::vector<std::int32_t>> targets,
                    std::int32_t pad_id);
  Var split_heads(Var x, std::size_t num_heads);  // [n, h*hd] -> [h, n, hd]
  Var merge_heads(Var x);                         // [h, n, hd] -> [n, h*hd]
  Var block_sum(Var x, std::size_t block);        // [n, d] -> [ceil(n/block), d]
  Var sum_all(Var x);                             // -> scalar [1]
  template <typename Rng>
  Var dropout(Var x, T rate, Rng& rng);

  // Fused sparse attention lives in attention.cpp; it needs raw node access.
  Var push(Tensor<T> value, bool requires_grad, bool keep, std::function<void()> backward_fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.keep = keep;
    n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Accumulate g into v's grad buffer (allocating on first touch).
  void accumulate(Var v, const Tensor<T>& g) {
    Node& n = node(v.id);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(n.value.shape());
    if (!n.grad.same_shape(g)) throw ShapeError("accumulate: grad shape mismatch");
    T* dst = n.grad.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  // Grad buffer for in-place accumulation by fused ops.
  Tensor<T>* grad_buffer(Var v) {
    Node& n = node(v.id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(n.value.shape());
    return &n.grad;
  }

  bool requires_grad(Var v) const { return node(v.id).requires_grad; }

  const Tensor<T>& out_grad(Var v) const {
    const Node& n = node(v.id);
    if (n.grad.size() == 0)
      throw std::logic_error("out_grad: no gradient present for node");
    return n.grad;
  }
  bool has_out_grad(Var v) const { return node(v.id).grad.size() != 0; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward_fn;
    bool requires_grad = false;
    bool keep = false;
  };

  Node& node(int id) {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::logic_error("tape: bad node id");
    return nodes_[static_cast<std::size_t>(id)];
  }
  const Node& node(int id) const { return const_cast<Tape*>(this)->node(id); }

  std::vector<Node> nodes_;
};

template <typename T>
template <typename Rng>
typename Tape<T>::Var Tape<T>::dropout(Var x, T rate, Rng& rng) {
  if (rate <= T(0)) return x;
  if (rate >= T(1)) throw std::invalid_argument("dropout: rate must be < 1");
  const Tensor<T>& xin = value(x);
  auto keep_mask = std::make_shared<std::vector<std::uint8_t>>(xin.size());
  std::bernoulli_distribution dist(1.0 - static_cast<double>(rate));
  for (auto& m : *keep_mask) m = dist(rng) ? 1 : 0;
  const T inv_keep = T(1) / (T(1) - rate);
  Tensor<T> out(xin.shape());
  for (std::size_t i = 0; i < xin.size(); ++i)
    out[i] = (*keep_mask)[i] ? xin[i] * inv_keep : T(0);
  Tape* tp = this;
  Var out_v;
  out_v = push(std::move(out), requires_grad(x), false, nullptr);
  node(out_v.id).backward_fn = [tp, x, out_v, keep_mask, inv_keep]() {
    const Tensor<T>& go = tp->out_grad(out_v);
    Tensor<T> gx(go.shape());
    for (std::size_t i = 0; i < go.size(); ++i)
      gx[i] = (*keep_mask)[i] ? go[i] * inv_keep : T(0);
    tp->accumulate(x, gx);
  };
  return out_v;
}

extern template class Tape<double>;
extern template class Tape<float>;

}  // namespace longenc
