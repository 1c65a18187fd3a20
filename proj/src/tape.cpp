#include "longenc/tape.hpp"

#include <cmath>

namespace longenc {

template <typename T>
void Tape<T>::backward(Var loss) {
  Node& ln = node(loss.id);
  if (ln.value.size() != 1) throw ShapeError("backward: loss must be scalar");
  if (!std::isfinite(static_cast<double>(ln.value[0])))
    throw NumericError("backward: non-finite loss");
  ln.grad = Tensor<T>::full(ln.value.shape(), T(1));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward_fn && n.grad.size() != 0) n.backward_fn();
    if (!n.keep) {
      n.value.release();
      n.grad.release();
    }
    n.backward_fn = nullptr;
  }
  // Leaves off the loss path still report (zero) gradients.
  for (Node& n : nodes_)
    if (n.keep && n.requires_grad && n.grad.size() == 0)
      n.grad = Tensor<T>::zeros(n.value.shape());
}

template <typename T>
typename Tape<T>::Var Tape<T>::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  Tensor<T> c = kernels::matmul(value(a), value(b), trans_a, trans_b);
  Var out = push(std::move(c), requires_grad(a) || requires_grad(b), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, a, b, trans_a, trans_b, out]() {
    const Tensor<T>& gc = tp->out_grad(out);
    if (tp->requires_grad(a)) {
      // dA for the four transpose cases.
      Tensor<T> ga = trans_a ? (trans_b ? kernels::matmul(tp->value(b), gc, true, true)
                                        : kernels::matmul(tp->value(b), gc, false, true))
                             : (trans_b ? kernels::matmul(gc, tp->value(b), false, false)
                                        : kernels::matmul(gc, tp->value(b), false, true));
      tp->accumulate(a, ga);
    }
    if (tp->requires_grad(b)) {
      Tensor<T> gb = trans_b ? (trans_a ? kernels::matmul(gc, tp->value(a), true, true)
                                        : kernels::matmul(gc, tp->value(a), true, false))
                             : (trans_a ? kernels::matmul(tp->value(a), gc, false, false)
                                        : kernels::matmul(tp->value(a), gc, true, false));
      tp->accumulate(b, gb);
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
  const Tensor<T>& va = value(a);
  const Tensor<T>& vb = value(b);
  if (!va.same_shape(vb)) throw ShapeError("add: shape mismatch");
  Tensor<T> c(va.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = va[i] + vb[i];
  Var out = push(std::move(c), requires_grad(a) || requires_grad(b), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, a, b, out]() {
    const Tensor<T>& gc = tp->out_grad(out);
    tp->accumulate(a, gc);
    tp->accumulate(b, gc);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::mul(Var a, Var b) {
  const Tensor<T>& va = value(a);
  const Tensor<T>& vb = value(b);
  if (!va.same_shape(vb)) throw ShapeError("mul: shape mismatch");
  Tensor<T> c(va.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = va[i] * vb[i];
  Var out = push(std::move(c), requires_grad(a) || requires_grad(b), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, a, b, out]() {
    const Tensor<T>& gc = tp->out_grad(out);
    if (tp->requires_grad(a)) {
      Tensor<T> ga(gc.shape());
      const Tensor<T>& vb2 = tp->value(b);
      for (std::size_t i = 0; i < gc.size(); ++i) ga[i] = gc[i] * vb2[i];
      tp->accumulate(a, ga);
    }
    if (tp->requires_grad(b)) {
      Tensor<T> gb(gc.shape());
      const Tensor<T>& va2 = tp->value(a);
      for (std::size_t i = 0; i < gc.size(); ++i) gb[i] = gc[i] * va2[i];
      tp->accumulate(b, gb);
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::scale(Var a, T c) {
  const Tensor<T>& va = value(a);
  Tensor<T> o(va.shape());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = va[i] * c;
  Var out = push(std::move(o), requires_grad(a), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, a, c, out]() {
    const Tensor<T>& gc = tp->out_grad(out);
    Tensor<T> ga(gc.shape());
    for (std::size_t i = 0; i < gc.size(); ++i) ga[i] = gc[i] * c;
    tp->accumulate(a, ga);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::relu(Var a) {
  const Tensor<T>& va = value(a);
  Tensor<T> o(va.shape());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = va[i] > T(0) ? va[i] : T(0);
  Var out = push(std::move(o), requires_grad(a), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, a, out]() {
    const Tensor<T>& gc = tp->out_grad(out);
    const Tensor<T>& va2 = tp->value(a);
    Tensor<T> ga(gc.shape());
    for (std::size_t i = 0; i < gc.size(); ++i) ga[i] = va2[i] > T(0) ? gc[i] : T(0);
    tp->accumulate(a, ga);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::rms_norm(Var x, Var sc, T eps) {
  const Tensor<T>& vx = value(x);
  const Tensor<T>& vs = value(sc);
  Tensor<T> o = kernels::rms_norm(vx, vs, eps);
  Var out = push(std::move(o), requires_grad(x) || requires_grad(sc), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, x, sc, eps, out]() {
    const Tensor<T>& go = tp->out_grad(out);
    const Tensor<T>& vx2 = tp->value(x);
    const Tensor<T>& vs2 = tp->value(sc);
    const std::size_t d = vx2.cols();
    const std::size_t rows = vx2.rows();
    Tensor<T> gx;
    if (tp->requires_grad(x)) gx = Tensor<T>::zeros(vx2.shape());
    Tensor<T> gs;
    if (tp->requires_grad(sc)) gs = Tensor<T>::zeros(vs2.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = vx2.data() + r * d;
      const T* gr = go.data() + r * d;
      T ms = T(0);
      for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
      ms /= static_cast<T>(d);
      const T inv = T(1) / std::sqrt(ms + eps);
      if (gs.size()) {
        T* gsd = gs.data();
        for (std::size_t j = 0; j < d; ++j) gsd[j] += gr[j] * xr[j] * inv;
      }
      if (gx.size()) {
        T dot = T(0);  // sum_j g_j s_j x_j
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * vs2[j] * xr[j];
        const T c = dot * inv * inv * inv / static_cast<T>(d);
        T* gxr = gx.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) gxr[j] = vs2[j] * inv * gr[j] - xr[j] * c;
      }
    }
    if (gx.size()) tp->accumulate(x, gx);
    if (gs.size()) tp->accumulate(sc, gs);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::softmax_masked(Var logits,
                                              std::shared_ptr<const std::vector<std::uint8_t>> mask,
                                              std::size_t* dead_rows) {
  Tensor<T> p = kernels::softmax_masked(value(logits), *mask, dead_rows);
  Var out = push(std::move(p), requires_grad(logits), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, logits, out]() {
    const Tensor<T>& go = tp->out_grad(out);
    const Tensor<T>& p2 = tp->value(out);
    const std::size_t n = p2.cols();
    const std::size_t rows = p2.rows();
    Tensor<T> gz(p2.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* pr = p2.data() + r * n;
      const T* gr = go.data() + r * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += pr[j] * gr[j];
      T* gzr = gz.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) gzr[j] = pr[j] * (gr[j] - dot);
    }
    tp->accumulate(logits, gz);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::gather_rows(Var table,
                                           std::shared_ptr<const std::vector<std::int64_t>> ids) {
  const Tensor<T>& tb = value(table);
  if (tb.ndim() != 2) throw ShapeError("gather_rows: table must be 2-d");
  const std::size_t d = tb.cols();
  const std::size_t n = ids->size();
  Tensor<T> o({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t id = (*ids)[i];
    if (id < 0) continue;  // zero row
    if (id >= static_cast<std::int64_t>(tb.dim(0)))
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " out of range");
    const T* src = tb.data() + static_cast<std::size_t>(id) * d;
    T* dst = o.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  Var out = push(std::move(o), requires_grad(table), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, table, ids, out]() {
    if (!tp->requires_grad(table)) return;
    const Tensor<T>& go = tp->out_grad(out);
    Tensor<T>* gt = tp->grad_buffer(table);
    const std::size_t d2 = gt->cols();
    for (std::size_t i = 0; i < ids->size(); ++i) {
      const std::int64_t id = (*ids)[i];
      if (id < 0) continue;
      T* dst = gt->data() + static_cast<std::size_t>(id) * d2;
      const T* src = go.data() + i * d2;
      for (std::size_t j = 0; j < d2; ++j) dst[j] += src[j];
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::add_rel_bias(
    Var x, Var table, std::shared_ptr<const std::vector<std::int32_t>> bucket) {
  const Tensor<T>& vx = value(x);
  const Tensor<T>& tb = value(table);
  if (tb.ndim() != 2) throw ShapeError("add_rel_bias: table must be [heads, buckets]");
  const std::size_t heads = tb.dim(0), nbuckets = tb.dim(1);
  if (vx.ndim() != 3 || vx.dim(0) != heads)
    throw ShapeError("add_rel_bias: x must be [heads, n, m]");
  const std::size_t nm = vx.dim(1) * vx.dim(2);
  if (bucket->size() != nm) throw ShapeError("add_rel_bias: bucket map size mismatch");
  for (std::int32_t b : *bucket)
    if (b < 0 || b >= static_cast<std::int32_t>(nbuckets))
      throw std::out_of_range("add_rel_bias: bucket out of range");
  Tensor<T> o(vx.shape());
  for (std::size_t h = 0; h < heads; ++h) {
    const T* trow = tb.data() + h * nbuckets;
    const T* xrow = vx.data() + h * nm;
    T* orow = o.data() + h * nm;
    for (std::size_t i = 0; i < nm; ++i) orow[i] = xrow[i] + trow[(*bucket)[i]];
  }
  Var out = push(std::move(o), requires_grad(x) || requires_grad(table), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, x, table, bucket, heads, nbuckets, nm, out]() {
    const Tensor<T>& go = tp->out_grad(out);
    tp->accumulate(x, go);
    if (tp->requires_grad(table)) {
      Tensor<T>* gt = tp->grad_buffer(table);
      for (std::size_t h = 0; h < heads; ++h) {
        T* trow = gt->data() + h * nbuckets;
        const T* grow = go.data() + h * nm;
        for (std::size_t i = 0; i < nm; ++i) trow[(*bucket)[i]] += grow[i];
      }
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::cross_entropy(
    Var logits, std::shared_ptr<const std::vector<std::int32_t>> targets, std::int32_t pad_id) {
  const Tensor<T>& z = value(logits);
  if (z.ndim() != 2) throw ShapeError("cross_entropy: logits must be [len, vocab]");
  const std::size_t len = z.dim(0), vocab = z.dim(1);
  if (targets->size() != len) throw ShapeError("cross_entropy: target length mismatch");
  std::size_t live = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    const std::int32_t t = (*targets)[i];
    if (t == pad_id) continue;
    if (t < 0 || t >= static_cast<std::int32_t>(vocab))
      throw std::out_of_range("cross_entropy: target id out of range");
    const T* row = z.data() + i * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    loss += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row[t]);
    ++live;
  }
  if (live == 0) throw NumericError("cross_entropy: all positions are pad, mean undefined");
  loss /= static_cast<double>(live);
  Var out = push(Tensor<T>::scalar(static_cast<T>(loss)), requires_grad(logits), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, logits, targets, pad_id, live, out]() {
    const T g0 = tp->out_grad(out)[0];
    const Tensor<T>& z2 = tp->value(logits);
    const std::size_t len2 = z2.dim(0), vocab2 = z2.dim(1);
    Tensor<T> gz({len2, vocab2});
    const T w = g0 / static_cast<T>(live);
    for (std::size_t i = 0; i < len2; ++i) {
      const std::int32_t t = (*targets)[i];
      if (t == pad_id) continue;
      const T* row = z2.data() + i * vocab2;
      T* grow = gz.data() + i * vocab2;
      T mx = row[0];
      for (std::size_t j = 1; j < vocab2; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (std::size_t j = 0; j < vocab2; ++j) sum += std::exp(row[j] - mx);
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < vocab2; ++j) grow[j] = std::exp(row[j] - mx) * inv * w;
      grow[t] -= w;
    }
    tp->accumulate(logits, gz);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::split_heads(Var x, std::size_t num_heads) {
  const Tensor<T>& vx = value(x);
  if (vx.ndim() != 2 || vx.cols() % num_heads != 0)
    throw ShapeError("split_heads: need [n, h*hd] with h | cols");
  const std::size_t n = vx.dim(0), hd = vx.cols() / num_heads;
  Tensor<T> o({num_heads, n, hd});
  for (std::size_t h = 0; h < num_heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = vx.data() + i * vx.cols() + h * hd;
      T* dst = o.data() + (h * n + i) * hd;
      for (std::size_t j = 0; j < hd; ++j) dst[j] = src[j];
    }
  Var out = push(std::move(o), requires_grad(x), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, x, num_heads, n, hd, out]() {
    const Tensor<T>& go = tp->out_grad(out);
    Tensor<T> gx({n, num_heads * hd});
    for (std::size_t h = 0; h < num_heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = go.data() + (h * n + i) * hd;
        T* dst = gx.data() + i * num_heads * hd + h * hd;
        for (std::size_t j = 0; j < hd; ++j) dst[j] = src[j];
      }
    tp->accumulate(x, gx);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::merge_heads(Var x) {
  const Tensor<T>& vx = value(x);
  if (vx.ndim() != 3) throw ShapeError("merge_heads: need [h, n, hd]");
  const std::size_t h = vx.dim(0), n = vx.dim(1), hd = vx.dim(2);
  Tensor<T> o({n, h * hd});
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = vx.data() + (hh * n + i) * hd;
      T* dst = o.data() + i * h * hd + hh * hd;
      for (std::size_t j = 0; j < hd; ++j) dst[j] = src[j];
    }
  Var out = push(std::move(o), requires_grad(x), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, x, h, n, hd, out]() {
    const Tensor<T>& go = tp->out_grad(out);
    Tensor<T> gx({h, n, hd});
    for (std::size_t hh = 0; hh < h; ++hh)
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = go.data() + i * h * hd + hh * hd;
        T* dst = gx.data() + (hh * n + i) * hd;
        for (std::size_t j = 0; j < hd; ++j) dst[j] = src[j];
      }
    tp->accumulate(x, gx);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::block_sum(Var x, std::size_t block) {
  const Tensor<T>& vx = value(x);
  if (vx.ndim() != 2 || block == 0) throw ShapeError("block_sum: need [n, d], block >= 1");
  const std::size_t n = vx.dim(0), d = vx.dim(1);
  const std::size_t g = (n + block - 1) / block;
  Tensor<T> o = Tensor<T>::zeros({g, d});
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = vx.data() + i * d;
    T* dst = o.data() + (i / block) * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  Var out = push(std::move(o), requires_grad(x), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, x, block, n, d, out]() {
    const Tensor<T>& go = tp->out_grad(out);
    Tensor<T> gx({n, d});
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = go.data() + (i / block) * d;
      T* dst = gx.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
    }
    tp->accumulate(x, gx);
  };
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::sum_all(Var x) {
  const Tensor<T>& vx = value(x);
  T s = T(0);
  for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i];
  Var out = push(Tensor<T>::scalar(s), requires_grad(x), false, nullptr);
  Tape* tp = this;
  node(out.id).backward_fn = [tp, x, out]() {
    const T g0 = tp->out_grad(out)[0];
    Tensor<T> gx(tp->value(x).shape(), g0);
    tp->accumulate(x, gx);
  };
  return out;
}

template class Tape<double>;
template class Tape<float>;

}  // namespace longenc
