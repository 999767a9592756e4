#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "gemm.hpp"
#include "nvs/tensor.hpp"

namespace nvs::ops {
namespace {

using detail::gemm;

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Output shape plus per-operand strides aligned to the output axes; a
// broadcast axis gets stride 0.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast plan;
  plan.out.resize(rank);
  plan.stride_a.assign(rank, 0);
  plan.stride_b.assign(rank, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t off_a = rank - a.size();
    const std::size_t off_b = rank - b.size();
    const std::size_t da = i < off_a ? 1 : a[i - off_a];
    const std::size_t db = i < off_b ? 1 : b[i - off_b];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    plan.out[i] = da == 1 ? db : da;
    if (i >= off_a && da != 1) plan.stride_a[i] = sa[i - off_a];
    if (i >= off_b && db != 1) plan.stride_b[i] = sb[i - off_b];
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void visit(const Broadcast& plan, F&& f) {
  const std::size_t n = shape_numel(plan.out);
  if (n == 0) return;
  const std::size_t rank = plan.out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = plan.out[rank - 1];
  const std::size_t ia_step = plan.stride_a[rank - 1];
  const std::size_t ib_step = plan.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, ia + k * ia_step, ib + k * ib_step);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += plan.stride_a[ax];
      ib += plan.stride_b[ax];
      if (idx[ax] < plan.out[ax]) break;
      ia -= plan.stride_a[ax] * plan.out[ax];
      ib -= plan.stride_b[ax] * plan.out[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinaryKind kind) {
  Tape<T>* tape = a.tape();
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  auto plan = std::make_shared<Broadcast>(plan_broadcast(av.shape(), bv.shape()));
  Tensor<T> out(plan->out);
  T* o = out.data();
  const T* pa = av.data();
  const T* pb = bv.data();
  switch (kind) {
    case BinaryKind::add:
      visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] + pb[ib]; });
      break;
    case BinaryKind::sub:
      visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] - pb[ib]; });
      break;
    case BinaryKind::mul:
      visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] * pb[ib]; });
      break;
  }
  return tape->record(std::move(out), {a, b}, [tape, a, b, plan, kind](const Tensor<T>& g) {
    Tensor<T>* ga = tape->grad_sink(a);
    Tensor<T>* gb = tape->grad_sink(b);
    const T* pg = g.data();
    if (ga) {
      T* d = ga->data();
      if (kind == BinaryKind::mul) {
        const T* pb = b.value().data();
        visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ia] += pg[i] * pb[ib]; });
      } else {
        visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t) { d[ia] += pg[i]; });
      }
    }
    if (gb) {
      T* d = gb->data();
      if (kind == BinaryKind::mul) {
        const T* pa = a.value().data();
        visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ib] += pg[i] * pa[ia]; });
      } else if (kind == BinaryKind::sub) {
        visit(*plan, [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] -= pg[i]; });
      } else {
        visit(*plan, [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] += pg[i]; });
      }
    }
  });
}

// Lowers one [C,H,W] image to a [C*k*k, H*W] patch matrix (zero padded).
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, T* cols) {
  const long pad = static_cast<long>(k / 2);
  const long lh = static_cast<long>(h);
  const long lw = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * h * w;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        const long x0 = std::max(0L, -dx);
        const long x1 = std::min(lw, lw - dx);
        for (long y = 0; y < lh; ++y) {
          T* dst = row + y * lw;
          const long sy = y + dy;
          if (sy < 0 || sy >= lh) {
            std::fill(dst, dst + lw, T{0});
            continue;
          }
          const T* src = x + (c * h + static_cast<std::size_t>(sy)) * w;
          for (long xx = 0; xx < x0; ++xx) dst[xx] = T{0};
          for (long xx = x0; xx < x1; ++xx) dst[xx] = src[xx + dx];
          for (long xx = std::max(x0, x1); xx < lw; ++xx) dst[xx] = T{0};
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, T* x) {
  const long pad = static_cast<long>(k / 2);
  const long lh = static_cast<long>(h);
  const long lw = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * h * w;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        const long x0 = std::max(0L, -dx);
        const long x1 = std::min(lw, lw - dx);
        for (long y = 0; y < lh; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= lh) continue;
          const T* src = row + y * lw;
          T* dst = x + (c * h + static_cast<std::size_t>(sy)) * w;
          for (long xx = x0; xx < x1; ++xx) dst[xx + dx] += src[xx];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::add);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::sub);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::mul);
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tape<T>* tape = a.tape();
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x *= factor;
  return tape->record(std::move(out), {a}, [tape, a, factor](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
    }
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  Tape<T>* tape = a.tape();
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x += offset;
  return tape->record(std::move(out), {a}, [tape, a](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  Tape<T>* tape = a.tape();
  Tensor<T> out = a.value();
  for (auto& x : out.values()) {
    if (x < T{0}) throw NumericError("sqrt of negative value");
    x = std::sqrt(x);
  }
  return tape->record(std::move(out), {a}, [tape, a](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      const Tensor<T>& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * T{0.5} / std::sqrt(av[i]);
    }
  });
}

template <typename T>
Var<T> silu(Var<T> a) {
  Tape<T>* tape = a.tape();
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / (T{1} + std::exp(-av[i]));
  return tape->record(std::move(out), {a}, [tape, a](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      const Tensor<T>& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-av[i]));
        (*ga)[i] += g[i] * s * (T{1} + av[i] * (T{1} - s));
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Tape<T>* tape = a.tape();
  const auto& values = a.value().values();
  T total = T{0};
  for (T x : values) total += x;
  return tape->record(Tensor<T>::scalar(total), {a}, [tape, a](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      const T gv = g[0];
      for (auto& x : ga->values()) x += gv;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Var<T> d = sub(a, b);
  return mean(mul(d, d));
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>* tape = a.tape();
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: inner extent mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const int m = static_cast<int>(av.dim(0));
  const int k = static_cast<int>(av.dim(1));
  const int n = static_cast<int>(bv.dim(1));
  Tensor<T> out({av.dim(0), bv.dim(1)});
  gemm(false, false, m, n, k, T{1}, av.data(), k, bv.data(), n, T{0}, out.data(), n);
  return tape->record(std::move(out), {a, b}, [tape, a, b, m, n, k](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      gemm(false, true, m, k, n, T{1}, g.data(), n, b.value().data(), n, T{1}, ga->data(), k);
    }
    if (Tensor<T>* gb = tape->grad_sink(b)) {
      gemm(true, false, k, n, m, T{1}, a.value().data(), k, g.data(), n, T{1}, gb->data(), n);
    }
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias) {
  Tape<T>* tape = x.tape();
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = kernel.value();
  if (xv.rank() != 3 && xv.rank() != 4) throw ShapeError("conv2d: input must be [C,H,W] or [B,C,H,W], got " + shape_str(xv.shape()));
  if (kv.rank() != 4 || kv.dim(2) != kv.dim(3) || kv.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be [O,C,k,k] with odd k, got " + shape_str(kv.shape()));
  }
  const bool batched = xv.rank() == 4;
  const std::size_t batch = batched ? xv.dim(0) : 1;
  const std::size_t channels = xv.dim(batched ? 1 : 0);
  const std::size_t h = xv.dim(batched ? 2 : 1);
  const std::size_t w = xv.dim(batched ? 3 : 2);
  const std::size_t out_ch = kv.dim(0);
  const std::size_t k = kv.dim(2);
  if (kv.dim(1) != channels) {
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(xv.shape()) + " kernel " + shape_str(kv.shape()));
  }
  if (bias.valid() && (bias.value().rank() != 1 || bias.value().dim(0) != out_ch)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.value().shape()) + " for " + std::to_string(out_ch) +
                     " output channels");
  }
  const std::size_t hw = h * w;
  const std::size_t ckk = channels * k * k;
  Shape out_shape = batched ? Shape{batch, out_ch, h, w} : Shape{out_ch, h, w};
  Tensor<T> out(out_shape);
  std::vector<T> cols(k == 1 ? 0 : ckk * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = xv.data() + b * channels * hw;
    const T* src = xb;
    if (k != 1) {
      im2col(xb, channels, h, w, k, cols.data());
      src = cols.data();
    }
    T* ob = out.data() + b * out_ch * hw;
    gemm(false, false, static_cast<int>(out_ch), static_cast<int>(hw), static_cast<int>(ckk), T{1}, kv.data(),
         static_cast<int>(ckk), src, static_cast<int>(hw), T{0}, ob, static_cast<int>(hw));
    if (bias.valid()) {
      const T* bv = bias.value().data();
      for (std::size_t o = 0; o < out_ch; ++o) {
        T* row = ob + o * hw;
        for (std::size_t i = 0; i < hw; ++i) row[i] += bv[o];
      }
    }
  }
  std::vector<Var<T>> inputs{x, kernel};
  if (bias.valid()) inputs.push_back(bias);
  return tape->record(std::move(out), inputs, [=](const Tensor<T>& g) {
    Tensor<T>* gx = tape->grad_sink(x);
    Tensor<T>* gk = tape->grad_sink(kernel);
    Tensor<T>* gbias = bias.valid() ? tape->grad_sink(bias) : nullptr;
    const T* xdata = x.value().data();
    const T* kdata = kernel.value().data();
    std::vector<T> buf(k == 1 ? 0 : ckk * hw);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* gb = g.data() + b * out_ch * hw;
      if (gbias) {
        for (std::size_t o = 0; o < out_ch; ++o) {
          T acc = T{0};
          for (std::size_t i = 0; i < hw; ++i) acc += gb[o * hw + i];
          (*gbias)[o] += acc;
        }
      }
      const T* xb = xdata + b * channels * hw;
      if (gk) {
        const T* src = xb;
        if (k != 1) {
          im2col(xb, channels, h, w, k, buf.data());
          src = buf.data();
        }
        gemm(false, true, static_cast<int>(out_ch), static_cast<int>(ckk), static_cast<int>(hw), T{1}, gb,
             static_cast<int>(hw), src, static_cast<int>(hw), T{1}, gk->data(), static_cast<int>(ckk));
      }
      if (gx) {
        T* gxb = gx->data() + b * channels * hw;
        if (k == 1) {
          gemm(true, false, static_cast<int>(ckk), static_cast<int>(hw), static_cast<int>(out_ch), T{1}, kdata,
               static_cast<int>(ckk), gb, static_cast<int>(hw), T{1}, gxb, static_cast<int>(hw));
        } else {
          gemm(true, false, static_cast<int>(ckk), static_cast<int>(hw), static_cast<int>(out_ch), T{1}, kdata,
               static_cast<int>(ckk), gb, static_cast<int>(hw), T{0}, buf.data(), static_cast<int>(hw));
          col2im_add(buf.data(), channels, h, w, k, gxb);
        }
      }
    }
  });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v) {
  Tape<T>* tape = q.tape();
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  const auto mismatch = [&] {
    return ShapeError("attention: shape mismatch q " + shape_str(qv.shape()) + " k " + shape_str(kv.shape()) + " v " +
                      shape_str(vv.shape()));
  };
  if (qv.rank() != kv.rank() || qv.rank() != vv.rank() || (qv.rank() != 2 && qv.rank() != 3)) throw mismatch();
  const bool grouped = qv.rank() == 3;
  const std::size_t groups = grouped ? qv.dim(0) : 1;
  const std::size_t off = grouped ? 1 : 0;
  const std::size_t lq = qv.dim(off);
  const std::size_t d = qv.dim(off + 1);
  const std::size_t lk = kv.dim(off);
  const std::size_t dv = vv.dim(off + 1);
  if ((grouped && (kv.dim(0) != groups || vv.dim(0) != groups)) || kv.dim(off + 1) != d || vv.dim(off) != lk) {
    throw mismatch();
  }
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  auto probs = std::make_shared<std::vector<T>>(groups * lq * lk);
  Tensor<T> out(grouped ? Shape{groups, lq, dv} : Shape{lq, dv});
  const int ilq = static_cast<int>(lq);
  const int ilk = static_cast<int>(lk);
  const int id = static_cast<int>(d);
  const int idv = static_cast<int>(dv);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T* p = probs->data() + gi * lq * lk;
    gemm(false, true, ilq, ilk, id, inv_sqrt_d, qv.data() + gi * lq * d, id, kv.data() + gi * lk * d, id, T{0}, p, ilk);
    for (std::size_t i = 0; i < lq; ++i) {
      T* row = p + i * lk;
      const T mx = *std::max_element(row, row + lk);
      T z = T{0};
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < lk; ++j) row[j] /= z;
    }
    gemm(false, false, ilq, idv, ilk, T{1}, p, ilk, vv.data() + gi * lk * dv, idv, T{0}, out.data() + gi * lq * dv, idv);
  }
  return tape->record(std::move(out), {q, k, v}, [=](const Tensor<T>& g) {
    Tensor<T>* gq = tape->grad_sink(q);
    Tensor<T>* gk = tape->grad_sink(k);
    Tensor<T>* gv = tape->grad_sink(v);
    std::vector<T> dp(lq * lk);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const T* p = probs->data() + gi * lq * lk;
      const T* go = g.data() + gi * lq * dv;
      if (gv) gemm(true, false, ilk, idv, ilq, T{1}, p, ilk, go, idv, T{1}, gv->data() + gi * lk * dv, idv);
      if (!gq && !gk) continue;
      gemm(false, true, ilq, ilk, idv, T{1}, go, idv, v.value().data() + gi * lk * dv, idv, T{0}, dp.data(), ilk);
      for (std::size_t i = 0; i < lq; ++i) {
        T dot = T{0};
        for (std::size_t j = 0; j < lk; ++j) dot += dp[i * lk + j] * p[i * lk + j];
        for (std::size_t j = 0; j < lk; ++j) dp[i * lk + j] = p[i * lk + j] * (dp[i * lk + j] - dot);
      }
      if (gq) {
        gemm(false, false, ilq, id, ilk, inv_sqrt_d, dp.data(), ilk, k.value().data() + gi * lk * d, id, T{1},
             gq->data() + gi * lq * d, id);
      }
      if (gk) {
        gemm(true, false, ilk, id, ilq, inv_sqrt_d, dp.data(), ilk, q.value().data() + gi * lq * d, id, T{1},
             gk->data() + gi * lk * d, id);
      }
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tape<T>* tape = a.tape();
  Tensor<T> out = a.value().reshape(std::move(shape));
  return tape->record(std::move(out), {a}, [tape, a](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

template <typename T>
Var<T> permute(Var<T> a, const std::vector<std::size_t>& axes) {
  Tape<T>* tape = a.tape();
  const Tensor<T>& av = a.value();
  const std::size_t rank = av.rank();
  if (axes.size() != rank) throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for rank " + std::to_string(rank));
  std::vector<bool> seen(rank, false);
  for (std::size_t ax : axes) {
    if (ax >= rank || seen[ax]) throw ShapeError("permute: invalid axis list for shape " + shape_str(av.shape()));
    seen[ax] = true;
  }
  Shape out_shape(rank);
  const auto in_strides = contiguous_strides(av.shape());
  auto gather_strides = std::make_shared<std::vector<std::size_t>>(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = av.dim(axes[i]);
    (*gather_strides)[i] = in_strides[axes[i]];
  }
  // Walks the output in order, tracking the source offset.
  auto walk = [out_shape, gather_strides](auto&& f) {
    const std::size_t n = shape_numel(out_shape);
    const std::size_t r = out_shape.size();
    if (n == 0) return;
    if (r == 0) {
      f(std::size_t{0}, std::size_t{0});
      return;
    }
    std::vector<std::size_t> idx(r, 0);
    const std::size_t inner = out_shape[r - 1];
    const std::size_t step = (*gather_strides)[r - 1];
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; o += inner) {
      for (std::size_t kk = 0; kk < inner; ++kk) f(o + kk, src + kk * step);
      for (std::size_t ax = r - 1; ax-- > 0;) {
        ++idx[ax];
        src += (*gather_strides)[ax];
        if (idx[ax] < out_shape[ax]) break;
        src -= (*gather_strides)[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  };
  Tensor<T> out(out_shape);
  const T* src = av.data();
  T* dst = out.data();
  walk([&](std::size_t o, std::size_t s) { dst[o] = src[s]; });
  return tape->record(std::move(out), {a}, [tape, a, walk](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      T* d = ga->data();
      const T* pg = g.data();
      walk([&](std::size_t o, std::size_t s) { d[s] += pg[o]; });
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Tape<T>* tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[axis] * inner;
    const T* src = p.value().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * row, row, out.data() + o * out_row + offset);
    offset += row;
  }
  return tape->record(std::move(out), parts, [tape, parts, axis, outer, inner, out_row](const Tensor<T>& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t row = p.shape()[axis] * inner;
      if (Tensor<T>* gp = tape->grad_sink(p)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * out_row + off;
          T* dst = gp->data() + o * row;
          for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
        }
      }
      off += row;
    }
  });
}

template <typename T>
Var<T> slice0(Var<T> a, std::size_t begin, std::size_t end) {
  Tape<T>* tape = a.tape();
  const Tensor<T>& av = a.value();
  if (av.rank() == 0 || begin > end || end > av.dim(0)) {
    throw ShapeError("slice0: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on " + shape_str(av.shape()));
  }
  Shape shape = av.shape();
  const std::size_t row = av.size() / av.dim(0);
  shape[0] = end - begin;
  Tensor<T> out(shape, std::vector<T>(av.data() + begin * row, av.data() + end * row));
  return tape->record(std::move(out), {a}, [tape, a, begin, row](const Tensor<T>& g) {
    if (Tensor<T>* ga = tape->grad_sink(a)) {
      T* d = ga->data() + begin * row;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> avg_pool2(Var<T> x) {
  Tape<T>* tape = x.tape();
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("avg_pool2: needs rank >= 2, got " + shape_str(xv.shape()));
  const std::size_t h = xv.dim(xv.rank() - 2);
  const std::size_t w = xv.dim(xv.rank() - 1);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial extent " + shape_str(xv.shape()));
  const std::size_t planes = xv.size() / (h * w);
  Shape shape = xv.shape();
  shape[shape.size() - 2] = h / 2;
  shape[shape.size() - 1] = w / 2;
  Tensor<T> out(shape);
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const T* s = src + 2 * y * w + 2 * xx;
        dst[y * ow + xx] = T{0.25} * (s[0] + s[1] + s[w] + s[w + 1]);
      }
    }
  }
  return tape->record(std::move(out), {x}, [tape, x, planes, h, w, oh, ow](const Tensor<T>& g) {
    if (Tensor<T>* gx = tape->grad_sink(x)) {
      for (std::size_t p = 0; p < planes; ++p) {
        const T* src = g.data() + p * oh * ow;
        T* dst = gx->data() + p * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const T v = T{0.25} * src[y * ow + xx];
            T* d = dst + 2 * y * w + 2 * xx;
            d[0] += v;
            d[1] += v;
            d[w] += v;
            d[w + 1] += v;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample2(Var<T> x) {
  Tape<T>* tape = x.tape();
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("upsample2: needs rank >= 2, got " + shape_str(xv.shape()));
  const std::size_t h = xv.dim(xv.rank() - 2);
  const std::size_t w = xv.dim(xv.rank() - 1);
  const std::size_t planes = xv.size() / std::max<std::size_t>(1, h * w);
  Shape shape = xv.shape();
  shape[shape.size() - 2] = 2 * h;
  shape[shape.size() - 1] = 2 * w;
  Tensor<T> out(shape);
  const std::size_t oh = 2 * h;
  const std::size_t ow = 2 * w;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  return tape->record(std::move(out), {x}, [tape, x, planes, h, w, oh, ow](const Tensor<T>& g) {
    if (Tensor<T>* gx = tape->grad_sink(x)) {
      for (std::size_t p = 0; p < planes; ++p) {
        const T* src = g.data() + p * oh * ow;
        T* dst = gx->data() + p * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t xx = 0; xx < ow; ++xx) dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
        }
      }
    }
  });
}

#define NVS_INSTANTIATE_OPS(T)                                                   \
  template Var<T> add(Var<T>, Var<T>);                                           \
  template Var<T> sub(Var<T>, Var<T>);                                           \
  template Var<T> mul(Var<T>, Var<T>);                                           \
  template Var<T> scale(Var<T>, T);                                              \
  template Var<T> add_scalar(Var<T>, T);                                         \
  template Var<T> sqrt(Var<T>);                                                  \
  template Var<T> silu(Var<T>);                                                  \
  template Var<T> sum(Var<T>);                                                   \
  template Var<T> mean(Var<T>);                                                  \
  template Var<T> mse(Var<T>, Var<T>);                                           \
  template Var<T> matmul(Var<T>, Var<T>);                                        \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>);                                \
  template Var<T> attention(Var<T>, Var<T>, Var<T>);                             \
  template Var<T> reshape(Var<T>, Shape);                                        \
  template Var<T> permute(Var<T>, const std::vector<std::size_t>&);              \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);               \
  template Var<T> slice0(Var<T>, std::size_t, std::size_t);                      \
  template Var<T> avg_pool2(Var<T>);                                             \
  template Var<T> upsample2(Var<T>);

NVS_INSTANTIATE_OPS(float)
NVS_INSTANTIATE_OPS(double)

#undef NVS_INSTANTIATE_OPS

}  // namespace nvs::ops
