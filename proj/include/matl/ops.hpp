#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "matl/tensor.hpp"

namespace matl {

namespace detail {

// Row-major micro-GEMMs. The n-innermost loops auto-vectorize under -O3 and
// carry the bulk of the convolution cost.

// C(MxN) += A(MxK) * B(KxN)
template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t m = 0; m < M; ++m) {
    T* crow = C + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[m * K + k];
      const T* brow = B + k * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C(MxN) += A(KxM)^T * B(KxN)
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* arow = A + k * M;
    const T* brow = B + k * N;
    for (std::size_t m = 0; m < M; ++m) {
      const T a = arow[m];
      T* crow = C + m * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C(MxN) += A(MxK) * B(NxK)^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* arow = A + m * K;
    for (std::size_t n = 0; n < N; ++n) {
      const T* brow = B + n * K;
      T acc = T(0);
      for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      C[m * N + n] += acc;
    }
  }
}

struct ConvGeom {
  int C, H, W, F, kh, kw, stride, dilation, padding, OH, OW;
};

// cols is (C*kh*kw) x (OH*OW); zero-padding is materialized as zeros.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const int span = g.OH * g.OW;
  int row = 0;
  for (int c = 0; c < g.C; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj, ++row) {
        T* dst = cols + static_cast<std::size_t>(row) * span;
        for (int oh = 0; oh < g.OH; ++oh) {
          const int ih = oh * g.stride - g.padding + ki * g.dilation;
          if (ih < 0 || ih >= g.H) {
            std::fill(dst + oh * g.OW, dst + (oh + 1) * g.OW, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * g.H + ih) * g.W;
          for (int ow = 0; ow < g.OW; ++ow) {
            const int iw = ow * g.stride - g.padding + kj * g.dilation;
            dst[oh * g.OW + ow] = (iw >= 0 && iw < g.W) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const int span = g.OH * g.OW;
  int row = 0;
  for (int c = 0; c < g.C; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj, ++row) {
        const T* src = cols + static_cast<std::size_t>(row) * span;
        for (int oh = 0; oh < g.OH; ++oh) {
          const int ih = oh * g.stride - g.padding + ki * g.dilation;
          if (ih < 0 || ih >= g.H) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * g.H + ih) * g.W;
          for (int ow = 0; ow < g.OW; ++ow) {
            const int iw = ow * g.stride - g.padding + kj * g.dilation;
            if (iw >= 0 && iw < g.W) dst[iw] += src[oh * g.OW + ow];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> make_op_output(std::vector<int> shape, bool needs_grad) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  if (needs_grad) {
    out.node()->needs_grad = true;
    out.node()->grad.assign(out.numel(), T(0));
  }
  return out;
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t axis = 0;
  while (axis < sa.size() && axis < sb.size() && sa[axis] == sb[axis]) ++axis;
  throw DimensionError(std::string(op) + ": shape mismatch at axis " + std::to_string(axis) + ": " +
                       shape_str(sa) + " vs " + shape_str(sb));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, int rank) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                         shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and dense ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  const bool ng = a.needs_grad() || b.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(a.shape(), ng);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (ng) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record("add", [an, bn, on] {
      const std::size_t m = on->grad.size();
      if (an->needs_grad)
        for (std::size_t i = 0; i < m; ++i) an->grad[i] += on->grad[i];
      if (bn->needs_grad)
        for (std::size_t i = 0; i < m; ++i) bn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  const bool ng = a.needs_grad() || b.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(a.shape(), ng);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - b.values()[i];
  if (ng) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record("sub", [an, bn, on] {
      const std::size_t m = on->grad.size();
      if (an->needs_grad)
        for (std::size_t i = 0; i < m; ++i) an->grad[i] += on->grad[i];
      if (bn->needs_grad)
        for (std::size_t i = 0; i < m; ++i) bn->grad[i] -= on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  const bool ng = a.needs_grad() || b.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(a.shape(), ng);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (ng) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record("mul", [an, bn, on] {
      const std::size_t m = on->grad.size();
      if (an->needs_grad)
        for (std::size_t i = 0; i < m; ++i) an->grad[i] += on->grad[i] * bn->value[i];
      if (bn->needs_grad)
        for (std::size_t i = 0; i < m; ++i) bn->grad[i] += on->grad[i] * an->value[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
  const bool ng = a.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(a.shape(), ng);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * c;
  if (ng) {
    auto an = a.node();
    auto on = out.node();
    tape.record("scale", [an, on, c] {
      const std::size_t m = on->grad.size();
      for (std::size_t i = 0; i < m; ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  const bool ng = a.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(a.shape(), ng);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] > T(0) ? a.values()[i] : T(0);
  if (ng) {
    auto an = a.node();
    auto on = out.node();
    tape.record("relu", [an, on] {
      const std::size_t m = on->grad.size();
      for (std::size_t i = 0; i < m; ++i)
        if (an->value[i] > T(0)) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
  const bool ng = a.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(a.shape(), ng);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = T(1) / (T(1) + std::exp(-a.values()[i]));
  if (ng) {
    auto an = a.node();
    auto on = out.node();
    tape.record("sigmoid", [an, on] {
      const std::size_t m = on->grad.size();
      for (std::size_t i = 0; i < m; ++i) {
        const T s = on->value[i];
        an->grad[i] += on->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& a) {
  const int K = a.shape().back();
  if (K < 1) throw DimensionError("softmax: empty last axis");
  const std::size_t rows = a.numel() / static_cast<std::size_t>(K);
  const bool ng = a.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(a.shape(), ng);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = a.values().data() + r * K;
    T* dst = out.values().data() + r * K;
    T mx = src[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, src[k]);
    T sum = T(0);
    for (int k = 0; k < K; ++k) {
      dst[k] = std::exp(src[k] - mx);
      sum += dst[k];
    }
    for (int k = 0; k < K; ++k) dst[k] /= sum;
  }
  if (ng) {
    auto an = a.node();
    auto on = out.node();
    tape.record("softmax", [an, on, rows, K] {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* s = on->value.data() + r * K;
        const T* dy = on->grad.data() + r * K;
        T dot = T(0);
        for (int k = 0; k < K; ++k) dot += dy[k] * s[k];
        T* dx = an->grad.data() + r * K;
        for (int k = 0; k < K; ++k) dx[k] += s[k] * (dy[k] - dot);
      }
    });
  }
  return out;
}

// a: (N,I), b: (I,O) -> (N,O)
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner axis mismatch: lhs axis 1 is " + std::to_string(a.dim(1)) +
                         ", rhs axis 0 is " + std::to_string(b.dim(0)));
  const std::size_t N = static_cast<std::size_t>(a.dim(0));
  const std::size_t I = static_cast<std::size_t>(a.dim(1));
  const std::size_t O = static_cast<std::size_t>(b.dim(1));
  const bool ng = a.needs_grad() || b.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({a.dim(0), b.dim(1)}, ng);
  detail::gemm_nn(N, I, O, a.values().data(), b.values().data(), out.values().data());
  if (ng) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape.record("matmul", [an, bn, on, N, I, O] {
      if (an->needs_grad)  // dA = dC * B^T
        detail::gemm_nt(N, O, I, on->grad.data(), bn->value.data(), an->grad.data());
      if (bn->needs_grad)  // dB = A^T * dC
        detail::gemm_tn(I, N, O, an->value.data(), on->grad.data(), bn->grad.data());
    });
  }
  return out;
}

// x: (N,D) + bias (D), broadcast over rows.
template <typename T>
Tensor<T> bias_add(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank("bias_add", x, 2);
  detail::require_rank("bias_add", bias, 1);
  if (x.dim(1) != bias.dim(0))
    throw DimensionError("bias_add: feature axis (1) is " + std::to_string(x.dim(1)) +
                         " but bias has " + std::to_string(bias.dim(0)));
  const std::size_t N = static_cast<std::size_t>(x.dim(0));
  const std::size_t D = static_cast<std::size_t>(x.dim(1));
  const bool ng = x.needs_grad() || bias.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(x.shape(), ng);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) out.values()[i * D + d] = x.values()[i * D + d] + bias.values()[d];
  if (ng) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    tape.record("bias_add", [xn, bn, on, N, D] {
      if (xn->needs_grad)
        for (std::size_t i = 0; i < N * D; ++i) xn->grad[i] += on->grad[i];
      if (bn->needs_grad)
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t d = 0; d < D; ++d) bn->grad[d] += on->grad[i * D + d];
    });
  }
  return out;
}

// x: (N,C,H,W) + bias (C), broadcast over batch and spatial axes.
template <typename T>
Tensor<T> bias_add_channel(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank("bias_add_channel", x, 4);
  detail::require_rank("bias_add_channel", bias, 1);
  if (x.dim(1) != bias.dim(0))
    throw DimensionError("bias_add_channel: channel axis (1) is " + std::to_string(x.dim(1)) +
                         " but bias has " + std::to_string(bias.dim(0)));
  const std::size_t N = static_cast<std::size_t>(x.dim(0));
  const std::size_t C = static_cast<std::size_t>(x.dim(1));
  const std::size_t S = static_cast<std::size_t>(x.dim(2)) * static_cast<std::size_t>(x.dim(3));
  const bool ng = x.needs_grad() || bias.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(x.shape(), ng);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const T b = bias.values()[c];
      const std::size_t base = (i * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) out.values()[base + s] = x.values()[base + s] + b;
    }
  if (ng) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    tape.record("bias_add_channel", [xn, bn, on, N, C, S] {
      if (xn->needs_grad)
        for (std::size_t i = 0; i < N * C * S; ++i) xn->grad[i] += on->grad[i];
      if (bn->needs_grad)
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (i * C + c) * S;
            T acc = T(0);
            for (std::size_t s = 0; s < S; ++s) acc += on->grad[base + s];
            bn->grad[c] += acc;
          }
    });
  }
  return out;
}

// Copies data into a new shape with identical element count.
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, std::vector<int> shape) {
  const std::size_t n = detail::shape_numel(shape);
  if (n != x.numel())
    throw DimensionError("reshape: cannot view " + detail::shape_str(x.shape()) + " as " +
                         detail::shape_str(shape));
  const bool ng = x.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(std::move(shape), ng);
  out.values() = x.values();
  if (ng) {
    auto xn = x.node();
    auto on = out.node();
    tape.record("reshape", [xn, on] {
      const std::size_t m = on->grad.size();
      for (std::size_t i = 0; i < m; ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// Sum over all elements -> scalar.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  const bool ng = x.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({1}, ng);
  T acc = T(0);
  for (const T v : x.values()) acc += v;
  out.values()[0] = acc;
  if (ng) {
    auto xn = x.node();
    auto on = out.node();
    tape.record("sum", [xn, on] {
      const T g = on->grad[0];
      for (auto& d : xn->grad) d += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions and resampling
// ---------------------------------------------------------------------------

// x: (N,C,H,W), kernel: (F,C,kh,kw). Explicit symmetric zero padding.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& kernel, int stride, int dilation,
                 int padding) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", kernel, 4);
  if (stride < 1 || dilation < 1 || padding < 0)
    throw UsageError("conv2d: stride and dilation must be >= 1 and padding >= 0");
  if (x.dim(1) != kernel.dim(1))
    throw DimensionError("conv2d: input channels (axis 1) is " + std::to_string(x.dim(1)) +
                         " but kernel expects " + std::to_string(kernel.dim(1)));
  detail::ConvGeom g;
  g.C = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.F = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.dilation = dilation;
  g.padding = padding;
  const int eh = (g.kh - 1) * dilation + 1;
  const int ew = (g.kw - 1) * dilation + 1;
  if (eh > g.H + 2 * padding)
    throw DimensionError("conv2d: effective kernel extent " + std::to_string(eh) +
                         " exceeds padded input on spatial axis 2 (" + std::to_string(g.H + 2 * padding) + ")");
  if (ew > g.W + 2 * padding)
    throw DimensionError("conv2d: effective kernel extent " + std::to_string(ew) +
                         " exceeds padded input on spatial axis 3 (" + std::to_string(g.W + 2 * padding) + ")");
  g.OH = (g.H + 2 * padding - eh) / stride + 1;
  g.OW = (g.W + 2 * padding - ew) / stride + 1;

  const int N = x.dim(0);
  const bool ng = x.needs_grad() || kernel.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({N, g.F, g.OH, g.OW}, ng);

  const std::size_t ckk = static_cast<std::size_t>(g.C) * g.kh * g.kw;
  const std::size_t span = static_cast<std::size_t>(g.OH) * g.OW;
  const std::size_t in_stride = static_cast<std::size_t>(g.C) * g.H * g.W;
  const std::size_t out_stride = static_cast<std::size_t>(g.F) * span;
  std::vector<T> cols(ckk * span);
  for (int n = 0; n < N; ++n) {
    detail::im2col(x.values().data() + n * in_stride, g, cols.data());
    detail::gemm_nn(static_cast<std::size_t>(g.F), ckk, span, kernel.values().data(), cols.data(),
                    out.values().data() + n * out_stride);
  }

  if (ng) {
    auto xn = x.node(), kn = kernel.node(), on = out.node();
    tape.record("conv2d", [xn, kn, on, g, N, ckk, span, in_stride, out_stride] {
      std::vector<T> cols(ckk * span);
      std::vector<T> dcols;
      if (xn->needs_grad) dcols.assign(ckk * span, T(0));
      for (int n = 0; n < N; ++n) {
        const T* dout = on->grad.data() + n * out_stride;
        if (kn->needs_grad) {
          detail::im2col(xn->value.data() + n * in_stride, g, cols.data());
          detail::gemm_nt(static_cast<std::size_t>(g.F), span, ckk, dout, cols.data(), kn->grad.data());
        }
        if (xn->needs_grad) {
          std::fill(dcols.begin(), dcols.end(), T(0));
          detail::gemm_tn(ckk, static_cast<std::size_t>(g.F), span, kn->value.data(), dout, dcols.data());
          detail::col2im_add(dcols.data(), g, xn->grad.data() + n * in_stride);
        }
      }
    });
  }
  return out;
}

// x: (N,F,H,W), kernel: (F,C,kh,kw) -> (N,C,OH,OW); exact adjoint of conv2d
// with the same kernel, stride and padding (dilation 1).
template <typename T>
Tensor<T> conv2d_transpose(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& kernel, int stride,
                           int padding) {
  detail::require_rank("conv2d_transpose", x, 4);
  detail::require_rank("conv2d_transpose", kernel, 4);
  if (stride < 1 || padding < 0) throw UsageError("conv2d_transpose: stride must be >= 1 and padding >= 0");
  if (x.dim(1) != kernel.dim(0))
    throw DimensionError("conv2d_transpose: input channels (axis 1) is " + std::to_string(x.dim(1)) +
                         " but kernel expects " + std::to_string(kernel.dim(0)));
  const int N = x.dim(0), F = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int C = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const int OH = (H - 1) * stride - 2 * padding + kh;
  const int OW = (W - 1) * stride - 2 * padding + kw;
  if (OH < 1 || OW < 1)
    throw DimensionError("conv2d_transpose: output spatial size would be " + std::to_string(OH) + "x" +
                         std::to_string(OW));
  const bool ng = x.needs_grad() || kernel.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({N, C, OH, OW}, ng);

  const T* kv = kernel.values().data();
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const T xv = x.values()[((static_cast<std::size_t>(n) * F + f) * H + h) * W + w];
          if (xv == T(0)) continue;
          for (int c = 0; c < C; ++c) {
            T* oplane = out.values().data() + (static_cast<std::size_t>(n) * C + c) * OH * OW;
            for (int ki = 0; ki < kh; ++ki) {
              const int oh = h * stride - padding + ki;
              if (oh < 0 || oh >= OH) continue;
              for (int kj = 0; kj < kw; ++kj) {
                const int ow = w * stride - padding + kj;
                if (ow < 0 || ow >= OW) continue;
                oplane[oh * OW + ow] += xv * kv[((static_cast<std::size_t>(f) * C + c) * kh + ki) * kw + kj];
              }
            }
          }
        }

  if (ng) {
    auto xn = x.node(), kn = kernel.node(), on = out.node();
    tape.record("conv2d_transpose", [xn, kn, on, N, F, H, W, C, kh, kw, OH, OW, stride, padding] {
      for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const std::size_t xi = ((static_cast<std::size_t>(n) * F + f) * H + h) * W + w;
              T dx_acc = T(0);
              for (int c = 0; c < C; ++c) {
                const T* doplane = on->grad.data() + (static_cast<std::size_t>(n) * C + c) * OH * OW;
                for (int ki = 0; ki < kh; ++ki) {
                  const int oh = h * stride - padding + ki;
                  if (oh < 0 || oh >= OH) continue;
                  for (int kj = 0; kj < kw; ++kj) {
                    const int ow = w * stride - padding + kj;
                    if (ow < 0 || ow >= OW) continue;
                    const std::size_t ki_idx = ((static_cast<std::size_t>(f) * C + c) * kh + ki) * kw + kj;
                    const T dout = doplane[oh * OW + ow];
                    if (xn->needs_grad) dx_acc += dout * kn->value[ki_idx];
                    if (kn->needs_grad) kn->grad[ki_idx] += dout * xn->value[xi];
                  }
                }
              }
              if (xn->needs_grad) xn->grad[xi] += dx_acc;
            }
    });
  }
  return out;
}

// 2x2 average pooling with stride 2; spatial dims must be even.
template <typename T>
Tensor<T> avg_pool2x2(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank("avg_pool2x2", x, 4);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw DimensionError("avg_pool2x2: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                         " is not even");
  const int OH = H / 2, OW = W / 2;
  const bool ng = x.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({N, C, OH, OW}, ng);
  for (int nc = 0; nc < N * C; ++nc) {
    const T* src = x.values().data() + static_cast<std::size_t>(nc) * H * W;
    T* dst = out.values().data() + static_cast<std::size_t>(nc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        const int h = 2 * oh, w = 2 * ow;
        dst[oh * OW + ow] =
            (src[h * W + w] + src[h * W + w + 1] + src[(h + 1) * W + w] + src[(h + 1) * W + w + 1]) / T(4);
      }
  }
  if (ng) {
    auto xn = x.node();
    auto on = out.node();
    tape.record("avg_pool2x2", [xn, on, N, C, H, W, OH, OW] {
      for (int nc = 0; nc < N * C; ++nc) {
        T* dx = xn->grad.data() + static_cast<std::size_t>(nc) * H * W;
        const T* dy = on->grad.data() + static_cast<std::size_t>(nc) * OH * OW;
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow) {
            const T g = dy[oh * OW + ow] / T(4);
            const int h = 2 * oh, w = 2 * ow;
            dx[h * W + w] += g;
            dx[h * W + w + 1] += g;
            dx[(h + 1) * W + w] += g;
            dx[(h + 1) * W + w + 1] += g;
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank("upsample_nearest2x", x, 4);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = H * 2, OW = W * 2;
  const bool ng = x.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({N, C, OH, OW}, ng);
  for (int nc = 0; nc < N * C; ++nc) {
    const T* src = x.values().data() + static_cast<std::size_t>(nc) * H * W;
    T* dst = out.values().data() + static_cast<std::size_t>(nc) * OH * OW;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const T v = src[h * W + w];
        dst[(2 * h) * OW + 2 * w] = v;
        dst[(2 * h) * OW + 2 * w + 1] = v;
        dst[(2 * h + 1) * OW + 2 * w] = v;
        dst[(2 * h + 1) * OW + 2 * w + 1] = v;
      }
  }
  if (ng) {
    auto xn = x.node();
    auto on = out.node();
    tape.record("upsample_nearest2x", [xn, on, N, C, H, W, OW] {
      for (int nc = 0; nc < N * C; ++nc) {
        T* dx = xn->grad.data() + static_cast<std::size_t>(nc) * H * W;
        const T* dy = on->grad.data() + static_cast<std::size_t>(nc) * (H * 2) * OW;
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w)
            dx[h * W + w] += dy[(2 * h) * OW + 2 * w] + dy[(2 * h) * OW + 2 * w + 1] +
                             dy[(2 * h + 1) * OW + 2 * w] + dy[(2 * h + 1) * OW + 2 * w + 1];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Normalizes per channel (axis 1) over all remaining axes. Accepts (N,D) with
// D channels or (N,C,H,W) with C channels. In training mode batch statistics
// are used and running statistics are updated in place as an exponential
// moving average; in inference mode the op is a fixed affine map of x.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps, bool training) {
  if (x.rank() != 2 && x.rank() != 4)
    throw DimensionError("batch_norm: expected rank 2 or 4 input, got " + detail::shape_str(x.shape()));
  const int C = x.dim(1);
  for (const Tensor<T>* t : {&gamma, &beta, const_cast<const Tensor<T>*>(&running_mean),
                             const_cast<const Tensor<T>*>(&running_var)})
    if (t->rank() != 1 || t->dim(0) != C)
      throw DimensionError("batch_norm: parameter shape " + detail::shape_str(t->shape()) +
                           " does not match channel axis (1) size " + std::to_string(C));

  const std::size_t N = static_cast<std::size_t>(x.dim(0));
  const std::size_t S = x.numel() / (N * static_cast<std::size_t>(C));  // spatial extent per channel
  const std::size_t R = N * S;                                          // reduction count per channel

  std::vector<T> mean(C), var(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      T m = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = x.values().data() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) m += src[s];
      }
      m /= static_cast<T>(R);
      T v = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = x.values().data() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          const T d = src[s] - m;
          v += d * d;
        }
      }
      v /= static_cast<T>(R);
      mean[c] = m;
      var[c] = v;
      running_mean.values()[c] = momentum * running_mean.values()[c] + (T(1) - momentum) * m;
      running_var.values()[c] = momentum * running_var.values()[c] + (T(1) - momentum) * v;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.values()[c];
      var[c] = running_var.values()[c];
    }
  }

  const bool ng = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(x.shape(), ng);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> invstd(C);
  for (int c = 0; c < C; ++c) invstd[c] = T(1) / std::sqrt(var[c] + eps);
  for (std::size_t n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * S;
      const T m = mean[c], is = invstd[c], g = gamma.values()[c], b = beta.values()[c];
      for (std::size_t s = 0; s < S; ++s) {
        const T xh = (x.values()[base + s] - m) * is;
        (*xhat)[base + s] = xh;
        out.values()[base + s] = g * xh + b;
      }
    }

  if (ng) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    auto istd = std::make_shared<std::vector<T>>(std::move(invstd));
    tape.record("batch_norm", [xn, gn, bn, on, xhat, istd, N, C, S, R, training] {
      for (int c = 0; c < C; ++c) {
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t base = (n * C + c) * S;
          for (std::size_t s = 0; s < S; ++s) {
            const T dy = on->grad[base + s];
            sum_dy += dy;
            sum_dy_xhat += dy * (*xhat)[base + s];
          }
        }
        if (gn->needs_grad) gn->grad[c] += sum_dy_xhat;
        if (bn->needs_grad) bn->grad[c] += sum_dy;
        if (xn->needs_grad) {
          const T g = gn->value[c];
          const T is = (*istd)[c];
          if (training) {
            const T mean_dy = sum_dy / static_cast<T>(R);
            const T mean_dy_xhat = sum_dy_xhat / static_cast<T>(R);
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * S;
              for (std::size_t s = 0; s < S; ++s)
                xn->grad[base + s] +=
                    g * is * (on->grad[base + s] - mean_dy - (*xhat)[base + s] * mean_dy_xhat);
            }
          } else {
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * S;
              for (std::size_t s = 0; s < S; ++s) xn->grad[base + s] += g * is * on->grad[base + s];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
constexpr T log_clamp_eps() {
  return std::is_same_v<T, float> ? T(1e-7) : T(1e-12);
}
}  // namespace detail

// Mean binary cross-entropy over all elements; predictions in (0,1).
template <typename T>
Tensor<T> bce_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape("bce_loss", pred, target);
  const std::size_t n = pred.numel();
  if (n == 0) throw DimensionError("bce_loss: empty input");
  const T eps = detail::log_clamp_eps<T>();
  const bool ng = pred.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({1}, ng);
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(pred.values()[i], eps, T(1) - eps);
    const T t = target.values()[i];
    acc -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
  }
  out.values()[0] = acc / static_cast<T>(n);
  if (ng) {
    auto pn = pred.node(), tn = target.node(), on = out.node();
    tape.record("bce_loss", [pn, tn, on, n, eps] {
      const T g = on->grad[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T p = std::clamp(pn->value[i], eps, T(1) - eps);
        const T t = tn->value[i];
        pn->grad[i] += g * (p - t) / (p * (T(1) - p));
      }
    });
  }
  return out;
}

// Mean categorical cross-entropy of probabilities (N,K) against integer labels.
template <typename T>
Tensor<T> cce_loss(Tape<T>& tape, const Tensor<T>& probs, const std::vector<int>& labels) {
  detail::require_rank("cce_loss", probs, 2);
  const int N = probs.dim(0), K = probs.dim(1);
  if (K < 1) throw DimensionError("cce_loss: empty class axis");
  if (static_cast<int>(labels.size()) != N)
    throw DimensionError("cce_loss: batch axis (0) is " + std::to_string(N) + " but got " +
                         std::to_string(labels.size()) + " labels");
  for (int i = 0; i < N; ++i)
    if (labels[i] < 0 || labels[i] >= K)
      throw UsageError("cce_loss: label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) +
                       " outside [0," + std::to_string(K) + ")");
  const T eps = detail::log_clamp_eps<T>();
  const bool ng = probs.needs_grad();
  Tensor<T> out = detail::make_op_output<T>({1}, ng);
  T acc = T(0);
  for (int i = 0; i < N; ++i) acc -= std::log(std::max(probs.values()[i * K + labels[i]], eps));
  out.values()[0] = acc / static_cast<T>(N);
  if (ng) {
    auto pn = probs.node();
    auto on = out.node();
    auto lab = std::make_shared<std::vector<int>>(labels);
    tape.record("cce_loss", [pn, on, lab, N, K, eps] {
      const T g = on->grad[0] / static_cast<T>(N);
      for (int i = 0; i < N; ++i) {
        const std::size_t idx = static_cast<std::size_t>(i) * K + (*lab)[i];
        pn->grad[idx] -= g / std::max(pn->value[idx], eps);
      }
    });
  }
  return out;
}

// Row-wise L2 normalization of (N,D) embeddings.
template <typename T>
Tensor<T> l2_normalize_rows(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank("l2_normalize_rows", x, 2);
  const int N = x.dim(0), D = x.dim(1);
  const T tiny = T(1e-12);
  const bool ng = x.needs_grad();
  Tensor<T> out = detail::make_op_output<T>(x.shape(), ng);
  auto norms = std::make_shared<std::vector<T>>(N);
  for (int i = 0; i < N; ++i) {
    const T* src = x.values().data() + static_cast<std::size_t>(i) * D;
    T sq = T(0);
    for (int d = 0; d < D; ++d) sq += src[d] * src[d];
    const T nrm = std::max(std::sqrt(sq), tiny);
    (*norms)[i] = nrm;
    T* dst = out.values().data() + static_cast<std::size_t>(i) * D;
    for (int d = 0; d < D; ++d) dst[d] = src[d] / nrm;
  }
  if (ng) {
    auto xn = x.node();
    auto on = out.node();
    tape.record("l2_normalize_rows", [xn, on, norms, N, D] {
      for (int i = 0; i < N; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * D;
        const T* y = on->value.data() + base;
        const T* dy = on->grad.data() + base;
        T dot = T(0);
        for (int d = 0; d < D; ++d) dot += y[d] * dy[d];
        const T inv = T(1) / (*norms)[i];
        for (int d = 0; d < D; ++d) xn->grad[base + d] += inv * (dy[d] - y[d] * dot);
      }
    });
  }
  return out;
}

}  // namespace matl
