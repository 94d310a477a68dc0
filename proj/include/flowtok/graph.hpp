#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "flowtok/tensor.hpp"

namespace flowtok {

/// Reverse-mode autodiff tape over dense tensors.
///
/// A Graph is built once per evaluation: leaves go in via constant()/param(),
/// ops append nodes, backward() runs the tape in reverse. Ops only record a
/// backward closure when some input requires gradients, so frozen-parameter
/// forwards (teacher encoder, sampling) pay no autodiff overhead.
template <typename T>
class Graph {
 public:
  struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
  };

  Var constant(Tensor<T> v) { return push(std::move(v), false); }
  Var param(Tensor<T> v) { return push(std::move(v), true); }

  const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient of the last backward() target w.r.t. v (zeros if untouched).
  const Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    Node& top = nodes_[loss.id];
    if (top.value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad_ref(loss.id)[0] += T(1);
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  // ---- elementwise / structural ops ----

  Var add(Var a, Var b) {
    const Tensor<T>&va = val(a), &vb = val(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    Var y = push(std::move(out), needs_grad(a) || needs_grad(b));
    if (needs_grad(y)) record(y, [this, a, b, y] {
      const Tensor<T>& gy = nodes_[y.id].grad;
      if (needs_grad(a)) accumulate(a, gy);
      if (needs_grad(b)) accumulate(b, gy);
    });
    return y;
  }

  Var sub(Var a, Var b) {
    const Tensor<T>&va = val(a), &vb = val(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("sub: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    Var y = push(std::move(out), needs_grad(a) || needs_grad(b));
    if (needs_grad(y)) record(y, [this, a, b, y] {
      const Tensor<T>& gy = nodes_[y.id].grad;
      if (needs_grad(a)) accumulate(a, gy);
      if (needs_grad(b)) {
        Tensor<T>& gb = grad_ref_t(b);
        for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] -= gy[i];
      }
    });
    return y;
  }

  Var scale(Var a, T s) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= s;
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y, s] {
      const Tensor<T>& gy = nodes_[y.id].grad;
      Tensor<T>& ga = grad_ref_t(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += s * gy[i];
    });
    return y;
  }

  Var add_const(Var a, const Tensor<T>& c) {
    const Tensor<T>& va = val(a);
    if (!va.same_shape(c)) throw std::invalid_argument("add_const: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c[i];
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y] { accumulate(a, nodes_[y.id].grad); });
    return y;
  }

  Var sub_const(Var a, const Tensor<T>& c) {
    const Tensor<T>& va = val(a);
    if (!va.same_shape(c)) throw std::invalid_argument("sub_const: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= c[i];
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y] { accumulate(a, nodes_[y.id].grad); });
    return y;
  }

  Var reshape(Var a, Shape s) {
    Tensor<T> out = val(a).reshaped(std::move(s));
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y] {
      const Tensor<T>& gy = nodes_[y.id].grad;
      Tensor<T>& ga = grad_ref_t(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
    });
    return y;
  }

  Var permute(Var a, std::vector<std::size_t> perm) {
    const Tensor<T>& va = val(a);
    if (perm.size() != va.rank()) throw std::invalid_argument("permute: rank mismatch");
    Tensor<T> out(permuted_shape(va.shape, perm));
    permute_copy(va, perm, out, /*accumulate=*/false);
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y, perm] {
      // inverse permutation
      std::vector<std::size_t> inv(perm.size());
      for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
      permute_copy(nodes_[y.id].grad, inv, grad_ref_t(a), /*accumulate=*/true);
    });
    return y;
  }

  Var slice0(Var a, std::size_t idx) {
    const Tensor<T>& va = val(a);
    if (va.rank() < 2 || idx >= va.dim(0)) throw std::invalid_argument("slice0: bad index");
    Shape s(va.shape.begin() + 1, va.shape.end());
    const std::size_t chunk = numel_of(s);
    Tensor<T> out(s);
    std::copy_n(va.ptr() + idx * chunk, chunk, out.ptr());
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y, idx, chunk] {
      const Tensor<T>& gy = nodes_[y.id].grad;
      Tensor<T>& ga = grad_ref_t(a);
      T* dst = ga.ptr() + idx * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += gy[i];
    });
    return y;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const std::size_t rows = val(parts[0]).rows_flat();
    std::size_t total = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).rows_flat() != rows) throw std::invalid_argument("concat_cols: row mismatch");
      total += val(p).cols_flat();
      ng = ng || needs_grad(p);
    }
    Tensor<T> out({rows, total});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor<T>& vp = val(p);
      const std::size_t c = vp.cols_flat();
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(vp.ptr() + r * c, c, out.ptr() + r * total + off);
      off += c;
    }
    Var y = push(std::move(out), ng);
    if (ng) record(y, [this, parts, y, rows, total] {
      const Tensor<T>& gy = nodes_[y.id].grad;
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t c = val(p).cols_flat();
        if (needs_grad(p)) {
          Tensor<T>& gp = grad_ref_t(p);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* src = gy.ptr() + r * total + off;
            T* dst = gp.ptr() + r * c;
            for (std::size_t i = 0; i < c; ++i) dst[i] += src[i];
          }
        }
        off += c;
      }
    });
    return y;
  }

  // ---- linear algebra ----

  /// y = x @ w + bias; x: (N, in), w: (in, out), bias: (out).
  Var linear(Var x, Var w, Var bias) {
    const Tensor<T>&vx = val(x), &vw = val(w), &vb = val(bias);
    const std::size_t n = vx.rows_flat(), in = vx.cols_flat();
    if (vw.rank() != 2 || vw.dim(0) != in) throw std::invalid_argument("linear: w shape");
    const std::size_t out_dim = vw.dim(1);
    if (vb.numel() != out_dim) throw std::invalid_argument("linear: bias shape");
    Shape out_shape = vx.shape;
    out_shape.back() = out_dim;
    Tensor<T> out(out_shape);
    {
      auto X = as_matrix(vx, n, in);
      auto W = as_matrix(vw, in, out_dim);
      auto Y = as_matrix(out, n, out_dim);
      Y.noalias() = X * W;
      auto B = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(vb.ptr(), out_dim);
      Y.rowwise() += B;
    }
    const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(bias);
    Var y = push(std::move(out), ng);
    if (ng) record(y, [this, x, w, bias, y, n, in, out_dim] {
      const Tensor<T>& gy = nodes_[y.id].grad;
      auto GY = as_matrix(gy, n, out_dim);
      if (needs_grad(x)) {
        auto GX = as_matrix(grad_ref_t(x), n, in);
        auto W = as_matrix(val(w), in, out_dim);
        GX.noalias() += GY * W.transpose();
      }
      if (needs_grad(w)) {
        auto GW = as_matrix(grad_ref_t(w), in, out_dim);
        auto X = as_matrix(val(x), n, in);
        GW.noalias() += X.transpose() * GY;
      }
      if (needs_grad(bias)) {
        Tensor<T>& gb = grad_ref_t(bias);
        auto GB = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.ptr(), out_dim);
        GB += GY.colwise().sum();
      }
    });
    return y;
  }

  /// Batched matmul on rank-3 tensors: y[i] = alpha * opA(a[i]) @ opB(b[i]).
  Var bmm(Var a, Var b, bool trans_a, bool trans_b, T alpha = T(1)) {
    const Tensor<T>&va = val(a), &vb = val(b);
    if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0))
      throw std::invalid_argument("bmm: need rank-3 tensors with equal batch");
    const std::size_t nb = va.dim(0);
    const std::size_t m = trans_a ? va.dim(2) : va.dim(1);
    const std::size_t k = trans_a ? va.dim(1) : va.dim(2);
    const std::size_t kb = trans_b ? vb.dim(2) : vb.dim(1);
    const std::size_t p = trans_b ? vb.dim(1) : vb.dim(2);
    if (k != kb) throw std::invalid_argument("bmm: inner dim mismatch");
    Tensor<T> out({nb, m, p});
    for (std::size_t i = 0; i < nb; ++i) {
      auto A = as_matrix(va, nb * va.dim(1), va.dim(2)).middleRows(i * va.dim(1), va.dim(1));
      auto B = as_matrix(vb, nb * vb.dim(1), vb.dim(2)).middleRows(i * vb.dim(1), vb.dim(1));
      auto Y = as_matrix(out, nb * m, p).middleRows(i * m, m);
      if (!trans_a && !trans_b)      Y.noalias() = alpha * (A * B);
      else if (!trans_a && trans_b)  Y.noalias() = alpha * (A * B.transpose());
      else if (trans_a && !trans_b)  Y.noalias() = alpha * (A.transpose() * B);
      else                           Y.noalias() = alpha * (A.transpose() * B.transpose());
    }
    const bool ng = needs_grad(a) || needs_grad(b);
    Var y = push(std::move(out), ng);
    if (ng) record(y, [this, a, b, y, trans_a, trans_b, alpha, nb, m, p] {
      const Tensor<T>&va = val(a), &vb = val(b), &gy = nodes_[y.id].grad;
      const std::size_t ra = va.dim(1), ca = va.dim(2);
      const std::size_t rb = vb.dim(1), cb = vb.dim(2);
      for (std::size_t i = 0; i < nb; ++i) {
        auto A = as_matrix(va, nb * ra, ca).middleRows(i * ra, ra);
        auto B = as_matrix(vb, nb * rb, cb).middleRows(i * rb, rb);
        auto GY = as_matrix(gy, nb * m, p).middleRows(i * m, m);
        if (needs_grad(a)) {
          auto GA = as_matrix(grad_ref_t(a), nb * ra, ca).middleRows(i * ra, ra);
          if (!trans_a && !trans_b)      GA.noalias() += alpha * (GY * B.transpose());
          else if (!trans_a && trans_b)  GA.noalias() += alpha * (GY * B);
          else if (trans_a && !trans_b)  GA.noalias() += alpha * (B * GY.transpose());
          else                           GA.noalias() += alpha * (B.transpose() * GY.transpose());
        }
        if (needs_grad(b)) {
          auto GB = as_matrix(grad_ref_t(b), nb * rb, cb).middleRows(i * rb, rb);
          if (!trans_a && !trans_b)      GB.noalias() += alpha * (A.transpose() * GY);
          else if (!trans_a && trans_b)  GB.noalias() += alpha * (GY.transpose() * A);
          else if (trans_a && !trans_b)  GB.noalias() += alpha * (A * GY);
          else                           GB.noalias() += alpha * (GY.transpose() * A.transpose());
        }
      }
    });
    return y;
  }

  // ---- nonlinearities / normalization ----

  Var softmax_rows(Var a) {
    const Tensor<T>& va = val(a);
    const std::size_t n = va.rows_flat(), d = va.cols_flat();
    Tensor<T> out = va;
    for (std::size_t r = 0; r < n; ++r) {
      T* row = out.ptr() + r * d;
      T mx = row[0];
      for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
      T sum = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
      }
      const T inv = T(1) / sum;
      for (std::size_t i = 0; i < d; ++i) row[i] *= inv;
    }
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y, n, d] {
      const Tensor<T>&p = nodes_[y.id].value, &gy = nodes_[y.id].grad;
      Tensor<T>& ga = grad_ref_t(a);
      for (std::size_t r = 0; r < n; ++r) {
        const T* pr = p.ptr() + r * d;
        const T* gr = gy.ptr() + r * d;
        T* dst = ga.ptr() + r * d;
        T dot = T(0);
        for (std::size_t i = 0; i < d; ++i) dot += gr[i] * pr[i];
        for (std::size_t i = 0; i < d; ++i) dst[i] += pr[i] * (gr[i] - dot);
      }
    });
    return y;
  }

  /// Row-wise layer normalization with affine parameters.
  Var layernorm_rows(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Tensor<T>& vx = val(x);
    const std::size_t n = vx.rows_flat(), d = vx.cols_flat();
    if (val(gamma).numel() != d || val(beta).numel() != d)
      throw std::invalid_argument("layernorm: affine shape mismatch");
    Tensor<T> out(vx.shape);
    Tensor<T> xhat(vx.shape);          // saved for backward
    Tensor<T> inv_std({n});
    const T* g = val(gamma).ptr();
    const T* b = val(beta).ptr();
    for (std::size_t r = 0; r < n; ++r) {
      const T* row = vx.ptr() + r * d;
      T mu = T(0);
      for (std::size_t i = 0; i < d; ++i) mu += row[i];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        const T c = row[i] - mu;
        var += c * c;
      }
      var /= static_cast<T>(d);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[r] = is;
      T* xh = xhat.ptr() + r * d;
      T* o = out.ptr() + r * d;
      for (std::size_t i = 0; i < d; ++i) {
        xh[i] = (row[i] - mu) * is;
        o[i] = g[i] * xh[i] + b[i];
      }
    }
    const bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    Var y = push(std::move(out), ng);
    if (ng) {
      auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
      auto is = std::make_shared<Tensor<T>>(std::move(inv_std));
      record(y, [this, x, gamma, beta, y, n, d, xh, is] {
        const Tensor<T>& gy = nodes_[y.id].grad;
        const T* g = val(gamma).ptr();
        if (needs_grad(gamma)) {
          T* gg = grad_ref_t(gamma).ptr();
          for (std::size_t r = 0; r < n; ++r) {
            const T* gr = gy.ptr() + r * d;
            const T* xr = xh->ptr() + r * d;
            for (std::size_t i = 0; i < d; ++i) gg[i] += gr[i] * xr[i];
          }
        }
        if (needs_grad(beta)) {
          T* gb = grad_ref_t(beta).ptr();
          for (std::size_t r = 0; r < n; ++r) {
            const T* gr = gy.ptr() + r * d;
            for (std::size_t i = 0; i < d; ++i) gb[i] += gr[i];
          }
        }
        if (needs_grad(x)) {
          T* gx = grad_ref_t(x).ptr();
          for (std::size_t r = 0; r < n; ++r) {
            const T* gr = gy.ptr() + r * d;
            const T* xr = xh->ptr() + r * d;
            T m1 = T(0), m2 = T(0);
            for (std::size_t i = 0; i < d; ++i) {
              const T dxh = gr[i] * g[i];
              m1 += dxh;
              m2 += dxh * xr[i];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            const T s = (*is)[r];
            T* dst = gx + r * d;
            for (std::size_t i = 0; i < d; ++i) {
              const T dxh = gr[i] * g[i];
              dst[i] += s * (dxh - m1 - xr[i] * m2);
            }
          }
        }
      });
    }
    return y;
  }

  /// Exact (erf-based) GELU.
  Var gelu(Var a) {
    const Tensor<T>& va = val(a);
    Tensor<T> out(va.shape);
    constexpr T kInvSqrt2 = T(0.7071067811865475244008443621048490);
    for (std::size_t i = 0; i < va.numel(); ++i) {
      const T x = va[i];
      out[i] = x * T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
    }
    Var y = push(std::move(out), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y] {
      constexpr T kInvSqrt2 = T(0.7071067811865475244008443621048490);
      constexpr T kInvSqrt2Pi = T(0.3989422804014326779399460599343819);
      const Tensor<T>&va = val(a), &gy = nodes_[y.id].grad;
      Tensor<T>& ga = grad_ref_t(a);
      for (std::size_t i = 0; i < va.numel(); ++i) {
        const T x = va[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
        ga[i] += gy[i] * (cdf + x * pdf);
      }
    });
    return y;
  }

  // ---- reductions / losses ----

  Var mean_all(Var a) {
    const Tensor<T>& va = val(a);
    T acc = T(0);
    for (const T& v : va.data) acc += v;
    const std::size_t n = va.numel();
    Var y = push(Tensor<T>::scalar(acc / static_cast<T>(n)), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y, n] {
      const T g = nodes_[y.id].grad[0] / static_cast<T>(n);
      Tensor<T>& ga = grad_ref_t(a);
      for (auto& v : ga.data) v += g;
    });
    return y;
  }

  /// Scalar mean of squared entries.
  Var mean_square(Var a) {
    const Tensor<T>& va = val(a);
    T acc = T(0);
    for (const T& v : va.data) acc += v * v;
    const std::size_t n = va.numel();
    Var y = push(Tensor<T>::scalar(acc / static_cast<T>(n)), needs_grad(a));
    if (needs_grad(y)) record(y, [this, a, y, n] {
      const T g = nodes_[y.id].grad[0] * T(2) / static_cast<T>(n);
      const Tensor<T>& va = val(a);
      Tensor<T>& ga = grad_ref_t(a);
      for (std::size_t i = 0; i < va.numel(); ++i) ga[i] += g * va[i];
    });
    return y;
  }

  /// Mean over rows of (1 - cos(row, teacher_row)). Norm factors are clamped
  /// from below at `eps`, which keeps the value exactly 0 (and its gradient
  /// exactly 0) when the rows coincide.
  Var cosine_distance_mean(Var student, const Tensor<T>& teacher, T eps) {
    const Tensor<T>& vs = val(student);
    if (!vs.same_shape(teacher)) throw std::invalid_argument("cosine_distance_mean: shape mismatch");
    const std::size_t n = vs.rows_flat(), d = vs.cols_flat();
    T acc = T(0);
    for (std::size_t r = 0; r < n; ++r) {
      const T* u = vs.ptr() + r * d;
      const T* t = teacher.ptr() + r * d;
      T dot = T(0), nu = T(0), nt = T(0);
      for (std::size_t i = 0; i < d; ++i) {
        dot += u[i] * t[i];
        nu += u[i] * u[i];
        nt += t[i] * t[i];
      }
      nu = std::max(std::sqrt(nu), eps);
      nt = std::max(std::sqrt(nt), eps);
      acc += T(1) - dot / (nu * nt);
    }
    Var y = push(Tensor<T>::scalar(acc / static_cast<T>(n)), needs_grad(student));
    if (needs_grad(y)) {
      auto tch = std::make_shared<Tensor<T>>(teacher);
      record(y, [this, student, y, tch, eps, n, d] {
        const T gscale = nodes_[y.id].grad[0] / static_cast<T>(n);
        const Tensor<T>& vs = val(student);
        Tensor<T>& gs = grad_ref_t(student);
        for (std::size_t r = 0; r < n; ++r) {
          const T* u = vs.ptr() + r * d;
          const T* t = tch->ptr() + r * d;
          T dot = T(0), nu2 = T(0), nt2 = T(0);
          for (std::size_t i = 0; i < d; ++i) {
            dot += u[i] * t[i];
            nu2 += u[i] * u[i];
            nt2 += t[i] * t[i];
          }
          const T raw_nu = std::sqrt(nu2);
          const T nu = std::max(raw_nu, eps);
          const T nt = std::max(std::sqrt(nt2), eps);
          const T inv = T(1) / (nu * nt);
          // d(1-cos)/du = -t/(nu*nt) + dot*u/(nu^3*nt) when ||u|| > eps
          const bool clamped = raw_nu < eps;
          T* dst = gs.ptr() + r * d;
          for (std::size_t i = 0; i < d; ++i) {
            T dcdu = t[i] * inv;
            if (!clamped) dcdu -= dot * u[i] * inv / (nu * nu);
            dst[i] += gscale * (-dcdu);
          }
        }
      });
    }
    return y;
  }

  /// y = sum_i weights[i] * scalars[i]; weights are constants.
  Var weighted_sum(const std::vector<Var>& scalars, const std::vector<T>& weights) {
    if (scalars.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
    T acc = T(0);
    bool ng = false;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (val(scalars[i]).numel() != 1) throw std::invalid_argument("weighted_sum: non-scalar input");
      acc += weights[i] * val(scalars[i])[0];
      ng = ng || needs_grad(scalars[i]);
    }
    Var y = push(Tensor<T>::scalar(acc), ng);
    if (ng) record(y, [this, scalars, weights, y] {
      const T g = nodes_[y.id].grad[0];
      for (std::size_t i = 0; i < scalars.size(); ++i)
        if (needs_grad(scalars[i])) grad_ref_t(scalars[i])[0] += weights[i] * g;
    });
    return y;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;

  Var push(Tensor<T> v, bool ng) {
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, ng, nullptr});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  template <typename F>
  void record(Var y, F&& fn) {
    nodes_[y.id].backward = std::forward<F>(fn);
  }

  std::vector<T>& grad_ref(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad.data;
  }

  Tensor<T>& grad_ref_t(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  void accumulate(Var v, const Tensor<T>& g) {
    Tensor<T>& dst = grad_ref_t(v);
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  }

  static Shape permuted_shape(const Shape& s, const std::vector<std::size_t>& perm) {
    Shape out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[perm[i]];
    return out;
  }

  /// dst[perm-applied index] = src[index]; dst shape must already match.
  static void permute_copy(const Tensor<T>& src, const std::vector<std::size_t>& perm,
                           Tensor<T>& dst, bool accumulate) {
    const std::size_t rank = src.rank();
    std::vector<std::size_t> src_strides(rank, 1), dst_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;)
      src_strides[i] = src_strides[i + 1] * src.shape[i + 1];
    for (std::size_t i = rank - 1; i-- > 0;)
      dst_strides[i] = dst_strides[i + 1] * dst.shape[i + 1];
    // stride of dst advanced per source axis
    std::vector<std::size_t> step(rank);
    for (std::size_t out_axis = 0; out_axis < rank; ++out_axis)
      step[perm[out_axis]] = dst_strides[out_axis];
    std::vector<std::size_t> idx(rank, 0);
    const std::size_t n = src.numel();
    std::size_t dst_off = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      if (accumulate)
        dst[dst_off] += src[flat];
      else
        dst[dst_off] = src[flat];
      // odometer increment over source indices
      for (std::size_t ax = rank; ax-- > 0;) {
        idx[ax]++;
        dst_off += step[ax];
        if (idx[ax] < src.shape[ax]) break;
        dst_off -= step[ax] * src.shape[ax];
        idx[ax] = 0;
      }
    }
  }
};

}  // namespace flowtok
