#include "ddae/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "ddae/error.hpp"

namespace ddae::ag {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require(bool ok, const char* what) {
  if (!ok) throw ContractError(what);
}

struct ConvGeom {
  int n, cin, h, w, cout, k, stride, pad, hout, wout;
  int kdim() const { return cin * k * k; }
  int plane() const { return hout * wout; }
};

// col[(ci*k+ky)*k+kx][b*P + oy*wout+ox] for images [n0, n0+nb).
void im2col(const float* x, const ConvGeom& g, int n0, int nb, float* col) {
  const int P = g.plane();
  const int cols = nb * P;
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int b = 0; b < nb; ++b) {
          const float* img = x + (static_cast<std::size_t>(n0 + b) * g.cin + ci) * g.h * g.w;
          float* dst = row + static_cast<std::size_t>(b) * P;
          for (int oy = 0; oy < g.hout; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            float* d = dst + oy * g.wout;
            if (iy < 0 || iy >= g.h) {
              std::fill(d, d + g.wout, 0.0f);
              continue;
            }
            const float* srow = img + iy * g.w;
            for (int ox = 0; ox < g.wout; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              d[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0f;
            }
          }
        }
      }
}

void col2im(const float* col, const ConvGeom& g, int n0, int nb, float* dx) {
  const int P = g.plane();
  const int cols = nb * P;
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int b = 0; b < nb; ++b) {
          float* img = dx + (static_cast<std::size_t>(n0 + b) * g.cin + ci) * g.h * g.w;
          const float* src = row + static_cast<std::size_t>(b) * P;
          for (int oy = 0; oy < g.hout; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            float* drow = img + iy * g.w;
            const float* s = src + oy * g.wout;
            for (int ox = 0; ox < g.wout; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) drow[ix] += s[ox];
            }
          }
        }
      }
}

// Images per GEMM chunk, bounding the column buffer near 4M floats.
int chunk_images(const ConvGeom& g) {
  const std::size_t per = static_cast<std::size_t>(g.kdim()) * g.plane();
  return static_cast<int>(std::clamp<std::size_t>((std::size_t{1} << 22) / std::max<std::size_t>(per, 1), 1,
                                                  static_cast<std::size_t>(g.n)));
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require(xv.ndim() == 4 && wv.ndim() == 4, "conv2d expects 4-D input and weight");
  require(xv.dim(1) == wv.dim(1), "conv2d channel mismatch");
  require(wv.dim(2) == wv.dim(3), "conv2d expects square kernels");
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, pad, 0, 0};
  g.hout = (g.h + 2 * pad - g.k) / stride + 1;
  g.wout = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.hout > 0 && g.wout > 0, "conv2d output would be empty");

  Tensor out({g.n, g.cout, g.hout, g.wout});
  const int P = g.plane();
  const int chunk = chunk_images(g);
  FloatBuffer col, res;
  CMapMat W(wv.data(), g.cout, g.kdim());
  for (int n0 = 0; n0 < g.n; n0 += chunk) {
    const int nb = std::min(chunk, g.n - n0);
    col.resize(static_cast<std::size_t>(g.kdim()) * nb * P);
    res.resize(static_cast<std::size_t>(g.cout) * nb * P);
    im2col(xv.data(), g, n0, nb, col.data());
    MapMat R(res.data(), g.cout, nb * P);
    R.noalias() = W * CMapMat(col.data(), g.kdim(), nb * P);
    for (int b = 0; b < nb; ++b)
      for (int co = 0; co < g.cout; ++co) {
        float* dst = out.data() + (static_cast<std::size_t>(n0 + b) * g.cout + co) * P;
        const float* src = res.data() + static_cast<std::size_t>(co) * nb * P + static_cast<std::size_t>(b) * P;
        const float bb = bias ? bias->value[static_cast<std::size_t>(co)] : 0.0f;
        for (int p = 0; p < P; ++p) dst[p] = src[p] + bb;
      }
  }

  return make_op(std::move(out), {x, weight, bias}, [g, chunk](Node& self) {
    const Var& x = self.inputs[0];
    const Var& w = self.inputs[1];
    const Var& b = self.inputs[2];
    const int P = g.plane();
    FloatBuffer col, dout;
    CMapMat W(w->value.data(), g.cout, g.kdim());
    for (int n0 = 0; n0 < g.n; n0 += chunk) {
      const int nb = std::min(chunk, g.n - n0);
      dout.resize(static_cast<std::size_t>(g.cout) * nb * P);
      for (int bi = 0; bi < nb; ++bi)
        for (int co = 0; co < g.cout; ++co)
          std::memcpy(dout.data() + static_cast<std::size_t>(co) * nb * P + static_cast<std::size_t>(bi) * P,
                      self.grad.data() + (static_cast<std::size_t>(n0 + bi) * g.cout + co) * P,
                      sizeof(float) * P);
      CMapMat D(dout.data(), g.cout, nb * P);
      if (b && b->requires_grad) {
        Eigen::Map<Eigen::VectorXf> db(b->grad_buf().data(), g.cout);
        db += D.rowwise().sum();
      }
      if (w->requires_grad) {
        col.resize(static_cast<std::size_t>(g.kdim()) * nb * P);
        im2col(x->value.data(), g, n0, nb, col.data());
        MapMat dW(w->grad_buf().data(), g.cout, g.kdim());
        dW.noalias() += D * CMapMat(col.data(), g.kdim(), nb * P).transpose();
      }
      if (x->requires_grad) {
        col.resize(static_cast<std::size_t>(g.kdim()) * nb * P);
        MapMat C(col.data(), g.kdim(), nb * P);
        C.noalias() = W.transpose() * D;
        col2im(col.data(), g, n0, nb, x->grad_buf().data());
      }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require(xv.ndim() == 2 && wv.ndim() == 2 && xv.dim(1) == wv.dim(1), "linear shape mismatch");
  const int n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  Tensor out({n, out_dim});
  MapMat Y(out.data(), n, out_dim);
  Y.noalias() = CMapMat(xv.data(), n, in) * CMapMat(wv.data(), out_dim, in).transpose();
  if (bias) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias->value.data(), out_dim);

  return make_op(std::move(out), {x, weight, bias}, [n, in, out_dim](Node& self) {
    const Var& x = self.inputs[0];
    const Var& w = self.inputs[1];
    const Var& b = self.inputs[2];
    CMapMat G(self.grad.data(), n, out_dim);
    if (b && b->requires_grad)
      Eigen::Map<Eigen::RowVectorXf>(b->grad_buf().data(), out_dim) += G.colwise().sum();
    if (w->requires_grad)
      MapMat(w->grad_buf().data(), out_dim, in).noalias() += G.transpose() * CMapMat(x->value.data(), n, in);
    if (x->requires_grad)
      MapMat(x->grad_buf().data(), n, in).noalias() += G * CMapMat(w->value.data(), out_dim, in);
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
  const Tensor& xv = x->value;
  require(xv.ndim() == 4, "group_norm expects NCHW");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  require(groups > 0 && c % groups == 0, "group_norm channels not divisible by groups");
  const int cpg = c / groups;
  const std::size_t m = static_cast<std::size_t>(cpg) * hw;

  Tensor xhat(xv.shape());
  std::vector<float> inv_std(static_cast<std::size_t>(n) * groups);
  Tensor out(xv.shape());
  for (int i = 0; i < n; ++i)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cpg) * hw;
      double s = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += xv[off + j];
      const double mean = s / static_cast<double>(m);
      for (std::size_t j = 0; j < m; ++j) {
        const double d = xv[off + j] - mean;
        s2 += d * d;
      }
      const float is = static_cast<float>(1.0 / std::sqrt(s2 / static_cast<double>(m) + eps));
      inv_std[static_cast<std::size_t>(i) * groups + gi] = is;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gi * cpg + cc;
        const float ga = gamma->value[static_cast<std::size_t>(ch)], be = beta->value[static_cast<std::size_t>(ch)];
        for (int p = 0; p < hw; ++p) {
          const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + p;
          const float xh = static_cast<float>(xv[idx] - mean) * is;
          xhat[idx] = xh;
          out[idx] = xh * ga + be;
        }
      }
    }

  return make_op(std::move(out), {x, gamma, beta},
                 [n, c, hw, groups, cpg, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Var& x = self.inputs[0];
                   const Var& ga = self.inputs[1];
                   const Var& be = self.inputs[2];
                   const Tensor& g = self.grad;
                   if (ga->requires_grad || be->requires_grad) {
                     Tensor& dg = ga->grad_buf();
                     Tensor& db = be->grad_buf();
                     for (int i = 0; i < n; ++i)
                       for (int ch = 0; ch < c; ++ch) {
                         const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
                         float sg = 0.0f, sb = 0.0f;
                         for (int p = 0; p < hw; ++p) {
                           sg += g[off + p] * xhat[off + p];
                           sb += g[off + p];
                         }
                         dg[static_cast<std::size_t>(ch)] += sg;
                         db[static_cast<std::size_t>(ch)] += sb;
                       }
                   }
                   if (!x->requires_grad) return;
                   Tensor& dx = x->grad_buf();
                   std::vector<float> dxh(m);
                   for (int i = 0; i < n; ++i)
                     for (int gi = 0; gi < groups; ++gi) {
                       const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cpg) * hw;
                       double sum_d = 0.0, sum_dx = 0.0;
                       for (int cc = 0; cc < cpg; ++cc) {
                         const float gm = ga->value[static_cast<std::size_t>(gi * cpg + cc)];
                         for (int p = 0; p < hw; ++p) {
                           const std::size_t j = static_cast<std::size_t>(cc) * hw + p;
                           dxh[j] = g[off + j] * gm;
                           sum_d += dxh[j];
                           sum_dx += static_cast<double>(dxh[j]) * xhat[off + j];
                         }
                       }
                       const float is = inv_std[static_cast<std::size_t>(i) * groups + gi];
                       const double md = static_cast<double>(m);
                       for (std::size_t j = 0; j < m; ++j)
                         dx[off + j] += static_cast<float>(is / md * (md * dxh[j] - sum_d - xhat[off + j] * sum_dx));
                     }
                 });
}

Var silu(const Var& x) {
  Tensor out(x->value.shape());
  const Tensor& xv = x->value;
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] / (1.0f + std::exp(-xv[i]));
  return make_op(std::move(out), {x}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    Tensor& dx = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const float s = 1.0f / (1.0f + std::exp(-xv[i]));
      dx[i] += self.grad[i] * s * (1.0f + xv[i] * (1.0f - s));
    }
  });
}

Var add(const Var& a, const Var& b) {
  require(a->value.shape() == b->value.shape(), "add shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (const auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      Tensor& d = in->grad_buf();
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += self.grad[i];
    }
  });
}

Var scale(const Var& x, float s) {
  Tensor out = x->value;
  for (auto& v : out.values()) v *= s;
  return make_op(std::move(out), {x}, [s](Node& self) {
    Tensor& d = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += s * self.grad[i];
  });
}

Var add_channel(const Var& x, const Var& e) {
  const Tensor& xv = x->value;
  require(xv.ndim() == 4 && e->value.ndim() == 2 && e->value.dim(0) == xv.dim(0) && e->value.dim(1) == xv.dim(1),
          "add_channel shape mismatch");
  const int nc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out = xv;
  for (int i = 0; i < nc; ++i) {
    const float v = e->value[static_cast<std::size_t>(i)];
    float* p = out.data() + static_cast<std::size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) p[j] += v;
  }
  return make_op(std::move(out), {x, e}, [nc, hw](Node& self) {
    if (self.inputs[0]->requires_grad) {
      Tensor& dx = self.inputs[0]->grad_buf();
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor& de = self.inputs[1]->grad_buf();
      for (int i = 0; i < nc; ++i) {
        float s = 0.0f;
        const float* g = self.grad.data() + static_cast<std::size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) s += g[j];
        de[static_cast<std::size_t>(i)] += s;
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  require(av.ndim() == 4 && bv.ndim() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) &&
              av.dim(3) == bv.dim(3),
          "concat_channels shape mismatch");
  const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), hw = av.dim(2) * av.dim(3);
  Tensor out({n, ca + cb, av.dim(2), av.dim(3)});
  const std::size_t sa = static_cast<std::size_t>(ca) * hw, sb = static_cast<std::size_t>(cb) * hw;
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * (sa + sb), av.data() + i * sa, sa * sizeof(float));
    std::memcpy(out.data() + i * (sa + sb) + sa, bv.data() + i * sb, sb * sizeof(float));
  }
  return make_op(std::move(out), {a, b}, [n, sa, sb](Node& self) {
    for (int which = 0; which < 2; ++which) {
      const Var& in = self.inputs[static_cast<std::size_t>(which)];
      if (!in->requires_grad) continue;
      Tensor& d = in->grad_buf();
      const std::size_t len = which == 0 ? sa : sb;
      const std::size_t off = which == 0 ? 0 : sa;
      for (int i = 0; i < n; ++i) {
        const float* g = self.grad.data() + i * (sa + sb) + off;
        float* dst = d.data() + i * len;
        for (std::size_t j = 0; j < len; ++j) dst[j] += g[j];
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  const Tensor& xv = x->value;
  require(xv.ndim() == 4, "upsample expects NCHW");
  const int nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (int i = 0; i < nc; ++i) {
    const float* s = xv.data() + static_cast<std::size_t>(i) * h * w;
    float* d = out.data() + static_cast<std::size_t>(i) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
  }
  return make_op(std::move(out), {x}, [nc, h, w](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buf();
    for (int i = 0; i < nc; ++i) {
      const float* g = self.grad.data() + static_cast<std::size_t>(i) * 4 * h * w;
      float* d = dx.data() + static_cast<std::size_t>(i) * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) d[(y / 2) * w + xx / 2] += g[y * 2 * w + xx];
    }
  });
}

Var spatial_attention(const Var& q, const Var& k, const Var& v) {
  const Tensor& qv = q->value;
  require(qv.ndim() == 4 && qv.shape() == k->value.shape() && qv.shape() == v->value.shape(),
          "attention shape mismatch");
  const int n = qv.dim(0), c = qv.dim(1), p = qv.dim(2) * qv.dim(3);
  const float sc = 1.0f / std::sqrt(static_cast<float>(c));
  const std::size_t img = static_cast<std::size_t>(c) * p;
  Tensor out(qv.shape());
  Tensor attn({n, p, p});
  for (int i = 0; i < n; ++i) {
    CMapMat Q(qv.data() + i * img, c, p), K(k->value.data() + i * img, c, p), V(v->value.data() + i * img, c, p);
    MapMat A(attn.data() + static_cast<std::size_t>(i) * p * p, p, p);
    A.noalias() = (Q.transpose() * K) * sc;
    for (int r = 0; r < p; ++r) {
      const float mx = A.row(r).maxCoeff();
      A.row(r) = (A.row(r).array() - mx).exp();
      A.row(r) /= A.row(r).sum();
    }
    MapMat(out.data() + i * img, c, p).noalias() = V * A.transpose();
  }
  return make_op(std::move(out), {q, k, v}, [n, c, p, sc, img, attn = std::move(attn)](Node& self) {
    const Var& q = self.inputs[0];
    const Var& k = self.inputs[1];
    const Var& v = self.inputs[2];
    RowMat dA(p, p), dS(p, p);
    for (int i = 0; i < n; ++i) {
      CMapMat G(self.grad.data() + i * img, c, p);
      CMapMat A(attn.data() + static_cast<std::size_t>(i) * p * p, p, p);
      CMapMat Q(q->value.data() + i * img, c, p), K(k->value.data() + i * img, c, p),
          V(v->value.data() + i * img, c, p);
      if (v->requires_grad) MapMat(v->grad_buf().data() + i * img, c, p).noalias() += G * A;
      if (!q->requires_grad && !k->requires_grad) continue;
      dA.noalias() = G.transpose() * V;
      const Eigen::VectorXf rs = (dA.array() * A.array()).rowwise().sum();
      dS = (A.array() * (dA.colwise() - rs).array()) * sc;
      if (q->requires_grad) MapMat(q->grad_buf().data() + i * img, c, p).noalias() += K * dS.transpose();
      if (k->requires_grad) MapMat(k->grad_buf().data() + i * img, c, p).noalias() += Q * dS;
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x->value;
  require(xv.ndim() == 4, "global_avg_pool expects NCHW");
  const int nc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1)});
  for (int i = 0; i < nc; ++i) {
    double s = 0.0;
    const float* p = xv.data() + static_cast<std::size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) s += p[j];
    out[static_cast<std::size_t>(i)] = static_cast<float>(s / hw);
  }
  return make_op(std::move(out), {x}, [nc, hw](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buf();
    const float inv = 1.0f / static_cast<float>(hw);
    for (int i = 0; i < nc; ++i) {
      const float g = self.grad[static_cast<std::size_t>(i)] * inv;
      float* d = dx.data() + static_cast<std::size_t>(i) * hw;
      for (int j = 0; j < hw; ++j) d[j] += g;
    }
  });
}

Var add_rows(const Var& x, const Var& table, std::span<const int> idx) {
  const Tensor& xv = x->value;
  const Tensor& tv = table->value;
  require(xv.ndim() == 2 && tv.ndim() == 2 && xv.dim(1) == tv.dim(1) && static_cast<int>(idx.size()) == xv.dim(0),
          "add_rows shape mismatch");
  const int n = xv.dim(0), d = xv.dim(1);
  std::vector<int> rows(idx.begin(), idx.end());
  Tensor out = xv;
  for (int i = 0; i < n; ++i) {
    require(rows[static_cast<std::size_t>(i)] >= 0 && rows[static_cast<std::size_t>(i)] < tv.dim(0),
            "add_rows index out of range");
    for (int j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i) * d + j] += tv[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)]) * d + j];
  }
  return make_op(std::move(out), {x, table}, [n, d, rows = std::move(rows)](Node& self) {
    if (self.inputs[0]->requires_grad) {
      Tensor& dx = self.inputs[0]->grad_buf();
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor& dt = self.inputs[1]->grad_buf();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          dt[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)]) * d + j] +=
              self.grad[static_cast<std::size_t>(i) * d + j];
    }
  });
}

Var mse(const Var& a, const Var& b) {
  require(a->value.shape() == b->value.shape(), "mse shape mismatch");
  const std::size_t m = a->value.numel();
  require(m > 0, "mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = static_cast<double>(a->value[i]) - b->value[i];
    s += d * d;
  }
  Tensor out({1}, static_cast<float>(s / static_cast<double>(m)));
  return make_op(std::move(out), {a, b}, [m](Node& self) {
    const float g = self.grad[0] * 2.0f / static_cast<float>(m);
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (self.inputs[0]->requires_grad) {
      Tensor& d = self.inputs[0]->grad_buf();
      for (std::size_t i = 0; i < m; ++i) d[i] += g * (av[i] - bv[i]);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor& d = self.inputs[1]->grad_buf();
      for (std::size_t i = 0; i < m; ++i) d[i] -= g * (av[i] - bv[i]);
    }
  });
}

Var log_softmax(const Var& logits) {
  const Tensor& lv = logits->value;
  require(lv.ndim() == 2, "log_softmax expects [N, K]");
  const int n = lv.dim(0), k = lv.dim(1);
  Tensor out(lv.shape());
  for (int i = 0; i < n; ++i) {
    const float* r = lv.data() + static_cast<std::size_t>(i) * k;
    float mx = r[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, r[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(static_cast<double>(r[j] - mx));
    const float lse = mx + static_cast<float>(std::log(s));
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = r[j] - lse;
  }
  return make_op(std::move(out), {logits}, [n, k](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buf();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      float sg = 0.0f;
      for (int j = 0; j < k; ++j) sg += self.grad[off + j];
      for (int j = 0; j < k; ++j) dx[off + j] += self.grad[off + j] - std::exp(self.value[off + j]) * sg;
    }
  });
}

Var pick_sum(const Var& logp, std::span<const int> labels, float weight) {
  const Tensor& lv = logp->value;
  require(lv.ndim() == 2 && static_cast<int>(labels.size()) == lv.dim(0), "pick_sum label count mismatch");
  const int k = lv.dim(1);
  std::vector<int> ys(labels.begin(), labels.end());
  double s = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    require(ys[i] >= 0 && ys[i] < k, "label out of range");
    s += lv[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(ys[i])];
  }
  Tensor out({1}, static_cast<float>(weight * s));
  return make_op(std::move(out), {logp}, [k, weight, ys = std::move(ys)](Node& self) {
    Tensor& d = self.inputs[0]->grad_buf();
    for (std::size_t i = 0; i < ys.size(); ++i)
      d[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(ys[i])] += weight * self.grad[0];
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require(!labels.empty(), "cross_entropy needs at least one label");
  return pick_sum(log_softmax(logits), labels, -1.0f / static_cast<float>(labels.size()));
}

}  // namespace ddae::ag
