#include "veil/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "veil/error.hpp"

namespace veil {

namespace {

using detail::TensorImpl;

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  if (is.size() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(is));
  if (ks.size() != 4 || ks[2] != 3 || ks[3] != 3) {
    throw ShapeError("conv2d: kernel must be [C_out,C_in,3,3], got " + shape_str(ks));
  }
  if (ks[1] != is[0]) {
    throw ShapeError("conv2d: kernel C_in=" + std::to_string(ks[1]) + " does not match input C=" +
                     std::to_string(is[0]));
  }
  if (bias.shape().size() != 1 || bias.dim(0) != ks[0]) {
    throw ShapeError("conv2d: bias must be [C_out=" + std::to_string(ks[0]) + "], got " +
                     shape_str(bias.shape()));
  }
  if (is[1] < 3 || is[2] < 3) {
    throw ShapeError("conv2d: spatial dims " + std::to_string(is[1]) + "x" + std::to_string(is[2]) +
                     " too small for a 3x3 valid convolution");
  }

  const int C = is[0], H = is[1], W = is[2], O = ks[0];
  const int OH = H - 2, OW = W - 2;

  Tensor out = detail::make_node(
      {O, OH, OW}, {input, kernel, bias}, [C, H, W, O, OH, OW](TensorImpl& self) {
        TensorImpl& xi = *self.parents[0];
        TensorImpl& ki = *self.parents[1];
        TensorImpl& bi = *self.parents[2];
        const double* g = self.grad.data();
        if (xi.requires_grad) {
          xi.ensure_grad();
          double* gx = xi.grad.data();
          const double* k = ki.data.data();
          for (int o = 0; o < O; ++o) {
            const double* go = g + static_cast<std::size_t>(o) * OH * OW;
            for (int c = 0; c < C; ++c) {
              double* gxc = gx + static_cast<std::size_t>(c) * H * W;
              const double* ko = k + (static_cast<std::size_t>(o) * C + c) * 9;
              for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                  const double w = ko[ky * 3 + kx];
                  for (int y = 0; y < OH; ++y) {
                    double* row = gxc + (y + ky) * W + kx;
                    const double* grow = go + y * OW;
                    for (int x = 0; x < OW; ++x) row[x] += w * grow[x];
                  }
                }
              }
            }
          }
        }
        if (ki.requires_grad) {
          ki.ensure_grad();
          double* gk = ki.grad.data();
          const double* xd = xi.data.data();
          for (int o = 0; o < O; ++o) {
            const double* go = g + static_cast<std::size_t>(o) * OH * OW;
            for (int c = 0; c < C; ++c) {
              const double* xc = xd + static_cast<std::size_t>(c) * H * W;
              double* gko = gk + (static_cast<std::size_t>(o) * C + c) * 9;
              for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                  double acc = 0.0;
                  for (int y = 0; y < OH; ++y) {
                    const double* row = xc + (y + ky) * W + kx;
                    const double* grow = go + y * OW;
                    for (int x = 0; x < OW; ++x) acc += row[x] * grow[x];
                  }
                  gko[ky * 3 + kx] += acc;
                }
              }
            }
          }
        }
        if (bi.requires_grad) {
          bi.ensure_grad();
          double* gb = bi.grad.data();
          for (int o = 0; o < O; ++o) {
            const double* go = g + static_cast<std::size_t>(o) * OH * OW;
            double acc = 0.0;
            for (int i = 0; i < OH * OW; ++i) acc += go[i];
            gb[o] += acc;
          }
        }
      });

  const double* x = input.data();
  const double* k = kernel.data();
  const double* b = bias.data();
  double* y = out.data();
  for (int o = 0; o < O; ++o) {
    double* yo = y + static_cast<std::size_t>(o) * OH * OW;
    std::fill(yo, yo + static_cast<std::size_t>(OH) * OW, b[o]);
    for (int c = 0; c < C; ++c) {
      const double* xc = x + static_cast<std::size_t>(c) * H * W;
      const double* ko = k + (static_cast<std::size_t>(o) * C + c) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double w = ko[ky * 3 + kx];
          for (int yy = 0; yy < OH; ++yy) {
            const double* row = xc + (yy + ky) * W + kx;
            double* orow = yo + yy * OW;
            for (int xx = 0; xx < OW; ++xx) orow[xx] += w * row[xx];
          }
        }
      }
    }
  }
  return out;
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (is.size() != 1) throw ShapeError("dense: input must be a vector, got " + shape_str(is));
  if (ws.size() != 2) throw ShapeError("dense: weight must be [M,N], got " + shape_str(ws));
  if (ws[1] != is[0]) {
    throw ShapeError("dense: weight N=" + std::to_string(ws[1]) + " does not match input length " +
                     std::to_string(is[0]));
  }
  if (bias.shape().size() != 1 || bias.dim(0) != ws[0]) {
    throw ShapeError("dense: bias must be [M=" + std::to_string(ws[0]) + "], got " +
                     shape_str(bias.shape()));
  }
  const int M = ws[0], N = ws[1];

  Tensor out = detail::make_node({M}, {input, weight, bias}, [M, N](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    TensorImpl& wi = *self.parents[1];
    TensorImpl& bi = *self.parents[2];
    const double* g = self.grad.data();
    if (xi.requires_grad) {
      xi.ensure_grad();
      double* gx = xi.grad.data();
      const double* w = wi.data.data();
      for (int m = 0; m < M; ++m) {
        const double gm = g[m];
        const double* wrow = w + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) gx[n] += gm * wrow[n];
      }
    }
    if (wi.requires_grad) {
      wi.ensure_grad();
      double* gw = wi.grad.data();
      const double* xd = xi.data.data();
      for (int m = 0; m < M; ++m) {
        const double gm = g[m];
        double* grow = gw + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) grow[n] += gm * xd[n];
      }
    }
    if (bi.requires_grad) {
      bi.ensure_grad();
      double* gb = bi.grad.data();
      for (int m = 0; m < M; ++m) gb[m] += g[m];
    }
  });

  const double* x = input.data();
  const double* w = weight.data();
  const double* b = bias.data();
  double* y = out.data();
  for (int m = 0; m < M; ++m) {
    const double* wrow = w + static_cast<std::size_t>(m) * N;
    double acc = 0.0;
    for (int n = 0; n < N; ++n) acc += wrow[n] * x[n];
    y[m] = acc + b[m];
  }
  return out;
}

Tensor relu(const Tensor& input) {
  const std::size_t n = input.size();
  Tensor out = detail::make_node(input.shape(), {input}, [n](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    if (!xi.requires_grad) return;
    xi.ensure_grad();
    const double* g = self.grad.data();
    const double* xd = xi.data.data();
    double* gx = xi.grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      if (xd[i] > 0.0) gx[i] += g[i];
    }
  });
  const double* x = input.data();
  double* y = out.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

Tensor max_pool2d(const Tensor& input) {
  const auto& is = input.shape();
  if (is.size() != 3) throw ShapeError("max_pool2d: input must be [C,H,W], got " + shape_str(is));
  const int C = is[0], H = is[1], W = is[2];
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("max_pool2d: spatial dims must be even, got " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  const int OH = H / 2, OW = W / 2;

  // Argmax (flat input index) per output element, first-encountered in
  // row-major window order; shared with the backward closure.
  auto argmax = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(C) * OH * OW);

  Tensor out = detail::make_node({C, OH, OW}, {input}, [argmax](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    if (!xi.requires_grad) return;
    xi.ensure_grad();
    const double* g = self.grad.data();
    double* gx = xi.grad.data();
    const auto& am = *argmax;
    for (std::size_t i = 0; i < am.size(); ++i) gx[am[i]] += g[i];
  });

  const double* x = input.data();
  double* y = out.data();
  std::size_t oi = 0;
  for (int c = 0; c < C; ++c) {
    const std::size_t cbase = static_cast<std::size_t>(c) * H * W;
    for (int yy = 0; yy < OH; ++yy) {
      for (int xx = 0; xx < OW; ++xx, ++oi) {
        std::size_t best = cbase + static_cast<std::size_t>(2 * yy) * W + 2 * xx;
        double bv = x[best];
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = cbase + static_cast<std::size_t>(2 * yy + dy) * W + (2 * xx + dx);
            if (x[idx] > bv) {  // strict: ties keep the first-encountered
              bv = x[idx];
              best = idx;
            }
          }
        }
        y[oi] = bv;
        (*argmax)[oi] = best;
      }
    }
  }
  return out;
}

Tensor crop_spatial(const Tensor& input, int new_h, int new_w) {
  const auto& is = input.shape();
  if (is.size() != 3) throw ShapeError("crop_spatial: input must be [C,H,W], got " + shape_str(is));
  const int C = is[0], H = is[1], W = is[2];
  if (new_h <= 0 || new_w <= 0 || new_h > H || new_w > W) {
    throw ShapeError("crop_spatial: target " + std::to_string(new_h) + "x" + std::to_string(new_w) +
                     " invalid for input " + std::to_string(H) + "x" + std::to_string(W));
  }

  Tensor out = detail::make_node({C, new_h, new_w}, {input}, [C, H, W, new_h, new_w](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    if (!xi.requires_grad) return;
    xi.ensure_grad();
    const double* g = self.grad.data();
    double* gx = xi.grad.data();
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < new_h; ++y) {
        const double* grow = g + (static_cast<std::size_t>(c) * new_h + y) * new_w;
        double* xrow = gx + (static_cast<std::size_t>(c) * H + y) * W;
        for (int x = 0; x < new_w; ++x) xrow[x] += grow[x];
      }
    }
  });

  const double* x = input.data();
  double* y = out.data();
  for (int c = 0; c < C; ++c) {
    for (int yy = 0; yy < new_h; ++yy) {
      const double* xrow = x + (static_cast<std::size_t>(c) * H + yy) * W;
      double* orow = y + (static_cast<std::size_t>(c) * new_h + yy) * new_w;
      std::copy(xrow, xrow + new_w, orow);
    }
  }
  return out;
}

Tensor flatten(const Tensor& input) {
  const std::size_t n = input.size();
  Tensor out = detail::make_node({static_cast<int>(n)}, {input}, [n](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    if (!xi.requires_grad) return;
    xi.ensure_grad();
    const double* g = self.grad.data();
    double* gx = xi.grad.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
  });
  std::copy(input.data(), input.data() + n, out.data());
  return out;
}

Tensor softmax(const Tensor& logits) {
  const auto& ls = logits.shape();
  if (ls.size() != 1 || ls[0] < 2) {
    throw ShapeError("softmax: input must be a vector of K >= 2 logits, got " + shape_str(ls));
  }
  const int K = ls[0];

  Tensor out = detail::make_node(ls, {logits}, [K](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    if (!xi.requires_grad) return;
    xi.ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.data.data();
    double* gx = xi.grad.data();
    double dot = 0.0;
    for (int i = 0; i < K; ++i) dot += g[i] * y[i];
    for (int i = 0; i < K; ++i) gx[i] += y[i] * (g[i] - dot);
  });

  const double* x = logits.data();
  double* y = out.data();
  double mx = x[0];
  for (int i = 1; i < K; ++i) mx = std::max(mx, x[i]);
  double total = 0.0;
  for (int i = 0; i < K; ++i) {
    y[i] = std::exp(x[i] - mx);
    total += y[i];
  }
  for (int i = 0; i < K; ++i) y[i] /= total;
  return out;
}

Tensor cross_entropy(const Tensor& probabilities, int label) {
  const auto& ps = probabilities.shape();
  if (ps.size() != 1) {
    throw ShapeError("cross_entropy: probabilities must be a vector, got " + shape_str(ps));
  }
  const int K = ps[0];
  if (label < 0 || label >= K) {
    throw Error("cross_entropy: label " + std::to_string(label) + " out of range [0," +
                std::to_string(K) + ")");
  }

  Tensor out = detail::make_node({1}, {probabilities}, [label](TensorImpl& self) {
    TensorImpl& pi = *self.parents[0];
    if (!pi.requires_grad) return;
    pi.ensure_grad();
    const double p = pi.data[static_cast<std::size_t>(label)];
    // Zero slope inside the clamp, mirroring the relu-kink convention.
    if (p > kCrossEntropyClamp) {
      pi.grad[static_cast<std::size_t>(label)] += -self.grad[0] / p;
    }
  });

  const double p = std::max(probabilities.data()[label], kCrossEntropyClamp);
  out.data()[0] = -std::log(p);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  Tensor out = detail::make_node(a.shape(), {a, b}, [n](TensorImpl& self) {
    const double* g = self.grad.data();
    for (int side = 0; side < 2; ++side) {
      TensorImpl& pi = *self.parents[static_cast<std::size_t>(side)];
      if (!pi.requires_grad) continue;
      pi.ensure_grad();
      double* gp = pi.grad.data();
      for (std::size_t i = 0; i < n; ++i) gp[i] += g[i];
    }
  });
  const double* ad = a.data();
  const double* bd = b.data();
  double* y = out.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = ad[i] + bd[i];
  return out;
}

Tensor scale(const Tensor& input, double factor) {
  const std::size_t n = input.size();
  Tensor out = detail::make_node(input.shape(), {input}, [n, factor](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    if (!xi.requires_grad) return;
    xi.ensure_grad();
    const double* g = self.grad.data();
    double* gx = xi.grad.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += factor * g[i];
  });
  const double* x = input.data();
  double* y = out.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = factor * x[i];
  return out;
}

Tensor sum(const Tensor& input) {
  const std::size_t n = input.size();
  Tensor out = detail::make_node({1}, {input}, [n](TensorImpl& self) {
    TensorImpl& xi = *self.parents[0];
    if (!xi.requires_grad) return;
    xi.ensure_grad();
    const double g = self.grad[0];
    double* gx = xi.grad.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
  double acc = 0.0;
  const double* x = input.data();
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  out.data()[0] = acc;
  return out;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, Tensor& x,
                                  double eps) {
  if (eps <= 0.0) throw ConfigError("finite_difference_gradient: eps must be positive");
  Tensor grad(x.shape());
  double* gd = grad.data();
  double* xd = x.data();
  NoGradGuard untaped;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xd[i];
    xd[i] = orig + eps;
    const double fp = f(x);
    xd[i] = orig - eps;
    const double fm = f(x);
    xd[i] = orig;
    gd[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

}  // namespace veil
