#include "bld/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace bld::ag {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void add_into(Tensor& dst, const Tensor& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

struct ConvGeom {
  int ci, h, w, k, stride, pad, ho, wo;
};

void im2col(const float* x, const ConvGeom& g, float* cols) {
  const int p = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * p;
        const float* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          float* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, 0.0f);
            continue;
          }
          const float* in = plane + iy * g.w;
          if (g.stride == 1) {
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox - g.pad + kx;
              out[ox] = (ix >= 0 && ix < g.w) ? in[ix] : 0.0f;
            }
          } else {
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              out[ox] = (ix >= 0 && ix < g.w) ? in[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im(const float* cols, const ConvGeom& g, float* x) {
  const int p = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * p;
        float* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          float* out = plane + iy * g.w;
          const float* in = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Var::make(std::move(out), {x}, [df](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    Tensor& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(a.value[i], self.value[i]);
  });
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
  } else {
    add_into(grad, g);
  }
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (!node_->grad.empty()) node_->grad.fill(0.0f);
}

Var Var::make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  Var out(std::move(value));
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& v : inputs) out.node_->inputs.push_back(v.node_);
    out.node_->backward = std::move(backward);
  }
  return out;
}

void backward(const Var& loss) {
  if (!loss.requires_grad()) return;
  if (loss.value().size() != 1) throw ShapeError("backward requires a scalar loss");
  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size()) {
      Node* child = n->inputs[idx++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->grad = Tensor(loss.shape(), 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (!n->inputs.empty()) {
      n->inputs.clear();
      n->backward = nullptr;
      n->grad = Tensor();
    }
  }
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  add_into(out, b.value());
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) {
      Tensor& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      Tensor& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

Var scale(const Var& a, float s) {
  return unary(a, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Var silu(const Var& x) {
  return unary(
      x, [](float v) { return v / (1.0f + std::exp(-v)); },
      [](float v, float) {
        const float sg = 1.0f / (1.0f + std::exp(-v));
        return sg * (1.0f + v * (1.0f - sg));
      });
}

Var relu(const Var& x) {
  return unary(x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Var tanh(const Var& x) {
  return unary(x, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

Var exp(const Var& x) {
  return unary(x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  }
  const int n = xv.dim(0), co = wv.dim(0);
  ConvGeom g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  const int kk = g.ci * g.k * g.k;
  const int p = g.ho * g.wo;
  const bool direct = g.k == 1 && stride == 1 && pad == 0;
  Tensor out({n, co, g.ho, g.wo});
  std::vector<float> cols(direct ? 0 : static_cast<std::size_t>(kk) * p);
  CMapR wm(wv.data(), co, kk);
  for (int i = 0; i < n; ++i) {
    const float* xi = xv.data() + static_cast<std::size_t>(i) * g.ci * g.h * g.w;
    if (!direct) im2col(xi, g, cols.data());
    CMapR cm(direct ? xi : cols.data(), kk, p);
    MapR om(out.data() + static_cast<std::size_t>(i) * co * p, co, p);
    om.noalias() = wm * cm;
    if (b.defined()) om.colwise() += Eigen::Map<const Eigen::VectorXf>(b.value().data(), co);
  }
  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return Var::make(std::move(out), std::move(inputs), [g, n, co, kk, p, direct](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    Node* bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    std::vector<float> cols(static_cast<std::size_t>(kk) * p);
    CMapR wm(wn.value.data(), co, kk);
    for (int i = 0; i < n; ++i) {
      CMapR gm(self.grad.data() + static_cast<std::size_t>(i) * co * p, co, p);
      const float* xi = xn.value.data() + static_cast<std::size_t>(i) * g.ci * g.h * g.w;
      if (wn.requires_grad) {
        if (!direct) im2col(xi, g, cols.data());
        CMapR cm(direct ? xi : cols.data(), kk, p);
        MapR gw(wn.grad_buffer().data(), co, kk);
        gw.noalias() += gm * cm.transpose();
      }
      if (bn && bn->requires_grad) {
        // plain loops keep the reduction order independent of buffer alignment
        float* gb = bn->grad_buffer().data();
        for (int c = 0; c < co; ++c) {
          float s = 0.0f;
          for (int k = 0; k < p; ++k) s += gm(c, k);
          gb[c] += s;
        }
      }
      if (xn.requires_grad) {
        float* gx = xn.grad_buffer().data() + static_cast<std::size_t>(i) * g.ci * g.h * g.w;
        if (direct) {
          MapR gxm(gx, kk, p);
          gxm.noalias() += wm.transpose() * gm;
        } else {
          MapR cm(cols.data(), kk, p);
          cm.noalias() = wm.transpose() * gm;
          col2im(cols.data(), g, gx);
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  }
  const int n = xv.dim(0), in = xv.dim(1), o = wv.dim(0);
  Tensor out({n, o});
  MapR om(out.data(), n, o);
  om.noalias() = CMapR(xv.data(), n, in) * CMapR(wv.data(), o, in).transpose();
  if (b.defined()) om.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.value().data(), o);
  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return Var::make(std::move(out), std::move(inputs), [n, in, o](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    CMapR gm(self.grad.data(), n, o);
    if (xn.requires_grad) MapR(xn.grad_buffer().data(), n, in).noalias() += gm * CMapR(wn.value.data(), o, in);
    if (wn.requires_grad) MapR(wn.grad_buffer().data(), o, in).noalias() += gm.transpose() * CMapR(xn.value.data(), n, in);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      float* gb = self.inputs[2]->grad_buffer().data();
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < o; ++c) gb[c] += gm(r, c);
    }
  });
}

Var add_channel_bias(const Var& x, const Var& v) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || v.value().rank() != 2 || v.value().dim(0) != xv.dim(0) || v.value().dim(1) != xv.dim(1)) {
    throw ShapeError("add_channel_bias: " + shape_str(xv.shape()) + " + " + shape_str(v.shape()));
  }
  const int nc = xv.dim(0) * xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  Tensor out = xv;
  for (int i = 0; i < nc; ++i) {
    const float add = v.value()[static_cast<std::size_t>(i)];
    float* row = out.data() + static_cast<std::size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) row[j] += add;
  }
  return Var::make(std::move(out), {x, v}, [nc, hw](Node& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor& g = self.inputs[1]->grad_buffer();
      for (int i = 0; i < nc; ++i) {
        const float* row = self.grad.data() + static_cast<std::size_t>(i) * hw;
        float s = 0.0f;
        for (int j = 0; j < hw; ++j) s += row[j];
        g[static_cast<std::size_t>(i)] += s;
      }
    }
  });
}

Var upsample2x(const Var& x) {
  const Tensor& xv = x.value();
  const int nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (int i = 0; i < nc; ++i) {
    const float* src = xv.data() + static_cast<std::size_t>(i) * h * w;
    float* dst = out.data() + static_cast<std::size_t>(i) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return Var::make(std::move(out), {x}, [nc, h, w](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (int i = 0; i < nc; ++i) {
      const float* src = self.grad.data() + static_cast<std::size_t>(i) * 4 * h * w;
      float* dst = g.data() + static_cast<std::size_t>(i) * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(av.shape()) + " ++ " + shape_str(bv.shape()));
  }
  const int n = av.dim(0);
  const std::size_t sa = av.size() / n, sb = bv.size() / n;
  Tensor out({n, av.dim(1) + bv.dim(1), av.dim(2), av.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * (sa + sb), av.data() + i * sa, sa * sizeof(float));
    std::memcpy(out.data() + i * (sa + sb) + sa, bv.data() + i * sb, sb * sizeof(float));
  }
  return Var::make(std::move(out), {a, b}, [n, sa, sb](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& in = *self.inputs[static_cast<std::size_t>(k)];
      if (!in.requires_grad) continue;
      Tensor& g = in.grad_buffer();
      const std::size_t len = k == 0 ? sa : sb;
      const std::size_t off = k == 0 ? 0 : sa;
      for (int i = 0; i < n; ++i) {
        const float* src = self.grad.data() + i * (sa + sb) + off;
        float* dst = g.data() + i * len;
        for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
      }
    }
  });
}

Var slice_channels(const Var& x, int begin, int count) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || begin < 0 || begin + count > xv.dim(1)) throw ShapeError("slice_channels out of range");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor out({n, count, xv.dim(2), xv.dim(3)});
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data() + i * count * hw, xv.data() + (i * c + begin) * hw, count * hw * sizeof(float));
  return Var::make(std::move(out), {x}, [n, c, begin, count, hw](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (int i = 0; i < n; ++i) {
      const float* src = self.grad.data() + i * count * hw;
      float* dst = g.data() + (i * c + begin) * hw;
      for (std::size_t j = 0; j < count * hw; ++j) dst[j] += src[j];
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (int i = 0; i < n * c; ++i) {
    const float* row = xv.data() + static_cast<std::size_t>(i) * hw;
    double s = 0.0;
    for (int j = 0; j < hw; ++j) s += row[j];
    out[static_cast<std::size_t>(i)] = static_cast<float>(s / hw);
  }
  return Var::make(std::move(out), {x}, [n, c, hw](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (int i = 0; i < n * c; ++i) {
      const float gi = self.grad[static_cast<std::size_t>(i)] / static_cast<float>(hw);
      float* row = g.data() + static_cast<std::size_t>(i) * hw;
      for (int j = 0; j < hw; ++j) row[j] += gi;
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups) {
  const Tensor& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int cg = c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cg) * hw;
  constexpr float eps = 1e-5f;
  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * groups);
  for (int i = 0; i < n; ++i) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cg) * hw;
      double s = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < gsize; ++j) {
        s += xv[off + j];
        s2 += static_cast<double>(xv[off + j]) * xv[off + j];
      }
      const double mean = s / gsize;
      const double var = std::max(0.0, s2 / gsize - mean * mean);
      const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
      (*inv_std)[static_cast<std::size_t>(i) * groups + gi] = is;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = gi * cg + cc;
        for (int j = 0; j < hw; ++j) {
          const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + j;
          const float xh = (xv[idx] - static_cast<float>(mean)) * is;
          (*xhat)[idx] = xh;
          out[idx] = xh * gamma.value()[static_cast<std::size_t>(ch)] + beta.value()[static_cast<std::size_t>(ch)];
        }
      }
    }
  }
  return Var::make(std::move(out), {x, gamma, beta}, [=](Node& self) {
    Node& xn = *self.inputs[0];
    Node& gn = *self.inputs[1];
    Node& bn = *self.inputs[2];
    const Tensor& dy = self.grad;
    if (gn.requires_grad || bn.requires_grad) {
      Tensor& gg = gn.grad_buffer();
      Tensor& gb = bn.grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
          float sg = 0.0f, sb = 0.0f;
          for (int j = 0; j < hw; ++j) {
            sg += dy[off + j] * (*xhat)[off + j];
            sb += dy[off + j];
          }
          gg[static_cast<std::size_t>(ch)] += sg;
          gb[static_cast<std::size_t>(ch)] += sb;
        }
    }
    if (!xn.requires_grad) return;
    Tensor& gx = xn.grad_buffer();
    for (int i = 0; i < n; ++i) {
      for (int gi = 0; gi < groups; ++gi) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cg) * hw;
        double m1 = 0.0, m2 = 0.0;
        for (int cc = 0; cc < cg; ++cc) {
          const float gm = gn.value[static_cast<std::size_t>(gi * cg + cc)];
          for (int j = 0; j < hw; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + j;
            const double d = dy[idx] * gm;
            m1 += d;
            m2 += d * (*xhat)[idx];
          }
        }
        m1 /= gsize;
        m2 /= gsize;
        const float is = (*inv_std)[static_cast<std::size_t>(i) * groups + gi];
        for (int cc = 0; cc < cg; ++cc) {
          const float gm = gn.value[static_cast<std::size_t>(gi * cg + cc)];
          for (int j = 0; j < hw; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + j;
            gx[idx] += is * static_cast<float>(dy[idx] * gm - m1 - (*xhat)[idx] * m2);
          }
        }
      }
    }
  });
}

Var flatten(const Var& x) {
  const int n = x.value().dim(0);
  const int k = static_cast<int>(x.value().size() / static_cast<std::size_t>(n));
  return Var::make(x.value().reshaped({n, k}), {x}, [](Node& self) {
    Node& in = *self.inputs[0];
    add_into(in.grad_buffer(), self.grad);
  });
}

Var gather_rows(const Var& table, const std::vector<int>& rows) {
  const Tensor& tv = table.value();
  const int v = tv.dim(0), d = tv.dim(1);
  Tensor out({static_cast<int>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= v) throw std::out_of_range("gather_rows: row index out of range");
    std::memcpy(out.data() + i * d, tv.data() + static_cast<std::size_t>(rows[i]) * d, d * sizeof(float));
  }
  return Var::make(std::move(out), {table}, [rows, d](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(rows[i]) * d + j] += self.grad[i * d + j];
  });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  const int n = xv.dim(0), d = xv.dim(1);
  Tensor out(xv.shape());
  auto norms = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(xv[i * d + j]) * xv[i * d + j];
    const float nr = static_cast<float>(std::max(std::sqrt(s), 1e-12));
    (*norms)[static_cast<std::size_t>(i)] = nr;
    for (int j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / nr;
  }
  return Var::make(std::move(out), {x}, [n, d, norms](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (int i = 0; i < n; ++i) {
      float dot = 0.0f;
      for (int j = 0; j < d; ++j) dot += self.grad[i * d + j] * self.value[i * d + j];
      const float nr = (*norms)[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) g[i * d + j] += (self.grad[i * d + j] - self.value[i * d + j] * dot) / nr;
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const int n = a.value().dim(0), d = a.value().dim(1), k = b.value().dim(0);
  if (b.value().dim(1) != d) throw ShapeError("matmul_nt: inner dims differ");
  Tensor out({n, k});
  MapR(out.data(), n, k).noalias() = CMapR(a.value().data(), n, d) * CMapR(b.value().data(), k, d).transpose();
  return Var::make(std::move(out), {a, b}, [n, d, k](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    CMapR gm(self.grad.data(), n, k);
    if (an.requires_grad) MapR(an.grad_buffer().data(), n, d).noalias() += gm * CMapR(bn.value.data(), k, d);
    if (bn.requires_grad) MapR(bn.grad_buffer().data(), k, d).noalias() += gm.transpose() * CMapR(an.value.data(), n, d);
  });
}

Var weighted_mse(const Var& pred, const Tensor& target, const Tensor& weight) {
  require_same_shape(pred.value(), target, "weighted_mse");
  require_same_shape(pred.value(), weight, "weighted_mse weight");
  const Tensor& p = pred.value();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - target[i];
    s += weight[i] * d * d;
  }
  const float inv = 1.0f / static_cast<float>(p.size());
  return Var::make(Tensor({1}, {static_cast<float>(s * inv)}), {pred}, [target, weight, inv](Node& self) {
    Node& pn = *self.inputs[0];
    Tensor& g = pn.grad_buffer();
    const float up = self.grad[0] * 2.0f * inv;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * weight[i] * (pn.value[i] - target[i]);
  });
}

Var mse(const Var& pred, const Tensor& target) {
  return weighted_mse(pred, target, Tensor(target.shape(), 1.0f));
}

Var gaussian_kl(const Var& mean, const Var& logvar) {
  require_same_shape(mean.value(), logvar.value(), "gaussian_kl");
  const Tensor& m = mean.value();
  const Tensor& lv = logvar.value();
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) s += 0.5 * (static_cast<double>(m[i]) * m[i] + std::exp(lv[i]) - 1.0 - lv[i]);
  const float inv = 1.0f / static_cast<float>(m.size());
  return Var::make(Tensor({1}, {static_cast<float>(s * inv)}), {mean, logvar}, [inv](Node& self) {
    Node& mn = *self.inputs[0];
    Node& ln = *self.inputs[1];
    const float up = self.grad[0] * inv;
    if (mn.requires_grad) {
      Tensor& g = mn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * mn.value[i];
    }
    if (ln.requires_grad) {
      Tensor& g = ln.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * 0.5f * (std::exp(ln.value[i]) - 1.0f);
    }
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& lv = logits.value();
  const int n = lv.dim(0), k = lv.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ShapeError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<Tensor>(lv.shape());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = lv.data() + static_cast<std::size_t>(i) * k;
    const float mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(i) * k + j] = static_cast<float>(std::exp(row[j] - mx) / z);
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw std::out_of_range("cross_entropy: label out of range");
    loss += -(row[y] - mx - std::log(z));
  }
  return Var::make(Tensor({1}, {static_cast<float>(loss / n)}), {logits}, [probs, labels, n, k](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    const float up = self.grad[0] / static_cast<float>(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const float t = j == labels[static_cast<std::size_t>(i)] ? 1.0f : 0.0f;
        g[static_cast<std::size_t>(i) * k + j] += up * ((*probs)[static_cast<std::size_t>(i) * k + j] - t);
      }
  });
}

}  // namespace bld::ag
