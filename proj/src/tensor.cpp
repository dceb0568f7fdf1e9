// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace diffmark {

using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

std::string Shape::str() const {
  return "(" + std::to_string(b) + "," + std::to_string(c) + "," + std::to_string(l) + ")";
}

Scalar* Node::grad() {
  if (param) {
    grad_ready = true;
    return param->grad.data();
  }
  if (gradbuf.empty()) gradbuf.assign(elems(), 0.0);
  grad_ready = true;
  return gradbuf.data();
}

void Node::accumulate(const Scalar* g, std::size_t n) {
  Scalar* dst = grad();
  for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

Node* Graph::make(Shape s, bool needs_grad) {
  auto n = std::make_unique<Node>();
  n->shape = s;
  n->storage.assign(s.elems(), 0.0);
  n->data = n->storage.data();
  n->needs_grad = needs_grad;
  Node* raw = n.get();
  nodes_.push_back(std::move(n));
  return raw;
}

Node* Graph::constant(Shape s, const Scalar* src) {
  Node* n = make(s, false);
  if (src) std::memcpy(n->data, src, s.elems() * sizeof(Scalar));
  return n;
}

Node* Graph::constant(Shape s, const std::vector<Scalar>& src) {
  if (src.size() != s.elems()) throw std::invalid_argument("constant: size mismatch");
  return constant(s, src.data());
}

Node* Graph::input(Shape s, const std::vector<Scalar>& src, bool needs_grad) {
  if (src.size() != s.elems()) throw std::invalid_argument("input: size mismatch");
  Node* n = make(s, needs_grad);
  std::memcpy(n->data, src.data(), src.size() * sizeof(Scalar));
  return n;
}

Node* Graph::param(Parameter& p) {
  auto n = std::make_unique<Node>();
  n->shape = p.shape;
  n->data = p.value.data();
  n->param = &p;
  n->needs_grad = !p.frozen;
  Node* raw = n.get();
  nodes_.push_back(std::move(n));
  return raw;
}

namespace {

void check_same_shape(Node* a, Node* b, const char* op) {
  if (!(a->shape == b->shape))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->shape.str() +
                                " vs " + b->shape.str());
}

}  // namespace

Node* Graph::add(Node* a, Node* b) { return axpby(1.0, a, 1.0, b); }
Node* Graph::sub(Node* a, Node* b) { return axpby(1.0, a, -1.0, b); }

Node* Graph::axpby(Scalar ka, Node* a, Scalar kb, Node* b) {
  check_same_shape(a, b, "axpby");
  Node* out = make(a->shape, a->needs_grad || b->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = ka * a->data[i] + kb * b->data[i];
  if (out->needs_grad) {
    out->backprop = [out, a, b, ka, kb, n](Graph&) {
      const Scalar* g = out->grad();
      if (a->needs_grad) {
        Scalar* ga = a->grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += ka * g[i];
      }
      if (b->needs_grad) {
        Scalar* gb = b->grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += kb * g[i];
      }
    };
  }
  return out;
}

Node* Graph::mul(Node* a, Node* b) {
  check_same_shape(a, b, "mul");
  Node* out = make(a->shape, a->needs_grad || b->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
  if (out->needs_grad) {
    out->backprop = [out, a, b, n](Graph&) {
      const Scalar* g = out->grad();
      if (a->needs_grad) {
        Scalar* ga = a->grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b->data[i];
      }
      if (b->needs_grad) {
        Scalar* gb = b->grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a->data[i];
      }
    };
  }
  return out;
}

Node* Graph::scale(Node* a, Scalar k) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = k * a->data[i];
  if (out->needs_grad) {
    out->backprop = [out, a, k, n](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += k * g[i];
    };
  }
  return out;
}

Node* Graph::add_scalar(Node* a, Scalar k) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] + k;
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) { a->accumulate(out->grad(), n); };
  }
  return out;
}

Node* Graph::add_const(Node* a, const std::vector<Scalar>& c) {
  if (c.size() != a->elems()) throw std::invalid_argument("add_const: size mismatch");
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] + c[i];
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) { a->accumulate(out->grad(), n); };
  }
  return out;
}

Node* Graph::mul_const(Node* a, const std::vector<Scalar>& c) {
  if (c.size() != a->elems()) throw std::invalid_argument("mul_const: size mismatch");
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * c[i];
  if (out->needs_grad) {
    std::vector<Scalar> cc = c;
    out->backprop = [out, a, n, cc = std::move(cc)](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * cc[i];
    };
  }
  return out;
}

Node* Graph::relu(Node* a) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] > 0 ? a->data[i] : 0.0;
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i)
        if (a->data[i] > 0) ga[i] += g[i];
    };
  }
  return out;
}

Node* Graph::leaky_relu(Node* a, Scalar slope) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i)
    out->data[i] = a->data[i] > 0 ? a->data[i] : slope * a->data[i];
  if (out->needs_grad) {
    out->backprop = [out, a, n, slope](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += (a->data[i] > 0 ? 1.0 : slope) * g[i];
    };
  }
  return out;
}

Node* Graph::sigmoid(Node* a) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = 1.0 / (1.0 + std::exp(-a->data[i]));
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) {
        Scalar y = out->data[i];
        ga[i] += g[i] * y * (1.0 - y);
      }
    };
  }
  return out;
}

Node* Graph::tanh_(Node* a) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = std::tanh(a->data[i]);
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) {
        Scalar y = out->data[i];
        ga[i] += g[i] * (1.0 - y * y);
      }
    };
  }
  return out;
}

Node* Graph::abs_(Node* a) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = std::fabs(a->data[i]);
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) {
        Scalar s = a->data[i] > 0 ? 1.0 : (a->data[i] < 0 ? -1.0 : 0.0);
        ga[i] += s * g[i];
      }
    };
  }
  return out;
}

Node* Graph::square(Node* a) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * a->data[i];
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += 2.0 * a->data[i] * g[i];
    };
  }
  return out;
}

Node* Graph::log_floored(Node* a, Scalar floor) {
  Node* out = make(a->shape, a->needs_grad);
  const std::size_t n = out->elems();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = std::log(std::max(a->data[i], floor));
  if (out->needs_grad) {
    out->backprop = [out, a, n, floor](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i)
        if (a->data[i] > floor) ga[i] += g[i] / a->data[i];
    };
  }
  return out;
}

Node* Graph::concat_c(Node* a, Node* b) {
  if (a->shape.b != b->shape.b || a->shape.l != b->shape.l)
    throw std::invalid_argument("concat_c: incompatible shapes");
  Shape s{a->shape.b, a->shape.c + b->shape.c, a->shape.l};
  Node* out = make(s, a->needs_grad || b->needs_grad);
  const int B = s.b, L = s.l, Ca = a->shape.c, Cb = b->shape.c;
  for (int bb = 0; bb < B; ++bb) {
    std::memcpy(out->data + (std::size_t(bb) * s.c) * L, a->data + std::size_t(bb) * Ca * L,
                std::size_t(Ca) * L * sizeof(Scalar));
    std::memcpy(out->data + (std::size_t(bb) * s.c + Ca) * L, b->data + std::size_t(bb) * Cb * L,
                std::size_t(Cb) * L * sizeof(Scalar));
  }
  if (out->needs_grad) {
    out->backprop = [out, a, b, B, L, Ca, Cb](Graph&) {
      const Scalar* g = out->grad();
      const int C = Ca + Cb;
      if (a->needs_grad) {
        Scalar* ga = a->grad();
        for (int bb = 0; bb < B; ++bb)
          for (std::size_t i = 0; i < std::size_t(Ca) * L; ++i)
            ga[std::size_t(bb) * Ca * L + i] += g[(std::size_t(bb) * C) * L + i];
      }
      if (b->needs_grad) {
        Scalar* gb = b->grad();
        for (int bb = 0; bb < B; ++bb)
          for (std::size_t i = 0; i < std::size_t(Cb) * L; ++i)
            gb[std::size_t(bb) * Cb * L + i] += g[(std::size_t(bb) * C + Ca) * L + i];
      }
    };
  }
  return out;
}

Node* Graph::slice_c(Node* a, int c0, int c1) {
  if (c0 < 0 || c1 > a->shape.c || c0 >= c1)
    throw std::invalid_argument("slice_c: bad channel range");
  Shape s{a->shape.b, c1 - c0, a->shape.l};
  Node* out = make(s, a->needs_grad);
  const int B = s.b, L = s.l, C = a->shape.c, Cs = s.c;
  for (int bb = 0; bb < B; ++bb)
    std::memcpy(out->data + std::size_t(bb) * Cs * L,
                a->data + (std::size_t(bb) * C + c0) * L, std::size_t(Cs) * L * sizeof(Scalar));
  if (out->needs_grad) {
    out->backprop = [out, a, B, L, C, Cs, c0](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (int bb = 0; bb < B; ++bb)
        for (std::size_t i = 0; i < std::size_t(Cs) * L; ++i)
          ga[(std::size_t(bb) * C + c0) * L + i] += g[std::size_t(bb) * Cs * L + i];
    };
  }
  return out;
}

Node* Graph::flatten(Node* a) {
  Shape s{a->shape.b, a->shape.c * a->shape.l, 1};
  Node* out = make(s, a->needs_grad);
  std::memcpy(out->data, a->data, a->elems() * sizeof(Scalar));
  if (out->needs_grad) {
    out->backprop = [out, a](Graph&) { a->accumulate(out->grad(), a->elems()); };
  }
  return out;
}

Node* Graph::trim_l(Node* a, int l) {
  if (l > a->shape.l) throw std::invalid_argument("trim_l: longer than input");
  Shape s{a->shape.b, a->shape.c, l};
  Node* out = make(s, a->needs_grad);
  const int B = s.b, C = s.c, La = a->shape.l;
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c)
      std::memcpy(out->data + (std::size_t(bb) * C + c) * l,
                  a->data + (std::size_t(bb) * C + c) * La, std::size_t(l) * sizeof(Scalar));
  if (out->needs_grad) {
    out->backprop = [out, a, B, C, La, l](Graph&) {
      const Scalar* g = out->grad();
      Scalar* ga = a->grad();
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < l; ++i)
            ga[(std::size_t(bb) * C + c) * La + i] += g[(std::size_t(bb) * C + c) * l + i];
    };
  }
  return out;
}

Node* Graph::broadcast_c(Node* a, Node* s) {
  if (s->shape.l != 1 || s->shape.b != a->shape.b || s->shape.c != a->shape.c)
    throw std::invalid_argument("broadcast_c: shape mismatch");
  Node* out = make(a->shape, a->needs_grad || s->needs_grad);
  const int B = a->shape.b, C = a->shape.c, L = a->shape.l;
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      Scalar v = s->data[std::size_t(bb) * C + c];
      const Scalar* pa = a->data + (std::size_t(bb) * C + c) * L;
      Scalar* po = out->data + (std::size_t(bb) * C + c) * L;
      for (int i = 0; i < L; ++i) po[i] = pa[i] + v;
    }
  if (out->needs_grad) {
    out->backprop = [out, a, s, B, C, L](Graph&) {
      const Scalar* g = out->grad();
      if (a->needs_grad) a->accumulate(g, a->elems());
      if (s->needs_grad) {
        Scalar* gs = s->grad();
        for (int bb = 0; bb < B; ++bb)
          for (int c = 0; c < C; ++c) {
            Scalar acc = 0;
            const Scalar* pg = g + (std::size_t(bb) * C + c) * L;
            for (int i = 0; i < L; ++i) acc += pg[i];
            gs[std::size_t(bb) * C + c] += acc;
          }
      }
    };
  }
  return out;
}

Node* Graph::linear(Node* x, Node* w, Node* bias) {
  if (x->shape.l != 1) throw std::invalid_argument("linear: expects (b,f,1) input");
  const int B = x->shape.b, F = x->shape.c, G = w->shape.b;
  if (w->shape.c != F || w->shape.l != 1)
    throw std::invalid_argument("linear: weight shape mismatch");
  if (bias && (bias->shape.elems() != std::size_t(G)))
    throw std::invalid_argument("linear: bias shape mismatch");
  Node* out = make(Shape{B, G, 1}, x->needs_grad || w->needs_grad ||
                                       (bias && bias->needs_grad));
  {
    CMapM X(x->data, B, F), W(w->data, G, F);
    MapM Y(out->data, B, G);
    Y.noalias() = X * W.transpose();
    if (bias)
      for (int bb = 0; bb < B; ++bb)
        for (int g = 0; g < G; ++g) out->data[std::size_t(bb) * G + g] += bias->data[g];
  }
  if (out->needs_grad) {
    out->backprop = [out, x, w, bias, B, F, G](Graph&) {
      CMapM GY(out->grad(), B, G);
      if (x->needs_grad) {
        CMapM W(w->data, G, F);
        MapM GX(x->grad(), B, F);
        GX.noalias() += GY * W;
      }
      if (w->needs_grad) {
        CMapM X(x->data, B, F);
        MapM GW(w->grad(), G, F);
        GW.noalias() += GY.transpose() * X;
      }
      if (bias && bias->needs_grad) {
        Scalar* gb = bias->grad();
        for (int bb = 0; bb < B; ++bb)
          for (int g = 0; g < G; ++g) gb[g] += GY(bb, g);
      }
    };
  }
  return out;
}

namespace {

// col[(ci*K + kk), t] = x[ci, t*stride - pad + kk*dil] (0 outside).
void im2col(const Scalar* x, int C, int Lin, int K, int stride, int pad, int dil,
            int Lout, Scalar* col) {
  for (int ci = 0; ci < C; ++ci) {
    for (int kk = 0; kk < K; ++kk) {
      Scalar* dst = col + (std::size_t(ci) * K + kk) * Lout;
      const Scalar* src = x + std::size_t(ci) * Lin;
      const int off = kk * dil - pad;
      for (int t = 0; t < Lout; ++t) {
        int idx = t * stride + off;
        dst[t] = (idx >= 0 && idx < Lin) ? src[idx] : 0.0;
      }
    }
  }
}

void col2im_add(const Scalar* col, int C, int Lin, int K, int stride, int pad,
                int dil, int Lout, Scalar* x) {
  for (int ci = 0; ci < C; ++ci) {
    for (int kk = 0; kk < K; ++kk) {
      const Scalar* src = col + (std::size_t(ci) * K + kk) * Lout;
      Scalar* dst = x + std::size_t(ci) * Lin;
      const int off = kk * dil - pad;
      for (int t = 0; t < Lout; ++t) {
        int idx = t * stride + off;
        if (idx >= 0 && idx < Lin) dst[idx] += src[t];
      }
    }
  }
}

}  // namespace

Node* Graph::conv1d(Node* x, Node* w, Node* bias, int stride, int pad, int dil) {
  const int B = x->shape.b, Cin = x->shape.c, Lin = x->shape.l;
  const int Cout = w->shape.b, K = w->shape.l;
  if (w->shape.c != Cin) throw std::invalid_argument("conv1d: channel mismatch");
  const int Lout = (Lin + 2 * pad - dil * (K - 1) - 1) / stride + 1;
  if (Lout <= 0) throw std::invalid_argument("conv1d: empty output");
  Node* out = make(Shape{B, Cout, Lout},
                   x->needs_grad || w->needs_grad || (bias && bias->needs_grad));
  const int Kc = Cin * K;
  {
    std::vector<Scalar> col(std::size_t(Kc) * Lout);
    CMapM W(w->data, Cout, Kc);
    for (int bb = 0; bb < B; ++bb) {
      im2col(x->data + std::size_t(bb) * Cin * Lin, Cin, Lin, K, stride, pad, dil,
             Lout, col.data());
      CMapM Col(col.data(), Kc, Lout);
      MapM Y(out->data + std::size_t(bb) * Cout * Lout, Cout, Lout);
      Y.noalias() = W * Col;
      if (bias)
        for (int co = 0; co < Cout; ++co) Y.row(co).array() += bias->data[co];
    }
  }
  if (out->needs_grad) {
    out->backprop = [out, x, w, bias, B, Cin, Lin, Cout, K, Kc, Lout, stride, pad,
                     dil](Graph&) {
      std::vector<Scalar> col(std::size_t(Kc) * Lout);
      std::vector<Scalar> colg;
      CMapM W(w->data, Cout, Kc);
      for (int bb = 0; bb < B; ++bb) {
        CMapM GY(out->grad() + std::size_t(bb) * Cout * Lout, Cout, Lout);
        if (w->needs_grad) {
          im2col(x->data + std::size_t(bb) * Cin * Lin, Cin, Lin, K, stride, pad,
                 dil, Lout, col.data());
          CMapM Col(col.data(), Kc, Lout);
          MapM GW(w->grad(), Cout, Kc);
          GW.noalias() += GY * Col.transpose();
        }
        if (x->needs_grad) {
          colg.assign(std::size_t(Kc) * Lout, 0.0);
          MapM CG(colg.data(), Kc, Lout);
          CG.noalias() = W.transpose() * GY;
          col2im_add(colg.data(), Cin, Lin, K, stride, pad, dil, Lout,
                     x->grad() + std::size_t(bb) * Cin * Lin);
        }
        if (bias && bias->needs_grad) {
          Scalar* gb = bias->grad();
          for (int co = 0; co < Cout; ++co) gb[co] += GY.row(co).sum();
        }
      }
    };
  }
  return out;
}

Node* Graph::conv1d_add(Node* x, Node* w, Node* bias, Node* base, int stride,
                        int pad, int dil) {
  Node* y = conv1d(x, w, bias, stride, pad, dil);
  if (!(y->shape == base->shape))
    throw std::invalid_argument("conv1d_add: base shape mismatch");
  // Cheap fuse: add in place into the conv output and chain the backprop.
  if (base->needs_grad && !y->needs_grad) return add(y, base);
  const std::size_t n = y->elems();
  for (std::size_t i = 0; i < n; ++i) y->data[i] += base->data[i];
  if (y->needs_grad && base->needs_grad) {
    auto prev = y->backprop;
    y->backprop = [y, base, n, prev = std::move(prev)](Graph& g) {
      base->accumulate(y->grad(), n);
      if (prev) prev(g);
    };
  }
  return y;
}

Node* Graph::gated_unit(Node* z) {
  const int B = z->shape.b, C2 = z->shape.c, L = z->shape.l;
  if (C2 % 2 != 0) throw std::invalid_argument("gated_unit: even channel count required");
  const int R = C2 / 2;
  Node* out = make(Shape{B, R, L}, z->needs_grad);
  for (int bb = 0; bb < B; ++bb) {
    const Scalar* zt = z->data + (std::size_t(bb) * C2) * L;
    const Scalar* zs = z->data + (std::size_t(bb) * C2 + R) * L;
    Scalar* po = out->data + std::size_t(bb) * R * L;
    for (std::size_t i = 0; i < std::size_t(R) * L; ++i)
      po[i] = std::tanh(zt[i]) / (1.0 + std::exp(-zs[i]));
  }
  if (out->needs_grad) {
    out->backprop = [out, z, B, C2, R, L](Graph&) {
      const Scalar* g = out->grad();
      Scalar* gz = z->grad();
      for (int bb = 0; bb < B; ++bb) {
        const Scalar* zt = z->data + (std::size_t(bb) * C2) * L;
        const Scalar* zs = z->data + (std::size_t(bb) * C2 + R) * L;
        Scalar* gt = gz + (std::size_t(bb) * C2) * L;
        Scalar* gs = gz + (std::size_t(bb) * C2 + R) * L;
        const Scalar* go = g + std::size_t(bb) * R * L;
        for (std::size_t i = 0; i < std::size_t(R) * L; ++i) {
          const Scalar th = std::tanh(zt[i]);
          const Scalar sg = 1.0 / (1.0 + std::exp(-zs[i]));
          gt[i] += go[i] * (1.0 - th * th) * sg;
          gs[i] += go[i] * th * sg * (1.0 - sg);
        }
      }
    };
  }
  return out;
}

Node* Graph::conv_transpose1d(Node* x, Node* w, Node* bias, int stride, int pad,
                              int output_pad) {
  const int B = x->shape.b, Cin = x->shape.c, Lin = x->shape.l;
  const int Cout = w->shape.c, K = w->shape.l;
  if (w->shape.b != Cin) throw std::invalid_argument("conv_transpose1d: channel mismatch");
  const int Lout = (Lin - 1) * stride - 2 * pad + K + output_pad;
  if (Lout <= 0) throw std::invalid_argument("conv_transpose1d: empty output");
  const int Kc = Cout * K;
  Node* out = make(Shape{B, Cout, Lout},
                   x->needs_grad || w->needs_grad || (bias && bias->needs_grad));
  {
    std::vector<Scalar> col(std::size_t(Kc) * Lin);
    CMapM W(w->data, Cin, Kc);
    for (int bb = 0; bb < B; ++bb) {
      CMapM X(x->data + std::size_t(bb) * Cin * Lin, Cin, Lin);
      MapM Col(col.data(), Kc, Lin);
      Col.noalias() = W.transpose() * X;
      Scalar* y = out->data + std::size_t(bb) * Cout * Lout;
      for (int co = 0; co < Cout; ++co) {
        for (int kk = 0; kk < K; ++kk) {
          const Scalar* src = col.data() + (std::size_t(co) * K + kk) * Lin;
          const int off = kk - pad;
          for (int t = 0; t < Lin; ++t) {
            int idx = t * stride + off;
            if (idx >= 0 && idx < Lout) y[std::size_t(co) * Lout + idx] += src[t];
          }
        }
        if (bias)
          for (int i = 0; i < Lout; ++i) y[std::size_t(co) * Lout + i] += bias->data[co];
      }
    }
  }
  if (out->needs_grad) {
    out->backprop = [out, x, w, bias, B, Cin, Lin, Cout, K, Kc, Lout, stride,
                     pad](Graph&) {
      std::vector<Scalar> gat(std::size_t(Kc) * Lin);
      for (int bb = 0; bb < B; ++bb) {
        const Scalar* gy = out->grad() + std::size_t(bb) * Cout * Lout;
        // gather[(co*K+kk), t] = gy[co, t*stride - pad + kk]
        for (int co = 0; co < Cout; ++co) {
          for (int kk = 0; kk < K; ++kk) {
            Scalar* dst = gat.data() + (std::size_t(co) * K + kk) * Lin;
            const int off = kk - pad;
            for (int t = 0; t < Lin; ++t) {
              int idx = t * stride + off;
              dst[t] = (idx >= 0 && idx < Lout) ? gy[std::size_t(co) * Lout + idx] : 0.0;
            }
          }
        }
        CMapM G(gat.data(), Kc, Lin);
        if (x->needs_grad) {
          CMapM W(w->data, Cin, Kc);
          MapM GX(x->grad() + std::size_t(bb) * Cin * Lin, Cin, Lin);
          GX.noalias() += W * G;
        }
        if (w->needs_grad) {
          CMapM X(x->data + std::size_t(bb) * Cin * Lin, Cin, Lin);
          MapM GW(w->grad(), Cin, Kc);
          GW.noalias() += X * G.transpose();
        }
        if (bias && bias->needs_grad) {
          Scalar* gb = bias->grad();
          for (int co = 0; co < Cout; ++co) {
            Scalar acc = 0;
            for (int i = 0; i < Lout; ++i) acc += gy[std::size_t(co) * Lout + i];
            gb[co] += acc;
          }
        }
      }
    };
  }
  return out;
}

Node* Graph::channel_matmul(Node* x, const std::vector<Scalar>& m, int rows) {
  const int B = x->shape.b, C = x->shape.c, L = x->shape.l;
  if (m.size() != std::size_t(rows) * C)
    throw std::invalid_argument("channel_matmul: matrix size mismatch");
  Node* out = make(Shape{B, rows, L}, x->needs_grad);
  CMapM M(m.data(), rows, C);
  for (int bb = 0; bb < B; ++bb) {
    CMapM X(x->data + std::size_t(bb) * C * L, C, L);
    MapM Y(out->data + std::size_t(bb) * rows * L, rows, L);
    Y.noalias() = M * X;
  }
  if (out->needs_grad) {
    std::vector<Scalar> mc = m;
    out->backprop = [out, x, B, C, L, rows, mc = std::move(mc)](Graph&) {
      CMapM M(mc.data(), rows, C);
      for (int bb = 0; bb < B; ++bb) {
        CMapM GY(out->grad() + std::size_t(bb) * rows * L, rows, L);
        MapM GX(x->grad() + std::size_t(bb) * C * L, C, L);
        GX.noalias() += M.transpose() * GY;
      }
    };
  }
  return out;
}

Node* Graph::batchnorm(Node* x, Node* gamma, Node* beta, BnStats* stats,
                       bool training, Scalar momentum, Scalar eps) {
  const int B = x->shape.b, C = x->shape.c, L = x->shape.l;
  if (gamma->shape.elems() != std::size_t(C) || beta->shape.elems() != std::size_t(C))
    throw std::invalid_argument("batchnorm: affine shape mismatch");
  if (stats && stats->running_mean.empty()) {
    stats->running_mean.assign(C, 0.0);
    stats->running_var.assign(C, 1.0);
  }
  Node* out = make(x->shape, x->needs_grad || gamma->needs_grad || beta->needs_grad);
  const Scalar n = Scalar(B) * Scalar(L);

  if (training) {
    auto mean = std::make_shared<std::vector<Scalar>>(C, 0.0);
    auto inv_std = std::make_shared<std::vector<Scalar>>(C, 0.0);
    auto xhat = std::make_shared<std::vector<Scalar>>(x->elems());
    for (int c = 0; c < C; ++c) {
      Scalar mu = 0;
      for (int bb = 0; bb < B; ++bb) {
        const Scalar* p = x->data + (std::size_t(bb) * C + c) * L;
        for (int i = 0; i < L; ++i) mu += p[i];
      }
      mu /= n;
      Scalar var = 0;
      for (int bb = 0; bb < B; ++bb) {
        const Scalar* p = x->data + (std::size_t(bb) * C + c) * L;
        for (int i = 0; i < L; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= n;
      (*mean)[c] = mu;
      (*inv_std)[c] = 1.0 / std::sqrt(var + eps);
      if (stats) {
        stats->running_mean[c] = (1 - momentum) * stats->running_mean[c] + momentum * mu;
        stats->running_var[c] = (1 - momentum) * stats->running_var[c] + momentum * var;
      }
      Scalar g = gamma->data[c], b = beta->data[c], is = (*inv_std)[c];
      for (int bb = 0; bb < B; ++bb) {
        const Scalar* p = x->data + (std::size_t(bb) * C + c) * L;
        Scalar* ph = xhat->data() + (std::size_t(bb) * C + c) * L;
        Scalar* po = out->data + (std::size_t(bb) * C + c) * L;
        for (int i = 0; i < L; ++i) {
          ph[i] = (p[i] - mu) * is;
          po[i] = g * ph[i] + b;
        }
      }
    }
    if (out->needs_grad) {
      out->backprop = [out, x, gamma, beta, B, C, L, n, inv_std, xhat](Graph&) {
        const Scalar* gy = out->grad();
        for (int c = 0; c < C; ++c) {
          Scalar sum_gy = 0, sum_gy_xhat = 0;
          for (int bb = 0; bb < B; ++bb) {
            const Scalar* pg = gy + (std::size_t(bb) * C + c) * L;
            const Scalar* ph = xhat->data() + (std::size_t(bb) * C + c) * L;
            for (int i = 0; i < L; ++i) {
              sum_gy += pg[i];
              sum_gy_xhat += pg[i] * ph[i];
            }
          }
          if (gamma->needs_grad) gamma->grad()[c] += sum_gy_xhat;
          if (beta->needs_grad) beta->grad()[c] += sum_gy;
          if (x->needs_grad) {
            Scalar g = gamma->data[c], is = (*inv_std)[c];
            Scalar k = g * is / n;
            Scalar* gx = x->grad();
            for (int bb = 0; bb < B; ++bb) {
              const Scalar* pg = gy + (std::size_t(bb) * C + c) * L;
              const Scalar* ph = xhat->data() + (std::size_t(bb) * C + c) * L;
              Scalar* px = gx + (std::size_t(bb) * C + c) * L;
              for (int i = 0; i < L; ++i)
                px[i] += k * (n * pg[i] - sum_gy - ph[i] * sum_gy_xhat);
            }
          }
        }
      };
    }
  } else {
    if (!stats) throw std::invalid_argument("batchnorm: eval mode needs stats");
    std::vector<Scalar> scale(C), shift(C);
    for (int c = 0; c < C; ++c) {
      Scalar is = 1.0 / std::sqrt(stats->running_var[c] + eps);
      scale[c] = gamma->data[c] * is;
      shift[c] = beta->data[c] - stats->running_mean[c] * scale[c];
    }
    for (int bb = 0; bb < B; ++bb)
      for (int c = 0; c < C; ++c) {
        const Scalar* p = x->data + (std::size_t(bb) * C + c) * L;
        Scalar* po = out->data + (std::size_t(bb) * C + c) * L;
        for (int i = 0; i < L; ++i) po[i] = scale[c] * p[i] + shift[c];
      }
    if (out->needs_grad) {
      auto sc = std::make_shared<std::vector<Scalar>>(scale);
      out->backprop = [out, x, gamma, beta, B, C, L, sc](Graph&) {
        const Scalar* gy = out->grad();
        // Running-stat mode: y = scale*x + shift, so dx is a plain rescale.
        if (x->needs_grad) {
          Scalar* gx = x->grad();
          for (int bb = 0; bb < B; ++bb)
            for (int c = 0; c < C; ++c) {
              const Scalar* pg = gy + (std::size_t(bb) * C + c) * L;
              Scalar* px = gx + (std::size_t(bb) * C + c) * L;
              for (int i = 0; i < L; ++i) px[i] += (*sc)[c] * pg[i];
            }
        }
      };
    }
  }
  return out;
}

Node* Graph::sum_all(Node* a) {
  Node* out = make(Shape{1, 1, 1}, a->needs_grad);
  Scalar acc = 0;
  const std::size_t n = a->elems();
  for (std::size_t i = 0; i < n; ++i) acc += a->data[i];
  out->data[0] = acc;
  if (out->needs_grad) {
    out->backprop = [out, a, n](Graph&) {
      Scalar g = out->grad()[0];
      Scalar* ga = a->grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    };
  }
  return out;
}

Node* Graph::mean_all(Node* a) { return scale(sum_all(a), 1.0 / Scalar(a->elems())); }

Node* Graph::bce_sum(Node* probs, const std::vector<Scalar>& targets, Scalar eps) {
  const int B = probs->shape.b;
  const std::size_t per = std::size_t(probs->shape.c) * probs->shape.l;
  if (targets.size() != per)
    throw std::invalid_argument("bce_sum: target length mismatch");
  Node* out = make(Shape{1, 1, 1}, probs->needs_grad);
  Scalar acc = 0;
  for (int bb = 0; bb < B; ++bb) {
    const Scalar* p = probs->data + std::size_t(bb) * per;
    for (std::size_t i = 0; i < per; ++i) {
      Scalar pc = std::clamp(p[i], eps, 1.0 - eps);
      acc -= targets[i] * std::log(pc) + (1.0 - targets[i]) * std::log(1.0 - pc);
    }
  }
  out->data[0] = acc / Scalar(B);
  if (out->needs_grad) {
    std::vector<Scalar> t = targets;
    out->backprop = [out, probs, B, per, eps, t = std::move(t)](Graph&) {
      Scalar g = out->grad()[0] / Scalar(B);
      Scalar* gp = probs->grad();
      for (int bb = 0; bb < B; ++bb) {
        const Scalar* p = probs->data + std::size_t(bb) * per;
        for (std::size_t i = 0; i < per; ++i) {
          if (p[i] <= eps || p[i] >= 1.0 - eps) continue;  // clamp region
          gp[std::size_t(bb) * per + i] += g * (p[i] - t[i]) / (p[i] * (1.0 - p[i]));
        }
      }
    };
  }
  return out;
}

Node* Graph::l1_mean(Node* a, Node* b) {
  check_same_shape(a, b, "l1_mean");
  Node* out = make(Shape{1, 1, 1}, a->needs_grad || b->needs_grad);
  const std::size_t n = a->elems();
  Scalar acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::fabs(a->data[i] - b->data[i]);
  out->data[0] = acc / Scalar(n);
  if (out->needs_grad) {
    out->backprop = [out, a, b, n](Graph&) {
      Scalar g = out->grad()[0] / Scalar(n);
      Scalar* ga = a->needs_grad ? a->grad() : nullptr;
      Scalar* gb = b->needs_grad ? b->grad() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        Scalar d = a->data[i] - b->data[i];
        Scalar s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        if (ga) ga[i] += g * s;
        if (gb) gb[i] -= g * s;
      }
    };
  }
  return out;
}

Node* Graph::straight_through(
    Node* x, std::function<void(const Scalar*, Scalar*, std::size_t)> fn) {
  Node* out = make(x->shape, x->needs_grad);
  fn(x->data, out->data, x->elems());
  if (out->needs_grad) {
    out->backprop = [out, x](Graph&) { x->accumulate(out->grad(), x->elems()); };
  }
  return out;
}

Node* Graph::linear_map(Node* x,
                        std::function<void(const Scalar*, Scalar*, std::size_t)> fn,
                        std::function<void(const Scalar*, Scalar*, std::size_t)> adjoint) {
  Node* out = make(x->shape, x->needs_grad);
  fn(x->data, out->data, x->elems());
  if (out->needs_grad) {
    out->backprop = [out, x, adjoint = std::move(adjoint)](Graph&) {
      std::vector<Scalar> gx(x->elems(), 0.0);
      adjoint(out->grad(), gx.data(), x->elems());
      x->accumulate(gx.data(), x->elems());
    };
  }
  return out;
}

void Graph::backward(Node* loss) {
  if (loss->elems() != 1) throw std::invalid_argument("backward: loss must be scalar");
  loss->grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = it->get();
    if (n->grad_ready && n->backprop) n->backprop(*this);
    if (free_on_backward_ && !n->param) {
      // All consumers (later nodes) and this node's own backprop are done.
      std::vector<Scalar>().swap(n->storage);
      std::vector<Scalar>().swap(n->gradbuf);
      n->data = nullptr;
      n->backprop = nullptr;  // drop closure captures (cached stft re/im etc.)
    }
  }
}

std::vector<Scalar> finite_diff(const std::function<Scalar(const std::vector<Scalar>&)>& f,
                                std::vector<Scalar> x, Scalar h) {
  std::vector<Scalar> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Scalar orig = x[i];
    x[i] = orig + h;
    Scalar fp = f(x);
    x[i] = orig - h;
    Scalar fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace diffmark
