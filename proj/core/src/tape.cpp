#include "metadet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace metadet {

namespace {

template <typename T>
void accum(TensorT<T>& dst, const TensorT<T>& add) {
  T* d = dst.data.data();
  const T* a = add.data.data();
  for (int64_t i = 0, n = dst.size(); i < n; ++i) d[i] += a[i];
}

[[noreturn]] void fail(const char* op, const std::string& why) {
  throw std::invalid_argument(std::string(op) + ": " + why);
}

}  // namespace

template <typename T>
auto TapeT<T>::make(TensorT<T> value, bool needs_grad, const char* op) -> Var {
  if (!value.all_finite())
    throw std::runtime_error(std::string(op) + ": non-finite output");
  Slot s;
  s.needs_grad = needs_grad && recording_;
  if (s.needs_grad) s.grad = TensorT<T>::zeros(value.shape);
  s.value = std::move(value);
  slots_.push_back(std::move(s));
  return Var{int32_t(slots_.size() - 1)};
}

template <typename T>
auto TapeT<T>::input(TensorT<T> v) -> Var {
  return make(std::move(v), false, "input");
}

template <typename T>
auto TapeT<T>::param(TensorT<T> v) -> Var {
  return make(std::move(v), true, "param");
}

template <typename T>
const TensorT<T>& TapeT<T>::grad(Var v) const {
  const Slot& s = slot(v);
  if (!s.needs_grad) throw std::logic_error("grad: var does not track gradients");
  return s.grad;
}

template <typename T>
void TapeT<T>::seed_grad(Var v, const TensorT<T>& g) {
  Slot& s = slot(v);
  if (!s.needs_grad) throw std::logic_error("seed_grad: var does not track gradients");
  if (!s.grad.same_shape(g)) fail("seed_grad", "shape mismatch " + s.grad.shape_str() + " vs " + g.shape_str());
  accum(s.grad, g);
}

template <typename T>
void TapeT<T>::backward(Var loss) {
  if (!recording_) throw std::logic_error("backward: tape is in inference mode");
  if (ran_backward_) throw std::logic_error("backward: already ran on this tape");
  ran_backward_ = true;
  Slot& s = slot(loss);
  if (s.value.size() != 1) fail("backward", "loss must be a scalar, got " + s.value.shape_str());
  if (!s.needs_grad) throw std::logic_error("backward: loss does not depend on any parameter");
  s.grad[0] += T(1);
  for (size_t i = nodes_.size(); i > 0; --i) nodes_[i - 1]();
  for (const Slot& sl : slots_)
    if (sl.needs_grad && !sl.grad.all_finite())
      throw std::runtime_error("backward: non-finite gradient");
}

// --- conv2d ----------------------------------------------------------------

template <typename T>
auto TapeT<T>::conv2d(Var xv, Var wv, Var bv, int stride, int pad) -> Var {
  const TensorT<T>& x = val(xv);
  const TensorT<T>& w = val(wv);
  const TensorT<T>& b = val(bv);
  if (x.ndim() != 3) fail("conv2d", "input must be {H,W,C}, got " + x.shape_str());
  if (w.ndim() != 4) fail("conv2d", "kernel must be {k,k,Cin,Cout}, got " + w.shape_str());
  if (w.dim(0) != w.dim(1)) fail("conv2d", "kernel must be square, got " + w.shape_str());
  if (w.dim(2) != x.dim(2))
    fail("conv2d", "channel mismatch: input " + x.shape_str() + " vs kernel " + w.shape_str());
  if (b.ndim() != 1 || b.dim(0) != w.dim(3))
    fail("conv2d", "bias must be {Cout}, got " + b.shape_str());
  if (stride < 1) fail("conv2d", "stride must be >= 1");
  if (pad < 0) fail("conv2d", "pad must be >= 0");

  const int H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  const int K = w.dim(0), Cout = w.dim(3);
  const int Ho = (H + 2 * pad - K) / stride + 1;
  const int Wo = (W + 2 * pad - K) / stride + 1;
  if (H + 2 * pad < K || W + 2 * pad < K || Ho <= 0 || Wo <= 0)
    fail("conv2d", "kernel " + w.shape_str() + " does not fit input " + x.shape_str() +
                       " with pad " + std::to_string(pad));

  TensorT<T> out({Ho, Wo, Cout});
  const T* xp = x.data.data();
  const T* wp = w.data.data();
  const T* bp = b.data.data();
  T* op = out.data.data();
  for (int ho = 0; ho < Ho; ++ho) {
    for (int wo = 0; wo < Wo; ++wo) {
      T* acc = op + (int64_t(ho) * Wo + wo) * Cout;
      for (int co = 0; co < Cout; ++co) acc[co] = bp[co];
      for (int kh = 0; kh < K; ++kh) {
        const int hi = ho * stride - pad + kh;
        if (hi < 0 || hi >= H) continue;
        for (int kw = 0; kw < K; ++kw) {
          const int wi = wo * stride - pad + kw;
          if (wi < 0 || wi >= W) continue;
          const T* xrow = xp + (int64_t(hi) * W + wi) * Cin;
          const T* wrow = wp + (int64_t(kh) * K + kw) * Cin * Cout;
          for (int ci = 0; ci < Cin; ++ci) {
            const T xval = xrow[ci];
            const T* wc = wrow + int64_t(ci) * Cout;
            for (int co = 0; co < Cout; ++co) acc[co] += xval * wc[co];
          }
        }
      }
    }
  }

  bool ng = track(xv) || track(wv) || track(bv);
  Var outv = make(std::move(out), ng, "conv2d");
  if (ng) {
    push([this, xv, wv, bv, outv, stride, pad, H, W, Cin, K, Cout, Ho, Wo] {
      const TensorT<T>& g = slot(outv).grad;
      const T* gp = g.data.data();
      const T* xp2 = slot(xv).value.data.data();
      const T* wp2 = slot(wv).value.data.data();
      const bool need_x = slot(xv).needs_grad;
      const bool need_w = slot(wv).needs_grad;
      const bool need_b = slot(bv).needs_grad;
      T* gx = need_x ? slot(xv).grad.data.data() : nullptr;
      T* gw = need_w ? slot(wv).grad.data.data() : nullptr;
      T* gb = need_b ? slot(bv).grad.data.data() : nullptr;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          const T* grow = gp + (int64_t(ho) * Wo + wo) * Cout;
          if (need_b)
            for (int co = 0; co < Cout; ++co) gb[co] += grow[co];
          for (int kh = 0; kh < K; ++kh) {
            const int hi = ho * stride - pad + kh;
            if (hi < 0 || hi >= H) continue;
            for (int kw = 0; kw < K; ++kw) {
              const int wi = wo * stride - pad + kw;
              if (wi < 0 || wi >= W) continue;
              const int64_t xoff = (int64_t(hi) * W + wi) * Cin;
              const int64_t woff = (int64_t(kh) * K + kw) * Cin * Cout;
              for (int ci = 0; ci < Cin; ++ci) {
                const T* wc = wp2 + woff + int64_t(ci) * Cout;
                if (need_x) {
                  T s = 0;
                  for (int co = 0; co < Cout; ++co) s += grow[co] * wc[co];
                  gx[xoff + ci] += s;
                }
                if (need_w) {
                  const T xval = xp2[xoff + ci];
                  T* gwc = gw + woff + int64_t(ci) * Cout;
                  for (int co = 0; co < Cout; ++co) gwc[co] += xval * grow[co];
                }
              }
            }
          }
        }
      }
    });
  }
  return outv;
}

// --- pointwise ---------------------------------------------------------------

template <typename T>
auto TapeT<T>::relu(Var xv) -> Var {
  const TensorT<T>& x = val(xv);
  TensorT<T> out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "relu");
  if (ng) {
    push([this, xv, outv] {
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& x2 = slot(xv).value;
      TensorT<T>& gx = slot(xv).grad;
      for (int64_t i = 0; i < g.size(); ++i)
        if (x2[i] > T(0)) gx[i] += g[i];
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::sigmoid(Var xv) -> Var {
  const TensorT<T>& x = val(xv);
  TensorT<T> out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) {
    double z = double(x[i]);
    out[i] = T(z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
  }
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "sigmoid");
  if (ng) {
    push([this, xv, outv] {
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& y = slot(outv).value;
      TensorT<T>& gx = slot(xv).grad;
      for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::add(Var av, Var bv) -> Var {
  const TensorT<T>& a = val(av);
  const TensorT<T>& b = val(bv);
  if (!a.same_shape(b)) fail("add", "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  TensorT<T> out(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  bool ng = track(av) || track(bv);
  Var outv = make(std::move(out), ng, "add");
  if (ng) {
    push([this, av, bv, outv] {
      const TensorT<T>& g = slot(outv).grad;
      if (slot(av).needs_grad) accum(slot(av).grad, g);
      if (slot(bv).needs_grad) accum(slot(bv).grad, g);
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::sub(Var av, Var bv) -> Var {
  const TensorT<T>& a = val(av);
  const TensorT<T>& b = val(bv);
  if (!a.same_shape(b)) fail("sub", "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  TensorT<T> out(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  bool ng = track(av) || track(bv);
  Var outv = make(std::move(out), ng, "sub");
  if (ng) {
    push([this, av, bv, outv] {
      const TensorT<T>& g = slot(outv).grad;
      if (slot(av).needs_grad) accum(slot(av).grad, g);
      if (slot(bv).needs_grad) {
        TensorT<T>& gb = slot(bv).grad;
        for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::mul(Var av, Var bv) -> Var {
  const TensorT<T>& a = val(av);
  const TensorT<T>& b = val(bv);
  if (!a.same_shape(b)) fail("mul", "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  TensorT<T> out(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  bool ng = track(av) || track(bv);
  Var outv = make(std::move(out), ng, "mul");
  if (ng) {
    push([this, av, bv, outv] {
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& a2 = slot(av).value;
      const TensorT<T>& b2 = slot(bv).value;
      if (slot(av).needs_grad) {
        TensorT<T>& ga = slot(av).grad;
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b2[i];
      }
      if (slot(bv).needs_grad) {
        TensorT<T>& gb = slot(bv).grad;
        for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a2[i];
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::scale_const(Var xv, double c) -> Var {
  const TensorT<T>& x = val(xv);
  TensorT<T> out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) out[i] = T(double(x[i]) * c);
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "scale_const");
  if (ng) {
    push([this, xv, outv, c] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& gx = slot(xv).grad;
      for (int64_t i = 0; i < g.size(); ++i) gx[i] += T(double(g[i]) * c);
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::scale_var(Var xv, Var sv) -> Var {
  const TensorT<T>& x = val(xv);
  const TensorT<T>& s = val(sv);
  if (s.size() != 1) fail("scale_var", "scale must be a {1} tensor, got " + s.shape_str());
  const T sval = s[0];
  TensorT<T> out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) out[i] = x[i] * sval;
  bool ng = track(xv) || track(sv);
  Var outv = make(std::move(out), ng, "scale_var");
  if (ng) {
    push([this, xv, sv, outv] {
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& x2 = slot(xv).value;
      const T s2 = slot(sv).value[0];
      if (slot(xv).needs_grad) {
        TensorT<T>& gx = slot(xv).grad;
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s2;
      }
      if (slot(sv).needs_grad) {
        T acc = 0;
        for (int64_t i = 0; i < g.size(); ++i) acc += g[i] * x2[i];
        slot(sv).grad[0] += acc;
      }
    });
  }
  return outv;
}

// --- shape ops ----------------------------------------------------------------

template <typename T>
auto TapeT<T>::broadcast_spatial(Var vv, int h, int w) -> Var {
  const TensorT<T>& v = val(vv);
  if (v.ndim() != 1) fail("broadcast_spatial", "expected {C}, got " + v.shape_str());
  if (h <= 0 || w <= 0) fail("broadcast_spatial", "non-positive spatial dims");
  const int C = v.dim(0);
  TensorT<T> out({h, w, C});
  for (int64_t p = 0; p < int64_t(h) * w; ++p)
    for (int c = 0; c < C; ++c) out[p * C + c] = v[c];
  bool ng = track(vv);
  Var outv = make(std::move(out), ng, "broadcast_spatial");
  if (ng) {
    push([this, vv, outv, h, w, C] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& gv = slot(vv).grad;
      for (int64_t p = 0; p < int64_t(h) * w; ++p)
        for (int c = 0; c < C; ++c) gv[c] += g[p * C + c];
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::broadcast_channel(Var mv, int c) -> Var {
  const TensorT<T>& m = val(mv);
  if (m.ndim() != 2) fail("broadcast_channel", "expected {H,W}, got " + m.shape_str());
  if (c <= 0) fail("broadcast_channel", "non-positive channel count");
  const int H = m.dim(0), W = m.dim(1);
  TensorT<T> out({H, W, c});
  for (int64_t p = 0; p < int64_t(H) * W; ++p)
    for (int k = 0; k < c; ++k) out[p * c + k] = m[p];
  bool ng = track(mv);
  Var outv = make(std::move(out), ng, "broadcast_channel");
  if (ng) {
    push([this, mv, outv, H, W, c] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& gm = slot(mv).grad;
      for (int64_t p = 0; p < int64_t(H) * W; ++p) {
        T acc = 0;
        for (int k = 0; k < c; ++k) acc += g[p * c + k];
        gm[p] += acc;
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::concat_channels(Var av, Var bv) -> Var {
  const TensorT<T>& a = val(av);
  const TensorT<T>& b = val(bv);
  if (a.ndim() != 3 || b.ndim() != 3)
    fail("concat_channels", "expected {H,W,C} inputs");
  if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1))
    fail("concat_channels", "spatial mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int H = a.dim(0), W = a.dim(1), Ca = a.dim(2), Cb = b.dim(2);
  TensorT<T> out({H, W, Ca + Cb});
  for (int64_t p = 0; p < int64_t(H) * W; ++p) {
    for (int c = 0; c < Ca; ++c) out[p * (Ca + Cb) + c] = a[p * Ca + c];
    for (int c = 0; c < Cb; ++c) out[p * (Ca + Cb) + Ca + c] = b[p * Cb + c];
  }
  bool ng = track(av) || track(bv);
  Var outv = make(std::move(out), ng, "concat_channels");
  if (ng) {
    push([this, av, bv, outv, H, W, Ca, Cb] {
      const TensorT<T>& g = slot(outv).grad;
      for (int64_t p = 0; p < int64_t(H) * W; ++p) {
        if (slot(av).needs_grad) {
          TensorT<T>& ga = slot(av).grad;
          for (int c = 0; c < Ca; ++c) ga[p * Ca + c] += g[p * (Ca + Cb) + c];
        }
        if (slot(bv).needs_grad) {
          TensorT<T>& gb = slot(bv).grad;
          for (int c = 0; c < Cb; ++c) gb[p * Cb + c] += g[p * (Ca + Cb) + Ca + c];
        }
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::reshape(Var xv, std::vector<int> shape) -> Var {
  const TensorT<T>& x = val(xv);
  if (TensorT<T>::count(shape) != x.size())
    fail("reshape", "element count mismatch: " + x.shape_str());
  TensorT<T> out(std::move(shape), x.data);
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "reshape");
  if (ng) {
    push([this, xv, outv] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& gx = slot(xv).grad;
      for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::matmul(Var av, Var bv) -> Var {
  const TensorT<T>& a = val(av);
  const TensorT<T>& b = val(bv);
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    fail("matmul", "incompatible shapes " + a.shape_str() + " x " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    T* orow = out.data.data() + int64_t(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const T av2 = a[int64_t(i) * k + kk];
      const T* brow = b.data.data() + int64_t(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += av2 * brow[j];
    }
  }
  bool ng = track(av) || track(bv);
  Var outv = make(std::move(out), ng, "matmul");
  if (ng) {
    push([this, av, bv, outv, m, k, n] {
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& a2 = slot(av).value;
      const TensorT<T>& b2 = slot(bv).value;
      if (slot(av).needs_grad) {
        TensorT<T>& ga = slot(av).grad;  // g {m,n} x b^T {n,k}
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gv = g[int64_t(i) * n + j];
            for (int kk = 0; kk < k; ++kk)
              ga[int64_t(i) * k + kk] += gv * b2[int64_t(kk) * n + j];
          }
      }
      if (slot(bv).needs_grad) {
        TensorT<T>& gb = slot(bv).grad;  // a^T {k,m} x g {m,n}
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const T av3 = a2[int64_t(i) * k + kk];
            const T* grow = g.data.data() + int64_t(i) * n;
            T* gbrow = gb.data.data() + int64_t(kk) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av3 * grow[j];
          }
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::transpose2d(Var av) -> Var {
  const TensorT<T>& a = val(av);
  if (a.ndim() != 2) fail("transpose2d", "expected {m,n}, got " + a.shape_str());
  const int m = a.dim(0), n = a.dim(1);
  TensorT<T> out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[int64_t(j) * m + i] = a[int64_t(i) * n + j];
  bool ng = track(av);
  Var outv = make(std::move(out), ng, "transpose2d");
  if (ng) {
    push([this, av, outv, m, n] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& ga = slot(av).grad;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[int64_t(i) * n + j] += g[int64_t(j) * m + i];
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::global_avg_pool(Var xv) -> Var {
  const TensorT<T>& x = val(xv);
  if (x.ndim() != 3) fail("global_avg_pool", "expected {H,W,C}, got " + x.shape_str());
  const int64_t hw = int64_t(x.dim(0)) * x.dim(1);
  const int C = x.dim(2);
  TensorT<T> out({C});
  for (int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < C; ++c) out[c] += x[p * C + c];
  const T inv = T(1.0 / double(hw));
  for (int c = 0; c < C; ++c) out[c] *= inv;
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "global_avg_pool");
  if (ng) {
    push([this, xv, outv, hw, C, inv] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& gx = slot(xv).grad;
      for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < C; ++c) gx[p * C + c] += g[c] * inv;
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::softmax_axis(Var xv, int axis) -> Var {
  const TensorT<T>& x = val(xv);
  if (axis < 0 || axis >= x.ndim()) fail("softmax_axis", "axis out of range");
  // Iterate over all "lines" along `axis`: outer index strides over the
  // dimensions before it, inner over the ones after.
  int64_t axis_len = x.dim(axis);
  int64_t inner = 1;
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  int64_t outer = x.size() / (axis_len * inner);
  TensorT<T> out(x.shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * axis_len * inner + in;
      double mx = -1e300;
      for (int64_t a = 0; a < axis_len; ++a) mx = std::max(mx, double(x[base + a * inner]));
      double denom = 0;
      for (int64_t a = 0; a < axis_len; ++a) denom += std::exp(double(x[base + a * inner]) - mx);
      for (int64_t a = 0; a < axis_len; ++a)
        out[base + a * inner] = T(std::exp(double(x[base + a * inner]) - mx) / denom);
    }
  }
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "softmax_axis");
  if (ng) {
    push([this, xv, outv, outer, inner, axis_len] {
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& y = slot(outv).value;
      TensorT<T>& gx = slot(xv).grad;
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * axis_len * inner + in;
          T dot = 0;
          for (int64_t a = 0; a < axis_len; ++a)
            dot += g[base + a * inner] * y[base + a * inner];
          for (int64_t a = 0; a < axis_len; ++a)
            gx[base + a * inner] += y[base + a * inner] * (g[base + a * inner] - dot);
        }
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::fg_mask(Var av) -> Var {
  const TensorT<T>& a = val(av);
  if (a.ndim() != 2 || a.dim(0) != a.dim(1))
    fail("fg_mask", "expected square affinity {n,n}, got " + a.shape_str());
  const int n = a.dim(0);
  // Max-shifted: the shift cancels in the ratio, so the result is exact.
  double mx = -1e300;
  for (int64_t i = 0; i < a.size(); ++i) mx = std::max(mx, double(a[i]));
  TensorT<T> prob({n, n});  // exp(a - mx) / S, saved for backward
  double total = 0;
  std::vector<double> rowsum(size_t(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double e = std::exp(double(a[int64_t(i) * n + j]) - mx);
      prob[int64_t(i) * n + j] = T(e);
      rowsum[size_t(i)] += e;
      total += e;
    }
  TensorT<T> out({n});
  for (int i = 0; i < n; ++i) out[i] = T(rowsum[size_t(i)] / total);
  for (int64_t i = 0; i < prob.size(); ++i) prob[i] = T(double(prob[i]) / total);
  bool ng = track(av);
  Var outv = make(std::move(out), ng, "fg_mask");
  if (ng) {
    push([this, av, outv, prob = std::move(prob), n] {
      // dA_kj = P_kj * (g_k - sum_i g_i M_i), with P = exp(A - mx) / S.
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& m = slot(outv).value;
      TensorT<T>& ga = slot(av).grad;
      T dot = 0;
      for (int i = 0; i < n; ++i) dot += g[i] * m[i];
      for (int k = 0; k < n; ++k) {
        const T coeff = g[k] - dot;
        for (int j = 0; j < n; ++j)
          ga[int64_t(k) * n + j] += prob[int64_t(k) * n + j] * coeff;
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::unit_rows(Var xv, double eps) -> Var {
  const TensorT<T>& x = val(xv);
  if (x.ndim() != 2) fail("unit_rows", "expected {n,C}, got " + x.shape_str());
  if (eps <= 0) fail("unit_rows", "eps must be positive");
  const int n = x.dim(0), c = x.dim(1);
  TensorT<T> out(x.shape);
  std::vector<T> inv_len(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = eps;
    for (int j = 0; j < c; ++j) {
      double v = x[int64_t(i) * c + j];
      s += v * v;
    }
    inv_len[size_t(i)] = T(1.0 / std::sqrt(s));
    for (int j = 0; j < c; ++j) out[int64_t(i) * c + j] = T(x[int64_t(i) * c + j] * inv_len[size_t(i)]);
  }
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "unit_rows");
  if (ng) {
    push([this, xv, outv, inv_len = std::move(inv_len), n, c] {
      // With y = x/|x|: grad_x = (g - (g.y) y) / |x|, per row.
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& y = slot(outv).value;
      TensorT<T>& gx = slot(xv).grad;
      for (int i = 0; i < n; ++i) {
        T dot = 0;
        for (int j = 0; j < c; ++j) dot += g[int64_t(i) * c + j] * y[int64_t(i) * c + j];
        for (int j = 0; j < c; ++j)
          gx[int64_t(i) * c + j] +=
              inv_len[size_t(i)] * (g[int64_t(i) * c + j] - dot * y[int64_t(i) * c + j]);
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::bilinear_pool(Var xv, const std::vector<double>& ys, const std::vector<double>& xs,
                             int out_h, int out_w, int samples) -> Var {
  const TensorT<T>& x = val(xv);
  if (x.ndim() != 3) fail("bilinear_pool", "expected {H,W,C} map, got " + x.shape_str());
  if (out_h <= 0 || out_w <= 0 || samples <= 0) fail("bilinear_pool", "non-positive output spec");
  const size_t want = size_t(out_h) * out_w * samples;
  if (ys.size() != want || xs.size() != want)
    fail("bilinear_pool", "expected " + std::to_string(want) + " sample coordinates");
  const int H = x.dim(0), W = x.dim(1), C = x.dim(2);

  struct Tap {
    int64_t p00, p01, p10, p11;
    T w00, w01, w10, w11;
  };
  std::vector<Tap> taps(want);
  for (size_t s = 0; s < want; ++s) {
    double y = std::clamp(ys[s], 0.0, double(H - 1));
    double xc = std::clamp(xs[s], 0.0, double(W - 1));
    int y0 = int(y);
    int x0 = int(xc);
    if (y0 > H - 2) y0 = std::max(0, H - 2);
    if (x0 > W - 2) x0 = std::max(0, W - 2);
    // Degenerate 1-wide maps keep index 0 and zero fractional weight.
    int y1 = std::min(y0 + 1, H - 1);
    int x1 = std::min(x0 + 1, W - 1);
    T ty = T(y - y0), tx = T(xc - x0);
    Tap& t = taps[s];
    t.p00 = (int64_t(y0) * W + x0) * C;
    t.p01 = (int64_t(y0) * W + x1) * C;
    t.p10 = (int64_t(y1) * W + x0) * C;
    t.p11 = (int64_t(y1) * W + x1) * C;
    t.w00 = (T(1) - ty) * (T(1) - tx);
    t.w01 = (T(1) - ty) * tx;
    t.w10 = ty * (T(1) - tx);
    t.w11 = ty * tx;
  }

  TensorT<T> out({out_h, out_w, C});
  const T inv = T(1.0 / samples);
  const T* xp = x.data.data();
  for (int64_t bin = 0; bin < int64_t(out_h) * out_w; ++bin) {
    T* orow = out.data.data() + bin * C;
    for (int s = 0; s < samples; ++s) {
      const Tap& t = taps[size_t(bin * samples + s)];
      for (int c = 0; c < C; ++c)
        orow[c] += inv * (t.w00 * xp[t.p00 + c] + t.w01 * xp[t.p01 + c] +
                          t.w10 * xp[t.p10 + c] + t.w11 * xp[t.p11 + c]);
    }
  }
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "bilinear_pool");
  if (ng) {
    push([this, xv, outv, taps = std::move(taps), out_h, out_w, samples, C, inv] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& gx = slot(xv).grad;
      T* gp = gx.data.data();
      for (int64_t bin = 0; bin < int64_t(out_h) * out_w; ++bin) {
        const T* grow = g.data.data() + bin * C;
        for (int s = 0; s < samples; ++s) {
          const Tap& t = taps[size_t(bin * samples + s)];
          for (int c = 0; c < C; ++c) {
            const T gv = inv * grow[c];
            gp[t.p00 + c] += t.w00 * gv;
            gp[t.p01 + c] += t.w01 * gv;
            gp[t.p10 + c] += t.w10 * gv;
            gp[t.p11 + c] += t.w11 * gv;
          }
        }
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::linear(Var xv, Var wv, Var bv) -> Var {
  const TensorT<T>& x = val(xv);
  const TensorT<T>& w = val(wv);
  const TensorT<T>& b = val(bv);
  if (x.ndim() != 1 || w.ndim() != 2 || w.dim(0) != x.dim(0))
    fail("linear", "incompatible shapes " + x.shape_str() + " x " + w.shape_str());
  if (b.ndim() != 1 || b.dim(0) != w.dim(1)) fail("linear", "bias shape " + b.shape_str());
  const int ci = x.dim(0), co = w.dim(1);
  TensorT<T> out({co});
  for (int j = 0; j < co; ++j) out[j] = b[j];
  for (int i = 0; i < ci; ++i) {
    const T xval = x[i];
    const T* wrow = w.data.data() + int64_t(i) * co;
    for (int j = 0; j < co; ++j) out[j] += xval * wrow[j];
  }
  bool ng = track(xv) || track(wv) || track(bv);
  Var outv = make(std::move(out), ng, "linear");
  if (ng) {
    push([this, xv, wv, bv, outv, ci, co] {
      const TensorT<T>& g = slot(outv).grad;
      const TensorT<T>& x2 = slot(xv).value;
      const TensorT<T>& w2 = slot(wv).value;
      if (slot(bv).needs_grad) accum(slot(bv).grad, g);
      if (slot(xv).needs_grad) {
        TensorT<T>& gx = slot(xv).grad;
        for (int i = 0; i < ci; ++i) {
          T s = 0;
          const T* wrow = w2.data.data() + int64_t(i) * co;
          for (int j = 0; j < co; ++j) s += g[j] * wrow[j];
          gx[i] += s;
        }
      }
      if (slot(wv).needs_grad) {
        TensorT<T>& gw = slot(wv).grad;
        for (int i = 0; i < ci; ++i) {
          const T xval = x2[i];
          T* gwrow = gw.data.data() + int64_t(i) * co;
          for (int j = 0; j < co; ++j) gwrow[j] += xval * g[j];
        }
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::gather(Var xv, std::vector<int64_t> idx) -> Var {
  const TensorT<T>& x = val(xv);
  const int64_t n = int64_t(idx.size());
  if (n == 0) fail("gather", "empty index list");
  for (int64_t i : idx)
    if (i < 0 || i >= x.size()) fail("gather", "index out of range");
  TensorT<T> out({int(n)});
  for (int64_t i = 0; i < n; ++i) out[i] = x[idx[size_t(i)]];
  bool ng = track(xv);
  Var outv = make(std::move(out), ng, "gather");
  if (ng) {
    push([this, xv, outv, idx = std::move(idx)] {
      const TensorT<T>& g = slot(outv).grad;
      TensorT<T>& gx = slot(xv).grad;
      for (size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[int64_t(i)];
    });
  }
  return outv;
}

// --- losses ---------------------------------------------------------------

template <typename T>
auto TapeT<T>::bce_with_logits(Var zv, TensorT<T> targets) -> Var {
  const TensorT<T>& z = val(zv);
  if (z.size() != targets.size())
    fail("bce_with_logits", "logits/targets size mismatch");
  const int64_t n = z.size();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    double zi = double(z[i]);
    double yi = double(targets[i]);
    acc += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
  }
  TensorT<T> out = TensorT<T>::scalar(T(acc / double(n)));
  bool ng = track(zv);
  Var outv = make(std::move(out), ng, "bce_with_logits");
  if (ng) {
    push([this, zv, outv, targets = std::move(targets), n] {
      const T g = slot(outv).grad[0];
      const TensorT<T>& z2 = slot(zv).value;
      TensorT<T>& gz = slot(zv).grad;
      const double inv = 1.0 / double(n);
      for (int64_t i = 0; i < n; ++i) {
        double zi = double(z2[i]);
        double s = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
        gz[i] += T(double(g) * (s - double(targets[i])) * inv);
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::smooth_l1(Var pv, TensorT<T> target, double beta, int64_t denom) -> Var {
  const TensorT<T>& p = val(pv);
  if (p.size() != target.size()) fail("smooth_l1", "pred/target size mismatch");
  if (beta <= 0) fail("smooth_l1", "beta must be positive");
  if (denom <= 0) fail("smooth_l1", "denom must be positive");
  double acc = 0;
  for (int64_t i = 0; i < p.size(); ++i) {
    double d = double(p[i]) - double(target[i]);
    double ad = std::abs(d);
    acc += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  TensorT<T> out = TensorT<T>::scalar(T(acc / double(denom)));
  bool ng = track(pv);
  Var outv = make(std::move(out), ng, "smooth_l1");
  if (ng) {
    push([this, pv, outv, target = std::move(target), beta, denom] {
      const T g = slot(outv).grad[0];
      const TensorT<T>& p2 = slot(pv).value;
      TensorT<T>& gp = slot(pv).grad;
      const double inv = 1.0 / double(denom);
      for (int64_t i = 0; i < p2.size(); ++i) {
        double d = double(p2[i]) - double(target[i]);
        double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
        gp[i] += T(double(g) * dd * inv);
      }
    });
  }
  return outv;
}

template <typename T>
auto TapeT<T>::softmax_ce(Var lv, std::vector<int> labels) -> Var {
  const TensorT<T>& l = val(lv);
  if (l.ndim() != 2) fail("softmax_ce", "expected {n,K} logits, got " + l.shape_str());
  const int n = l.dim(0), K = l.dim(1);
  if (int(labels.size()) != n) fail("softmax_ce", "label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= K) fail("softmax_ce", "label out of range");
  TensorT<T> probs({n, K});
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int k = 0; k < K; ++k) mx = std::max(mx, double(l[int64_t(i) * K + k]));
    double denom = 0;
    for (int k = 0; k < K; ++k) denom += std::exp(double(l[int64_t(i) * K + k]) - mx);
    for (int k = 0; k < K; ++k)
      probs[int64_t(i) * K + k] = T(std::exp(double(l[int64_t(i) * K + k]) - mx) / denom);
    acc -= std::log(std::max(double(probs[int64_t(i) * K + labels[size_t(i)]]), 1e-300));
  }
  TensorT<T> out = TensorT<T>::scalar(T(acc / double(n)));
  bool ng = track(lv);
  Var outv = make(std::move(out), ng, "softmax_ce");
  if (ng) {
    push([this, lv, outv, probs = std::move(probs), labels = std::move(labels), n, K] {
      const T g = slot(outv).grad[0];
      TensorT<T>& gl = slot(lv).grad;
      const double inv = 1.0 / double(n);
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < K; ++k) {
          double p = double(probs[int64_t(i) * K + k]);
          double onehot = (k == labels[size_t(i)]) ? 1.0 : 0.0;
          gl[int64_t(i) * K + k] += T(double(g) * (p - onehot) * inv);
        }
    });
  }
  return outv;
}

template class TapeT<float>;
template class TapeT<double>;

}  // namespace metadet
