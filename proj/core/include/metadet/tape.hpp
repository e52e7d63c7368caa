#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metadet/tensor.hpp"

namespace metadet {

template <typename T>
struct VarT {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over a fixed set of primitives. Each op computes its
// forward result eagerly and, when recording, pushes a closure that applies
// the hand-derived backward rule. backward() replays the closures in reverse
// creation order, which is a valid topological order by construction.
//
// Every op validates shapes and rejects non-finite outputs: a NaN/Inf
// anywhere is treated as a hard error, not a value to propagate.
template <typename T>
class TapeT {
 public:
  using Var = VarT<T>;

  // recording=false builds a forward-only evaluator (inference mode): no
  // closures are stored and gradients are unavailable.
  explicit TapeT(bool recording = true) : recording_(recording) {}

  // Leaf that never receives a gradient (images, constants).
  Var input(TensorT<T> v);
  // Leaf that accumulates a gradient (weights, biases, scalars like the
  // residual gains). Also used for activations whose gradient is seeded
  // externally.
  Var param(TensorT<T> v);

  const TensorT<T>& val(Var v) const { return slot(v).value; }
  // Valid after backward(); zero tensor if the var was never reached.
  const TensorT<T>& grad(Var v) const;
  bool needs_grad(Var v) const { return slot(v).needs_grad; }
  bool recording() const { return recording_; }
  size_t num_ops() const { return nodes_.size(); }

  // --- primitives -------------------------------------------------------
  // x {H,W,Cin}, w {k,k,Cin,Cout}, b {Cout}; zero padding. Output spatial
  // dims must be positive or the call throws.
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  Var relu(Var x);                 // subgradient at 0 is 0
  Var sigmoid(Var x);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);           // elementwise
  Var scale_const(Var x, double c);
  Var scale_var(Var x, Var s);     // s is a {1} tensor (learnable scalar)
  Var broadcast_spatial(Var v, int h, int w);   // {C} -> {H,W,C}
  Var broadcast_channel(Var m, int c);          // {H,W} -> {H,W,C}
  Var concat_channels(Var a, Var b);            // along C
  Var reshape(Var x, std::vector<int> shape);
  Var matmul(Var a, Var b);        // {m,k}x{k,n} -> {m,n}
  Var transpose2d(Var a);
  Var global_avg_pool(Var x);      // {H,W,C} -> {C}
  Var softmax_axis(Var x, int axis);
  // Row-normalized foreground weight of an affinity matrix {n,n} -> {n}:
  // out_i = sum_j exp(a_ij) / sum_ij exp(a_ij), computed max-shifted.
  Var fg_mask(Var a);
  // Scales each row of {n,C} to unit L2 length: y_i = x_i / sqrt(|x_i|^2 + eps).
  Var unit_rows(Var x, double eps = 1e-12);
  // Average of bilinear samples per output bin. ys/xs hold
  // out_h*out_w*samples coordinates in cell-index space (cell centers at
  // integers), clamped to the map border. Output {out_h,out_w,C}.
  Var bilinear_pool(Var x, const std::vector<double>& ys, const std::vector<double>& xs,
                    int out_h, int out_w, int samples);
  Var linear(Var x, Var w, Var b);  // {Cin} x {Cin,Cout} + {Cout}
  Var gather(Var x, std::vector<int64_t> idx);  // flat-index gather -> {n}

  // --- losses (scalar outputs) -------------------------------------------
  // Mean over n of the numerically-stable binary cross-entropy on logits.
  Var bce_with_logits(Var z, TensorT<T> targets);
  // Huber on (pred - target), summed over all coordinates, divided by denom
  // (callers pass the positive-row count so the mean ignores padding).
  Var smooth_l1(Var pred, TensorT<T> target, double beta, int64_t denom);
  // Mean over rows of -log softmax(logits)[label]; logits {n,K}.
  Var softmax_ce(Var logits, std::vector<int> labels);

  // Seed an extra upstream gradient before backward(); used to splice
  // gradients computed on a detached sub-tape back into this one.
  void seed_grad(Var v, const TensorT<T>& g);
  // Run the reverse sweep from a scalar loss (seeded with 1).
  void backward(Var loss);

 private:
  struct Slot {
    TensorT<T> value;
    TensorT<T> grad;   // allocated iff needs_grad
    bool needs_grad = false;
  };

  Slot& slot(Var v) { return slots_.at(size_t(v.id)); }
  const Slot& slot(Var v) const { return slots_.at(size_t(v.id)); }
  Var make(TensorT<T> value, bool needs_grad, const char* op);
  void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  bool track(Var v) const { return recording_ && slot(v).needs_grad; }

  std::deque<Slot> slots_;  // deque: val()/grad() references stay valid as ops append
  std::vector<std::function<void()>> nodes_;
  bool recording_;
  bool ran_backward_ = false;
};

using Tape = TapeT<float>;
using DTape = TapeT<double>;
using Var = VarT<float>;
using DVar = VarT<double>;

extern template class TapeT<float>;
extern template class TapeT<double>;

}  // namespace metadet
