#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "xrec/tensor.hpp"

// Tape-based reverse-mode AD over real tensors. Complex quantities are carried
// as (re, im) pairs of real nodes, so no Wirtinger calculus appears anywhere:
// every adjoint is the real-Jacobian transpose. A tape is built per forward
// pass and discarded after the gradient sweep.
//
// Elementwise binaries accept equal shapes or a one-element operand (scalar
// broadcast); nothing else broadcasts.

namespace xrec {

class Tape;

struct ValueRef {
  int32_t node = -1;
  int32_t slot = 0;
};

struct Var {
  Tape* tape = nullptr;
  ValueRef ref;
  bool valid() const { return tape != nullptr; }
  const Tensor& val() const;
  const Shape& shape() const { return val().shape(); }
  int64_t size() const { return val().size(); }
};

struct CVar {
  Var re, im;
};

enum class Op : uint8_t {
  Leaf, Const,
  Add, Sub, Mul, Div, Neg,
  Exp, Log, Sqrt, Pow, Sin, Cos, Atan2, Abs,
  Sum, Mean, MaxReduce,
  Pad, Slice, Concat, Reshape,
  Fft2, Ifft2,
  Bilinear, WhereMask,
};

enum class PadMode { Zero, Edge };

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_leaf;
  int64_t worst_index = -1;
  double ad = 0.0, fd = 0.0;
};

class Tape {
 public:
  static constexpr int kAllAxes = -1;

  Var leaf(const std::string& name, Tensor value);
  Var constant(Tensor value);
  Var constant(double scalar) { return constant(Tensor::scalar(scalar)); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var neg(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var pow(Var a, double exponent);
  Var sin(Var a);
  Var cos(Var a);
  Var atan2(Var y, Var x);
  Var abs(Var a);  // subgradient 0 at 0

  Var sum(Var a, int axis = kAllAxes);
  Var mean(Var a, int axis = kAllAxes);
  Var max_reduce(Var a);

  Var pad(Var a, const std::vector<std::array<int64_t, 2>>& widths, PadMode mode);
  Var slice(Var a, const std::vector<int64_t>& offset, const Shape& extent);
  Var concat(const std::vector<Var>& parts, int axis);
  Var reshape(Var a, Shape to);

  std::pair<Var, Var> fft2(Var re, Var im);
  std::pair<Var, Var> ifft2(Var re, Var im);

  // Samples a rank-2 image at fractional (cy, cx); taps outside the image read
  // `fill`. Differentiable in the image (<=4 taps per sample) and in both
  // coordinate tensors (analytic bilinear weight derivative).
  Var bilinear(Var image, Var cy, Var cx, double fill);

  // out = mask != 0 ? a : b, with a constant mask
  Var where_mask(Var a, Var b, Tensor mask);

  // Reverse sweep from a scalar loss. Returns one gradient tensor per
  // requested leaf name (zeros when the leaf does not reach the loss).
  std::map<std::string, Tensor> gradient(Var loss, const std::vector<std::string>& leaves);

  const Tensor& value(ValueRef r) const;
  size_t num_nodes() const { return nodes_.size(); }
  bool has_leaf(const std::string& name) const { return leaves_.count(name) > 0; }
  const std::map<std::string, ValueRef>& leaves() const { return leaves_; }

 private:
  struct Payload {
    double scalar = 0.0;      // Pow exponent
    int axis = kAllAxes;      // Sum/Mean/Concat
    std::vector<int64_t> offset;
    Shape shape;              // Slice extent / Reshape source shape
    std::vector<std::array<int64_t, 2>> widths;
    PadMode pad_mode = PadMode::Zero;
    double fill = 0.0;        // Bilinear
    Tensor mask;              // WhereMask
  };
  struct Node {
    Op op;
    std::vector<ValueRef> parents;
    std::vector<Tensor> out;
    Payload payload;
    bool needs_grad = false;
    std::string leaf_name;
  };

  Var push(Node&& n);
  Var binary(Op op, Var a, Var b);
  Var unary(Op op, Var a);
  void check_same_tape(Var v) const;

  std::vector<Node> nodes_;
  std::map<std::string, ValueRef> leaves_;
  friend struct Var;
};

// operator sugar
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator-(Var a, double b);
Var operator*(Var a, double b);
Var operator/(Var a, double b);
Var operator+(double a, Var b);
Var operator-(double a, Var b);
Var operator*(double a, Var b);

// complex helpers over (re, im) pairs
CVar cvar(Var re, Var im);
CVar cconst(Tape& t, const CTensor& v);
CVar cadd(CVar a, CVar b);
CVar csub(CVar a, CVar b);
CVar cmul(CVar a, CVar b);
CVar cconj(CVar a);
CVar cscale(Var s, CVar a);      // real scalar/tensor times complex
Var cabs2(CVar a);               // re^2 + im^2
CVar cexp_i(Var phase);          // (cos, sin)
CVar fft2c(CVar a);
CVar ifft2c(CVar a);

// Central-difference check of d(loss)/d(leaf) for every leaf in `point`.
// `build` must register exactly the leaves in `point` (by name) and return the
// scalar loss. Relative error uses a max(1, |fd|) denominator.
GradCheckResult grad_check(
    const std::function<Var(Tape&, const std::map<std::string, Tensor>&)>& build,
    const std::map<std::string, Tensor>& point, double step);

}  // namespace xrec
