#include "xrec/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace xrec {

namespace {

const Shape& binary_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (same_shape(a.shape(), b.shape())) return a.shape();
  if (b.is_scalar()) return a.shape();
  if (a.is_scalar()) return b.shape();
  throw Error(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

inline double pick(const Tensor& t, int64_t i) { return t.size() == 1 ? t[0] : t[i]; }

// collapse an output-shaped gradient onto a possibly-scalar parent
Tensor reduce_like(Tensor grad, const Shape& parent) {
  if (same_shape(grad.shape(), parent)) return grad;
  double s = 0;
  for (int64_t i = 0; i < grad.size(); i++) s += grad[i];
  Tensor r(parent);
  r[0] = s;
  return r;
}

struct NdIter {
  const Shape& dims;
  std::vector<int64_t> idx;
  bool done;
  explicit NdIter(const Shape& d) : dims(d), idx(d.size(), 0), done(shape_numel(d) == 0) {}
  void next() {
    for (int i = (int)idx.size() - 1; i >= 0; i--) {
      if (++idx[i] < dims[i]) return;
      idx[i] = 0;
    }
    done = true;
  }
};

inline int64_t flat_index(const Shape& dims, const std::vector<int64_t>& idx) {
  int64_t f = 0;
  for (size_t i = 0; i < dims.size(); i++) f = f * dims[i] + idx[i];
  return f;
}

void axis_strides(const Shape& s, int axis, int64_t& pre, int64_t& len, int64_t& post) {
  pre = 1;
  post = 1;
  len = s[axis];
  for (int i = 0; i < axis; i++) pre *= s[i];
  for (size_t i = axis + 1; i < s.size(); i++) post *= s[i];
}

}  // namespace

const Tensor& Var::val() const {
  if (!tape) throw Error("use of an empty Var");
  return tape->value(ref);
}

const Tensor& Tape::value(ValueRef r) const {
  if (r.node < 0 || r.node >= (int32_t)nodes_.size()) throw Error("stale ValueRef");
  return nodes_[r.node].out[r.slot];
}

void Tape::check_same_tape(Var v) const {
  if (v.tape != this) throw Error("operands recorded on different tapes");
}

Var Tape::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return Var{this, ValueRef{(int32_t)(nodes_.size() - 1), 0}};
}

Var Tape::leaf(const std::string& name, Tensor value) {
  if (name.empty()) throw Error("leaf name must be non-empty");
  if (leaves_.count(name)) throw Error("duplicate leaf name: " + name);
  value.require_finite("leaf");
  Node n;
  n.op = Op::Leaf;
  n.needs_grad = true;
  n.leaf_name = name;
  n.out.push_back(std::move(value));
  Var v = push(std::move(n));
  leaves_[name] = v.ref;
  return v;
}

Var Tape::constant(Tensor value) {
  value.require_finite("constant");
  Node n;
  n.op = Op::Const;
  n.out.push_back(std::move(value));
  return push(std::move(n));
}

Var Tape::binary(Op op, Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  const char* who = op == Op::Add   ? "add"
                    : op == Op::Sub ? "sub"
                    : op == Op::Mul ? "mul"
                    : op == Op::Div ? "div"
                                    : "atan2";
  const Shape& os = binary_shape(ta, tb, who);
  Tensor out(os);
  int64_t n = out.size();
  switch (op) {
    case Op::Add:
      for (int64_t i = 0; i < n; i++) out[i] = pick(ta, i) + pick(tb, i);
      break;
    case Op::Sub:
      for (int64_t i = 0; i < n; i++) out[i] = pick(ta, i) - pick(tb, i);
      break;
    case Op::Mul:
      for (int64_t i = 0; i < n; i++) out[i] = pick(ta, i) * pick(tb, i);
      break;
    case Op::Div:
      for (int64_t i = 0; i < n; i++) out[i] = pick(ta, i) / pick(tb, i);
      break;
    case Op::Atan2:
      for (int64_t i = 0; i < n; i++) out[i] = std::atan2(pick(ta, i), pick(tb, i));
      break;
    default:
      throw Error("binary: bad op");
  }
  Node node;
  node.op = op;
  node.parents = {a.ref, b.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad || nodes_[b.ref.node].needs_grad;
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

Var Tape::add(Var a, Var b) { return binary(Op::Add, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::Sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::Mul, a, b); }
Var Tape::div(Var a, Var b) { return binary(Op::Div, a, b); }
Var Tape::atan2(Var y, Var x) { return binary(Op::Atan2, y, x); }

Var Tape::unary(Op op, Var a) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  Tensor out(ta.shape());
  int64_t n = out.size();
  switch (op) {
    case Op::Neg:
      for (int64_t i = 0; i < n; i++) out[i] = -ta[i];
      break;
    case Op::Exp:
      for (int64_t i = 0; i < n; i++) out[i] = std::exp(ta[i]);
      break;
    case Op::Log:
      for (int64_t i = 0; i < n; i++) out[i] = std::log(ta[i]);
      break;
    case Op::Sqrt:
      for (int64_t i = 0; i < n; i++) out[i] = std::sqrt(ta[i]);
      break;
    case Op::Sin:
      for (int64_t i = 0; i < n; i++) out[i] = std::sin(ta[i]);
      break;
    case Op::Cos:
      for (int64_t i = 0; i < n; i++) out[i] = std::cos(ta[i]);
      break;
    case Op::Abs:
      for (int64_t i = 0; i < n; i++) out[i] = std::abs(ta[i]);
      break;
    default:
      throw Error("unary: bad op");
  }
  Node node;
  node.op = op;
  node.parents = {a.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

Var Tape::neg(Var a) { return unary(Op::Neg, a); }
Var Tape::exp(Var a) { return unary(Op::Exp, a); }
Var Tape::log(Var a) { return unary(Op::Log, a); }
Var Tape::sqrt(Var a) { return unary(Op::Sqrt, a); }
Var Tape::sin(Var a) { return unary(Op::Sin, a); }
Var Tape::cos(Var a) { return unary(Op::Cos, a); }
Var Tape::abs(Var a) { return unary(Op::Abs, a); }

Var Tape::pow(Var a, double exponent) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  Tensor out(ta.shape());
  for (int64_t i = 0; i < out.size(); i++) out[i] = std::pow(ta[i], exponent);
  Node node;
  node.op = Op::Pow;
  node.parents = {a.ref};
  node.payload.scalar = exponent;
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

Var Tape::sum(Var a, int axis) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  Node node;
  node.op = Op::Sum;
  node.parents = {a.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.payload.shape = ta.shape();
  if (axis == kAllAxes) {
    node.payload.axis = kAllAxes;
    node.out.push_back(Tensor::scalar(ta.sum()));
  } else {
    if (axis < 0) axis += ta.rank();
    if (axis < 0 || axis >= ta.rank()) throw Error("sum: axis out of range");
    node.payload.axis = axis;
    int64_t pre, len, post;
    axis_strides(ta.shape(), axis, pre, len, post);
    Shape os = ta.shape();
    os.erase(os.begin() + axis);
    Tensor out(os, 0.0);
    for (int64_t p = 0; p < pre; p++)
      for (int64_t k = 0; k < len; k++)
        for (int64_t q = 0; q < post; q++) out[p * post + q] += ta[(p * len + k) * post + q];
    node.out.push_back(std::move(out));
  }
  return push(std::move(node));
}

Var Tape::mean(Var a, int axis) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  if (ta.size() == 0) throw Error("mean of empty tensor");
  Node node;
  node.op = Op::Mean;
  node.parents = {a.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.payload.shape = ta.shape();
  if (axis == kAllAxes) {
    node.payload.axis = kAllAxes;
    node.out.push_back(Tensor::scalar(ta.sum() / (double)ta.size()));
  } else {
    if (axis < 0) axis += ta.rank();
    if (axis < 0 || axis >= ta.rank()) throw Error("mean: axis out of range");
    node.payload.axis = axis;
    int64_t pre, len, post;
    axis_strides(ta.shape(), axis, pre, len, post);
    Shape os = ta.shape();
    os.erase(os.begin() + axis);
    Tensor out(os, 0.0);
    for (int64_t p = 0; p < pre; p++)
      for (int64_t k = 0; k < len; k++)
        for (int64_t q = 0; q < post; q++) out[p * post + q] += ta[(p * len + k) * post + q];
    for (int64_t i = 0; i < out.size(); i++) out[i] /= (double)len;
    node.out.push_back(std::move(out));
  }
  return push(std::move(node));
}

Var Tape::max_reduce(Var a) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  if (ta.size() == 0) throw Error("max_reduce of empty tensor");
  int64_t arg = 0;
  for (int64_t i = 1; i < ta.size(); i++)
    if (ta[i] > ta[arg]) arg = i;
  Node node;
  node.op = Op::MaxReduce;
  node.parents = {a.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.payload.shape = ta.shape();
  node.payload.offset = {arg};  // first-argmax subgradient
  node.out.push_back(Tensor::scalar(ta[arg]));
  return push(std::move(node));
}

Var Tape::pad(Var a, const std::vector<std::array<int64_t, 2>>& widths, PadMode mode) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  if ((int)widths.size() != ta.rank()) throw Error("pad: widths rank mismatch");
  Shape os = ta.shape();
  for (size_t i = 0; i < widths.size(); i++) {
    if (widths[i][0] < 0 || widths[i][1] < 0) throw Error("pad: negative width");
    if (mode == PadMode::Edge && ta.shape()[i] == 0) throw Error("pad: edge mode on empty axis");
    os[i] += widths[i][0] + widths[i][1];
  }
  Tensor out(os, 0.0);
  const Shape& is = ta.shape();
  std::vector<int64_t> src(is.size());
  for (NdIter it(os); !it.done; it.next()) {
    bool inside = true;
    for (size_t i = 0; i < is.size(); i++) {
      int64_t c = it.idx[i] - widths[i][0];
      if (mode == PadMode::Edge) c = std::clamp<int64_t>(c, 0, is[i] - 1);
      else if (c < 0 || c >= is[i]) inside = false;
      src[i] = c;
    }
    if (inside) out[flat_index(os, it.idx)] = ta[flat_index(is, src)];
  }
  Node node;
  node.op = Op::Pad;
  node.parents = {a.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.payload.widths = widths;
  node.payload.pad_mode = mode;
  node.payload.shape = ta.shape();
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

Var Tape::slice(Var a, const std::vector<int64_t>& offset, const Shape& extent) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  if ((int)offset.size() != ta.rank() || (int)extent.size() != ta.rank())
    throw Error("slice: offset/extent rank mismatch for shape " + shape_str(ta.shape()));
  for (int i = 0; i < ta.rank(); i++)
    if (offset[i] < 0 || extent[i] < 0 || offset[i] + extent[i] > ta.shape()[i])
      throw Error("slice: window " + shape_str(extent) + " at offset out of bounds for " +
                  shape_str(ta.shape()));
  Tensor out(extent);
  std::vector<int64_t> src(offset.size());
  for (NdIter it(extent); !it.done; it.next()) {
    for (size_t i = 0; i < src.size(); i++) src[i] = offset[i] + it.idx[i];
    out[flat_index(extent, it.idx)] = ta[flat_index(ta.shape(), src)];
  }
  Node node;
  node.op = Op::Slice;
  node.parents = {a.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.payload.offset = offset;
  node.payload.shape = ta.shape();
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

Var Tape::concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw Error("concat: no inputs");
  for (Var p : parts) check_same_tape(p);
  const Tensor& t0 = parts[0].val();
  if (axis < 0) axis += t0.rank();
  if (axis < 0 || axis >= t0.rank()) throw Error("concat: axis out of range");
  int64_t total = 0;
  for (Var p : parts) {
    const Shape& s = p.val().shape();
    if ((int)s.size() != t0.rank()) throw Error("concat: rank mismatch");
    for (int i = 0; i < t0.rank(); i++)
      if (i != axis && s[i] != t0.shape()[i]) throw Error("concat: dim mismatch off-axis");
    total += s[axis];
  }
  Shape os = t0.shape();
  os[axis] = total;
  Tensor out(os);
  int64_t pre, len0, post;
  axis_strides(os, axis, pre, len0, post);
  int64_t at = 0;
  for (Var p : parts) {
    const Tensor& tp = p.val();
    int64_t len = tp.shape()[axis];
    for (int64_t pr = 0; pr < pre; pr++)
      for (int64_t k = 0; k < len; k++)
        for (int64_t q = 0; q < post; q++)
          out[(pr * total + at + k) * post + q] = tp[(pr * len + k) * post + q];
    at += len;
  }
  Node node;
  node.op = Op::Concat;
  node.payload.axis = axis;
  bool ng = false;
  for (Var p : parts) {
    node.parents.push_back(p.ref);
    ng = ng || nodes_[p.ref.node].needs_grad;
  }
  node.needs_grad = ng;
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

Var Tape::reshape(Var a, Shape to) {
  check_same_tape(a);
  const Tensor& ta = a.val();
  if (shape_numel(to) != ta.size())
    throw Error("reshape: size mismatch " + shape_str(ta.shape()) + " -> " + shape_str(to));
  Node node;
  node.op = Op::Reshape;
  node.parents = {a.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad;
  node.payload.shape = ta.shape();
  node.out.push_back(Tensor(to, ta.vec()));
  return push(std::move(node));
}

std::pair<Var, Var> Tape::fft2(Var re, Var im) {
  check_same_tape(re);
  check_same_tape(im);
  CTensor res = xrec::fft2(CTensor(re.val(), im.val()));
  Node node;
  node.op = Op::Fft2;
  node.parents = {re.ref, im.ref};
  node.needs_grad = nodes_[re.ref.node].needs_grad || nodes_[im.ref.node].needs_grad;
  node.out.push_back(std::move(res.re));
  node.out.push_back(std::move(res.im));
  Var v = push(std::move(node));
  return {v, Var{this, ValueRef{v.ref.node, 1}}};
}

std::pair<Var, Var> Tape::ifft2(Var re, Var im) {
  check_same_tape(re);
  check_same_tape(im);
  CTensor res = xrec::ifft2(CTensor(re.val(), im.val()));
  Node node;
  node.op = Op::Ifft2;
  node.parents = {re.ref, im.ref};
  node.needs_grad = nodes_[re.ref.node].needs_grad || nodes_[im.ref.node].needs_grad;
  node.out.push_back(std::move(res.re));
  node.out.push_back(std::move(res.im));
  Var v = push(std::move(node));
  return {v, Var{this, ValueRef{v.ref.node, 1}}};
}

namespace {

struct TapRefs {
  int64_t y0, x0, y1, x1;
  double fy, fx;
  bool v00, v01, v10, v11;  // in-bounds flags
};

inline TapRefs bilinear_taps(double y, double x, int64_t h, int64_t w) {
  TapRefs t;
  double fy0 = std::floor(y), fx0 = std::floor(x);
  t.y0 = (int64_t)fy0;
  t.x0 = (int64_t)fx0;
  t.y1 = t.y0 + 1;
  t.x1 = t.x0 + 1;
  t.fy = y - fy0;
  t.fx = x - fx0;
  auto in = [&](int64_t yy, int64_t xx) { return yy >= 0 && yy < h && xx >= 0 && xx < w; };
  t.v00 = in(t.y0, t.x0);
  t.v01 = in(t.y0, t.x1);
  t.v10 = in(t.y1, t.x0);
  t.v11 = in(t.y1, t.x1);
  return t;
}

}  // namespace

Var Tape::bilinear(Var image, Var cy, Var cx, double fill) {
  check_same_tape(image);
  check_same_tape(cy);
  check_same_tape(cx);
  const Tensor& img = image.val();
  const Tensor& ty = cy.val();
  const Tensor& tx = cx.val();
  if (img.rank() != 2) throw Error("bilinear: image must be rank-2, got " + shape_str(img.shape()));
  if (!same_shape(ty.shape(), tx.shape())) throw Error("bilinear: coordinate shape mismatch");
  ty.require_finite("bilinear cy");
  tx.require_finite("bilinear cx");
  int64_t h = img.dim(0), w = img.dim(1);
  for (int64_t i = 0; i < ty.size(); i++)
    if (std::abs(ty[i]) > 1e12 || std::abs(tx[i]) > 1e12)
      throw Error("bilinear: coordinate magnitude out of range");
  Tensor out(ty.shape());
  for (int64_t i = 0; i < out.size(); i++) {
    TapRefs t = bilinear_taps(ty[i], tx[i], h, w);
    double v00 = t.v00 ? img.at2(t.y0, t.x0) : fill;
    double v01 = t.v01 ? img.at2(t.y0, t.x1) : fill;
    double v10 = t.v10 ? img.at2(t.y1, t.x0) : fill;
    double v11 = t.v11 ? img.at2(t.y1, t.x1) : fill;
    out[i] = (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) + t.fy * ((1 - t.fx) * v10 + t.fx * v11);
  }
  Node node;
  node.op = Op::Bilinear;
  node.parents = {image.ref, cy.ref, cx.ref};
  node.needs_grad = nodes_[image.ref.node].needs_grad || nodes_[cy.ref.node].needs_grad ||
                    nodes_[cx.ref.node].needs_grad;
  node.payload.fill = fill;
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

Var Tape::where_mask(Var a, Var b, Tensor mask) {
  check_same_tape(a);
  check_same_tape(b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  const Shape& os = mask.shape();
  auto compatible = [&](const Tensor& t) { return same_shape(t.shape(), os) || t.is_scalar(); };
  if (!compatible(ta) || !compatible(tb))
    throw Error("where_mask: operand shapes must match mask " + shape_str(os));
  Tensor out(os);
  for (int64_t i = 0; i < out.size(); i++) out[i] = mask[i] != 0.0 ? pick(ta, i) : pick(tb, i);
  Node node;
  node.op = Op::WhereMask;
  node.parents = {a.ref, b.ref};
  node.needs_grad = nodes_[a.ref.node].needs_grad || nodes_[b.ref.node].needs_grad;
  node.payload.mask = std::move(mask);
  node.out.push_back(std::move(out));
  return push(std::move(node));
}

std::map<std::string, Tensor> Tape::gradient(Var loss, const std::vector<std::string>& leaves) {
  check_same_tape(loss);
  if (loss.val().size() != 1)
    throw Error("gradient: loss must be scalar, got shape " + shape_str(loss.shape()));
  for (const auto& name : leaves)
    if (!leaves_.count(name)) throw Error("gradient: '" + name + "' is not a leaf on this tape");

  // adjoint buffers per (node, slot); empty tensor means zero
  std::vector<std::vector<Tensor>> adj(nodes_.size());
  for (size_t i = 0; i < nodes_.size(); i++) adj[i].resize(nodes_[i].out.size());
  adj[loss.ref.node][loss.ref.slot] = Tensor(loss.shape(), std::vector<double>{1.0});

  auto acc = [&](ValueRef r, Tensor g) {
    if (!nodes_[r.node].needs_grad) return;
    Tensor& slot = adj[r.node][r.slot];
    if (slot.size() == 0) {
      slot = std::move(g);
    } else {
      for (int64_t i = 0; i < slot.size(); i++) slot[i] += g[i];
    }
  };

  for (int32_t ni = loss.ref.node; ni >= 0; ni--) {
    Node& nd = nodes_[ni];
    if (!nd.needs_grad || nd.op == Op::Leaf || nd.op == Op::Const) continue;
    bool any = false;
    for (auto& t : adj[ni])
      if (t.size()) any = true;
    if (!any) continue;
    const Tensor& g = adj[ni][0];

    auto pval = [&](int k) -> const Tensor& {
      return nodes_[nd.parents[k].node].out[nd.parents[k].slot];
    };
    auto pshape = [&](int k) -> const Shape& { return pval(k).shape(); };

    switch (nd.op) {
      case Op::Add: {
        acc(nd.parents[0], reduce_like(g, pshape(0)));
        acc(nd.parents[1], reduce_like(g, pshape(1)));
        break;
      }
      case Op::Sub: {
        acc(nd.parents[0], reduce_like(g, pshape(0)));
        Tensor gb(g.shape());
        for (int64_t i = 0; i < g.size(); i++) gb[i] = -g[i];
        acc(nd.parents[1], reduce_like(std::move(gb), pshape(1)));
        break;
      }
      case Op::Mul: {
        const Tensor& a = pval(0);
        const Tensor& b = pval(1);
        Tensor ga(g.shape()), gb(g.shape());
        for (int64_t i = 0; i < g.size(); i++) {
          ga[i] = g[i] * pick(b, i);
          gb[i] = g[i] * pick(a, i);
        }
        acc(nd.parents[0], reduce_like(std::move(ga), pshape(0)));
        acc(nd.parents[1], reduce_like(std::move(gb), pshape(1)));
        break;
      }
      case Op::Div: {
        const Tensor& a = pval(0);
        const Tensor& b = pval(1);
        Tensor ga(g.shape()), gb(g.shape());
        for (int64_t i = 0; i < g.size(); i++) {
          double vb = pick(b, i);
          ga[i] = g[i] / vb;
          gb[i] = -g[i] * pick(a, i) / (vb * vb);
        }
        acc(nd.parents[0], reduce_like(std::move(ga), pshape(0)));
        acc(nd.parents[1], reduce_like(std::move(gb), pshape(1)));
        break;
      }
      case Op::Neg: {
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++) ga[i] = -g[i];
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Exp: {
        const Tensor& out = nd.out[0];
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++) ga[i] = g[i] * out[i];
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Log: {
        const Tensor& a = pval(0);
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++) ga[i] = g[i] / a[i];
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Sqrt: {
        const Tensor& out = nd.out[0];
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++) ga[i] = g[i] * 0.5 / out[i];
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Pow: {
        const Tensor& a = pval(0);
        double p = nd.payload.scalar;
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++) ga[i] = g[i] * p * std::pow(a[i], p - 1.0);
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Sin: {
        const Tensor& a = pval(0);
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++) ga[i] = g[i] * std::cos(a[i]);
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Cos: {
        const Tensor& a = pval(0);
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++) ga[i] = -g[i] * std::sin(a[i]);
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Atan2: {
        const Tensor& y = pval(0);
        const Tensor& x = pval(1);
        Tensor gy(g.shape()), gx(g.shape());
        for (int64_t i = 0; i < g.size(); i++) {
          double vy = pick(y, i), vx = pick(x, i);
          double d = vx * vx + vy * vy;
          gy[i] = g[i] * vx / d;
          gx[i] = -g[i] * vy / d;
        }
        acc(nd.parents[0], reduce_like(std::move(gy), pshape(0)));
        acc(nd.parents[1], reduce_like(std::move(gx), pshape(1)));
        break;
      }
      case Op::Abs: {
        const Tensor& a = pval(0);
        Tensor ga(g.shape());
        for (int64_t i = 0; i < g.size(); i++)
          ga[i] = a[i] > 0 ? g[i] : (a[i] < 0 ? -g[i] : 0.0);  // subgradient 0 at 0
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        const Shape& ps = nd.payload.shape;
        Tensor ga(ps);
        if (nd.payload.axis == kAllAxes) {
          double scale = nd.op == Op::Mean ? 1.0 / (double)shape_numel(ps) : 1.0;
          double v = g[0] * scale;
          for (int64_t i = 0; i < ga.size(); i++) ga[i] = v;
        } else {
          int64_t pre, len, post;
          axis_strides(ps, nd.payload.axis, pre, len, post);
          double scale = nd.op == Op::Mean ? 1.0 / (double)len : 1.0;
          for (int64_t p = 0; p < pre; p++)
            for (int64_t k = 0; k < len; k++)
              for (int64_t q = 0; q < post; q++)
                ga[(p * len + k) * post + q] = g[p * post + q] * scale;
        }
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::MaxReduce: {
        Tensor ga(nd.payload.shape, 0.0);
        ga[nd.payload.offset[0]] = g[0];
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Pad: {
        const Shape& is = nd.payload.shape;
        const Shape& os = nd.out[0].shape();
        Tensor ga(is, 0.0);
        std::vector<int64_t> src(is.size());
        for (NdIter it(os); !it.done; it.next()) {
          bool inside = true;
          for (size_t i = 0; i < is.size(); i++) {
            int64_t c = it.idx[i] - nd.payload.widths[i][0];
            if (nd.payload.pad_mode == PadMode::Edge) c = std::clamp<int64_t>(c, 0, is[i] - 1);
            else if (c < 0 || c >= is[i]) inside = false;
            src[i] = c;
          }
          if (inside) ga[flat_index(is, src)] += g[flat_index(os, it.idx)];
        }
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Slice: {
        const Shape& is = nd.payload.shape;
        const Shape& es = nd.out[0].shape();
        Tensor ga(is, 0.0);
        std::vector<int64_t> src(is.size());
        for (NdIter it(es); !it.done; it.next()) {
          for (size_t i = 0; i < src.size(); i++) src[i] = nd.payload.offset[i] + it.idx[i];
          ga[flat_index(is, src)] = g[flat_index(es, it.idx)];
        }
        acc(nd.parents[0], std::move(ga));
        break;
      }
      case Op::Concat: {
        int axis = nd.payload.axis;
        const Shape& os = nd.out[0].shape();
        int64_t pre, total, post;
        axis_strides(os, axis, pre, total, post);
        int64_t at = 0;
        for (size_t pi = 0; pi < nd.parents.size(); pi++) {
          const Shape& ps = pval((int)pi).shape();
          int64_t len = ps[axis];
          Tensor ga(ps);
          for (int64_t p = 0; p < pre; p++)
            for (int64_t k = 0; k < len; k++)
              for (int64_t q = 0; q < post; q++)
                ga[(p * len + k) * post + q] = g[(p * total + at + k) * post + q];
          acc(nd.parents[pi], std::move(ga));
          at += len;
        }
        break;
      }
      case Op::Reshape: {
        acc(nd.parents[0], Tensor(nd.payload.shape, g.vec()));
        break;
      }
      case Op::Fft2:
      case Op::Ifft2: {
        const Shape& s = nd.out[0].shape();
        Tensor gre = adj[ni][0].size() ? adj[ni][0] : Tensor(s, 0.0);
        Tensor gim = adj[ni][1].size() ? adj[ni][1] : Tensor(s, 0.0);
        int64_t plane = s[s.size() - 2] * s[s.size() - 1];
        // adjoint of the unnormalized forward DFT is N * ifft2; adjoint of the
        // 1/N inverse is (1/N) * fft2
        CTensor gc = nd.op == Op::Fft2 ? xrec::ifft2(CTensor(std::move(gre), std::move(gim)))
                                       : xrec::fft2(CTensor(std::move(gre), std::move(gim)));
        double scale = nd.op == Op::Fft2 ? (double)plane : 1.0 / (double)plane;
        for (int64_t i = 0; i < gc.re.size(); i++) {
          gc.re[i] *= scale;
          gc.im[i] *= scale;
        }
        acc(nd.parents[0], std::move(gc.re));
        acc(nd.parents[1], std::move(gc.im));
        break;
      }
      case Op::Bilinear: {
        const Tensor& img = pval(0);
        const Tensor& ty = pval(1);
        const Tensor& tx = pval(2);
        int64_t h = img.dim(0), w = img.dim(1);
        double fill = nd.payload.fill;
        Tensor gimg(img.shape(), 0.0), gy(ty.shape(), 0.0), gx(tx.shape(), 0.0);
        for (int64_t i = 0; i < g.size(); i++) {
          TapRefs t = bilinear_taps(ty[i], tx[i], h, w);
          double gi = g[i];
          if (t.v00) gimg.at2(t.y0, t.x0) += gi * (1 - t.fy) * (1 - t.fx);
          if (t.v01) gimg.at2(t.y0, t.x1) += gi * (1 - t.fy) * t.fx;
          if (t.v10) gimg.at2(t.y1, t.x0) += gi * t.fy * (1 - t.fx);
          if (t.v11) gimg.at2(t.y1, t.x1) += gi * t.fy * t.fx;
          double v00 = t.v00 ? img.at2(t.y0, t.x0) : fill;
          double v01 = t.v01 ? img.at2(t.y0, t.x1) : fill;
          double v10 = t.v10 ? img.at2(t.y1, t.x0) : fill;
          double v11 = t.v11 ? img.at2(t.y1, t.x1) : fill;
          gy[i] = gi * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
          gx[i] = gi * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
        }
        acc(nd.parents[0], std::move(gimg));
        acc(nd.parents[1], std::move(gy));
        acc(nd.parents[2], std::move(gx));
        break;
      }
      case Op::WhereMask: {
        const Tensor& mask = nd.payload.mask;
        Tensor ga(g.shape()), gb(g.shape());
        for (int64_t i = 0; i < g.size(); i++) {
          ga[i] = mask[i] != 0.0 ? g[i] : 0.0;
          gb[i] = mask[i] != 0.0 ? 0.0 : g[i];
        }
        acc(nd.parents[0], reduce_like(std::move(ga), pshape(0)));
        acc(nd.parents[1], reduce_like(std::move(gb), pshape(1)));
        break;
      }
      case Op::Leaf:
      case Op::Const:
        break;
    }
  }

  std::map<std::string, Tensor> result;
  for (const auto& name : leaves) {
    ValueRef r = leaves_.at(name);
    Tensor& a = adj[r.node][r.slot];
    result[name] = a.size() ? std::move(a) : Tensor(nodes_[r.node].out[0].shape(), 0.0);
  }
  return result;
}

// ---- operator sugar ----

static Tape* tape_of(Var a, Var b) {
  Tape* t = a.tape ? a.tape : b.tape;
  if (!t) throw Error("operator on empty Vars");
  return t;
}

Var operator+(Var a, Var b) { return tape_of(a, b)->add(a, b); }
Var operator-(Var a, Var b) { return tape_of(a, b)->sub(a, b); }
Var operator*(Var a, Var b) { return tape_of(a, b)->mul(a, b); }
Var operator/(Var a, Var b) { return tape_of(a, b)->div(a, b); }
Var operator-(Var a) { return a.tape->neg(a); }
Var operator+(Var a, double b) { return a.tape->add(a, a.tape->constant(b)); }
Var operator-(Var a, double b) { return a.tape->sub(a, a.tape->constant(b)); }
Var operator*(Var a, double b) { return a.tape->mul(a, a.tape->constant(b)); }
Var operator/(Var a, double b) { return a.tape->div(a, a.tape->constant(b)); }
Var operator+(double a, Var b) { return b.tape->add(b.tape->constant(a), b); }
Var operator-(double a, Var b) { return b.tape->sub(b.tape->constant(a), b); }
Var operator*(double a, Var b) { return b.tape->mul(b.tape->constant(a), b); }

// ---- complex helpers ----

CVar cvar(Var re, Var im) { return CVar{re, im}; }

CVar cconst(Tape& t, const CTensor& v) { return CVar{t.constant(v.re), t.constant(v.im)}; }

CVar cadd(CVar a, CVar b) { return {a.re + b.re, a.im + b.im}; }
CVar csub(CVar a, CVar b) { return {a.re - b.re, a.im - b.im}; }

CVar cmul(CVar a, CVar b) {
  return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re};
}

CVar cconj(CVar a) { return {a.re, -a.im}; }

CVar cscale(Var s, CVar a) { return {s * a.re, s * a.im}; }

Var cabs2(CVar a) { return a.re * a.re + a.im * a.im; }

CVar cexp_i(Var phase) { return {phase.tape->cos(phase), phase.tape->sin(phase)}; }

CVar fft2c(CVar a) {
  auto [re, im] = a.re.tape->fft2(a.re, a.im);
  return {re, im};
}

CVar ifft2c(CVar a) {
  auto [re, im] = a.re.tape->ifft2(a.re, a.im);
  return {re, im};
}

GradCheckResult grad_check(
    const std::function<Var(Tape&, const std::map<std::string, Tensor>&)>& build,
    const std::map<std::string, Tensor>& point, double step) {
  Tape t;
  Var loss = build(t, point);
  if (loss.val().size() != 1) throw Error("grad_check: loss must be scalar");
  std::vector<std::string> names;
  for (const auto& kv : point) names.push_back(kv.first);
  auto grads = t.gradient(loss, names);

  auto eval = [&](const std::map<std::string, Tensor>& p) {
    Tape tt;
    Var l = build(tt, p);
    return l.val()[0];
  };

  GradCheckResult r;
  for (const auto& [name, x0] : point) {
    for (int64_t i = 0; i < x0.size(); i++) {
      auto perturbed = point;
      perturbed[name][i] = x0[i] + step;
      double fp = eval(perturbed);
      perturbed[name][i] = x0[i] - step;
      double fm = eval(perturbed);
      double fd = (fp - fm) / (2.0 * step);
      double ad = grads[name][i];
      double rel = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
      if (rel > r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst_leaf = name;
        r.worst_index = i;
        r.ad = ad;
        r.fd = fd;
      }
    }
  }
  return r;
}

}  // namespace xrec
