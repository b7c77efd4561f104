#include "xrec/regularizers.hpp"

#include <cmath>

namespace xrec {

namespace {

int64_t voxel_count(const Shape& s) { return s[0] * s[1] * s[2]; }

void check_packed(const Shape& s, Representation) {
  if (s.size() != 4) throw Error("regularizer: object must be [Ly, Lx, Lz, C]");
  if (s[3] != 2) throw Error("regularizer: object must carry 2 channels");
}

Var channel(Tape& t, Var packed, int64_t c) {
  const Shape& s = packed.shape();
  return t.reshape(t.slice(packed, {0, 0, 0, c}, {s[0], s[1], s[2], 1}), {s[0], s[1], s[2]});
}

// the two penalized maps: (delta, beta) or (|O| - mean|O|, arg O)
std::pair<Var, Var> penalty_maps(Tape& t, Var object, Representation rep) {
  Var a = channel(t, object, 0);
  Var b = channel(t, object, 1);
  if (rep == Representation::DeltaBeta) return {a, b};
  Var mag = t.sqrt(t.add(t.mul(a, a), t.mul(b, b)));
  Var centered = t.sub(mag, t.mean(mag));
  Var arg = t.atan2(b, a);
  return {centered, arg};
}

// same maps, plain tensors, for weight snapshots
std::pair<Tensor, Tensor> penalty_maps_plain(const Tensor& object, Representation rep) {
  const Shape& s = object.shape();
  Tensor a({s[0], s[1], s[2]}), b({s[0], s[1], s[2]});
  for (int64_t i = 0; i < a.size(); i++) {
    a[i] = object[2 * i];
    b[i] = object[2 * i + 1];
  }
  if (rep == Representation::DeltaBeta) return {a, b};
  Tensor mag(a.shape()), arg(a.shape());
  for (int64_t i = 0; i < a.size(); i++) {
    mag[i] = std::hypot(a[i], b[i]);
    arg[i] = std::atan2(b[i], a[i]);
  }
  double mean = mag.mean();
  for (int64_t i = 0; i < mag.size(); i++) mag[i] -= mean;
  return {mag, arg};
}

Tensor weight_of(const Tensor& c, double eps) {
  Tensor w(c.shape());
  double peak = 0;
  for (int64_t i = 0; i < c.size(); i++) peak = std::max(peak, std::abs(c[i]));
  for (int64_t i = 0; i < c.size(); i++) w[i] = peak / (std::abs(c[i]) + eps);
  return w;
}

// sum of |forward differences| along every spatial axis longer than 1
Var tv_of(Tape& t, Var c) {
  const Shape& s = c.shape();
  Var total = t.constant(0.0);
  for (int axis = 0; axis < 3; axis++) {
    if (s[axis] < 2) continue;
    std::vector<int64_t> lo(3, 0), hi(3, 0);
    Shape ext = s;
    ext[axis] -= 1;
    hi[axis] = 1;
    Var diff = t.sub(t.slice(c, hi, ext), t.slice(c, lo, ext));
    total = t.add(total, t.sum(t.abs(diff)));
  }
  return total;
}

// zero-padded separable Gaussian blur of a 2D map
Tensor gaussian_blur2(const Tensor& m, double sigma) {
  if (sigma <= 0.0) return m;
  const int64_t radius = (int64_t)std::ceil(3.0 * sigma);
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0;
  for (int64_t j = -radius; j <= radius; j++) {
    kernel[j + radius] = std::exp(-(double)(j * j) / (2.0 * sigma * sigma));
    norm += kernel[j + radius];
  }
  for (double& k : kernel) k /= norm;
  const int64_t ny = m.shape()[0], nx = m.shape()[1];
  Tensor tmp({ny, nx}), out({ny, nx});
  for (int64_t y = 0; y < ny; y++)
    for (int64_t x = 0; x < nx; x++) {
      double acc = 0;
      for (int64_t j = -radius; j <= radius; j++) {
        int64_t xx = x + j;
        if (xx >= 0 && xx < nx) acc += kernel[j + radius] * m.at2(y, xx);
      }
      tmp.at2(y, x) = acc;
    }
  for (int64_t y = 0; y < ny; y++)
    for (int64_t x = 0; x < nx; x++) {
      double acc = 0;
      for (int64_t j = -radius; j <= radius; j++) {
        int64_t yy = y + j;
        if (yy >= 0 && yy < ny) acc += kernel[j + radius] * tmp.at2(yy, x);
      }
      out.at2(y, x) = acc;
    }
  return out;
}

// per-voxel deviation from vacuum, collapsed over z to a lateral map
Tensor structure_map(const Tensor& object, Representation rep) {
  const Shape& s = object.shape();
  Tensor m({s[0], s[1]});
  for (int64_t y = 0; y < s[0]; y++)
    for (int64_t x = 0; x < s[1]; x++) {
      double peak = 0;
      for (int64_t z = 0; z < s[2]; z++) {
        double a = object[((y * s[1] + x) * s[2] + z) * 2];
        double b = object[((y * s[1] + x) * s[2] + z) * 2 + 1];
        double v = rep == Representation::RealImag ? std::hypot(a - 1.0, b) : std::hypot(a, b);
        peak = std::max(peak, v);
      }
      m.at2(y, x) = peak;
    }
  return m;
}

}  // namespace

Var reg_l1(Tape& t, Var object, double a1, double a2, Representation rep) {
  if (a1 < 0.0 || a2 < 0.0) throw Error("l1 weights must be non-negative");
  check_packed(object.shape(), rep);
  auto [c1, c2] = penalty_maps(t, object, rep);
  const double no = (double)voxel_count(object.shape());
  Var v1 = t.sum(t.abs(c1)) * (a1 / no);
  Var v2 = t.sum(t.abs(c2)) * (a2 / no);
  return t.add(v1, v2);
}

void refresh_weights(ReweightState& state, const Tensor& object, Representation rep) {
  check_packed(object.shape(), rep);
  if (!(state.eps > 0.0)) throw Error("reweight epsilon must be positive");
  auto [c1, c2] = penalty_maps_plain(object, rep);
  state.w1 = weight_of(c1, state.eps);
  state.w2 = weight_of(c2, state.eps);
  state.w1.require_finite("reweight w1");
  state.w2.require_finite("reweight w2");
}

Var reg_reweighted_l1(Tape& t, Var object, double a1, double a2, Representation rep,
                      const ReweightState& state) {
  if (a1 < 0.0 || a2 < 0.0) throw Error("l1 weights must be non-negative");
  check_packed(object.shape(), rep);
  const Shape vox = {object.shape()[0], object.shape()[1], object.shape()[2]};
  if (state.w1.shape() != vox || state.w2.shape() != vox)
    throw Error("reweight state does not match the object shape; refresh_weights first");
  auto [c1, c2] = penalty_maps(t, object, rep);
  const double no = (double)voxel_count(object.shape());
  // weights enter as constants: the snapshot is invisible to the tape
  Var v1 = t.sum(t.mul(t.constant(state.w1), t.abs(c1))) * (a1 / no);
  Var v2 = t.sum(t.mul(t.constant(state.w2), t.abs(c2))) * (a2 / no);
  return t.add(v1, v2);
}

Var reg_tv(Tape& t, Var object, double gamma, Representation rep) {
  if (gamma < 0.0) throw Error("tv weight must be non-negative");
  check_packed(object.shape(), rep);
  auto [c1, c2] = penalty_maps(t, object, rep);
  const double no = (double)voxel_count(object.shape());
  return t.add(tv_of(t, c1), tv_of(t, c2)) * (gamma / no);
}

SupportMask shrink_wrap(const Tensor& object, Representation rep, const SupportMask& prev) {
  check_packed(object.shape(), rep);
  if (prev.threshold < 0.0) throw Error("support threshold must be non-negative");
  Tensor smooth = gaussian_blur2(structure_map(object, rep), prev.sigma);
  double peak = smooth.max();
  SupportMask next = prev;
  next.mask = Tensor(smooth.shape());
  int64_t kept = 0;
  for (int64_t i = 0; i < smooth.size(); i++) {
    next.mask[i] = smooth[i] >= prev.threshold * peak ? 1.0 : 0.0;
    kept += (int64_t)next.mask[i];
  }
  if (kept == 0)
    throw Error("shrink wrap produced an empty support; threshold " +
                std::to_string(prev.threshold) + " is too aggressive");
  return next;
}

void apply_support(Tensor& object, Representation rep, const SupportMask& mask) {
  const Shape& s = object.shape();
  check_packed(s, rep);
  if (mask.mask.shape() != Shape{s[0], s[1]})
    throw Error("support mask shape does not match the object plane");
  for (int64_t y = 0; y < s[0]; y++)
    for (int64_t x = 0; x < s[1]; x++) {
      if (mask.mask.at2(y, x) != 0.0) continue;
      for (int64_t z = 0; z < s[2]; z++) {
        double* a = &object[((y * s[1] + x) * s[2] + z) * 2];
        a[0] = rep == Representation::RealImag ? 1.0 : 0.0;
        a[1] = 0.0;
      }
    }
}

}  // namespace xrec
