#include "xrec/optics.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace xrec {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_field(const CVar& psi, const char* who) {
  if (!psi.re.valid() || !psi.im.valid()) throw Error(std::string(who) + ": invalid field");
  if (psi.re.shape().size() != 2) throw Error(std::string(who) + ": field must be rank-2");
}

void check_spec(const PropSpec& spec, const char* who) {
  if (!(spec.wavelength > 0.0) || !(spec.pitch > 0.0))
    throw Error(std::string(who) + ": wavelength and pitch must be positive");
}

// |nu|^2 on the fftfreq grid, cycles^2 / m^2
Tensor nu_sq_grid(int64_t ny, int64_t nx, double pitch) {
  FrequencyGrid g = freq_grid(ny, nx, pitch);
  Tensor out({ny, nx});
  for (int64_t i = 0; i < out.size(); i++)
    out[i] = g.fy[i] * g.fy[i] + g.fx[i] * g.fx[i];
  return out;
}

double plane_size(const CVar& psi) {
  const Shape& s = psi.re.shape();
  return (double)(s[s.size() - 2] * s[s.size() - 1]);
}

}  // namespace

CVar fresnel_kernel(Tape& t, int64_t ny, int64_t nx, Var distance, const PropSpec& spec) {
  check_spec(spec, "fresnel_kernel");
  if (ny < 1 || nx < 1) throw Error("fresnel_kernel: empty grid");
  if (!distance.valid() || distance.size() != 1)
    throw Error("fresnel_kernel: distance must be a single value");
  const double sgn = spec.sign == SignConvention::Negative ? 1.0 : -1.0;
  Tensor nu2 = nu_sq_grid(ny, nx, spec.pitch);

  if (spec.kernel == KernelKind::Paraxial) {
    // phase/d = sgn * pi * lambda * |nu|^2; the distance multiply keeps d on tape
    for (double& v : nu2.vec()) v *= sgn * kPi * spec.wavelength;
    return cexp_i(t.mul(t.constant(std::move(nu2)), distance));
  }

  // Sommerfeld: phase/d = -sgn * k * sqrt(1 - lambda^2 |nu|^2); evanescent -> 0
  const double k = 2.0 * kPi / spec.wavelength;
  const double l2 = spec.wavelength * spec.wavelength;
  Tensor rate(nu2.shape());
  Tensor mask(nu2.shape());
  for (int64_t i = 0; i < nu2.size(); i++) {
    const double arg = 1.0 - l2 * nu2[i];
    if (arg > 0.0) {
      rate[i] = -sgn * k * std::sqrt(arg);
      mask[i] = 1.0;
    }
  }
  CVar h = cexp_i(t.mul(t.constant(std::move(rate)), distance));
  Var zero = t.constant(0.0);
  return cvar(t.where_mask(h.re, zero, mask), t.where_mask(h.im, zero, mask));
}

CVar fresnel_propagate(Tape& t, CVar psi, Var distance, const PropSpec& spec) {
  check_field(psi, "fresnel_propagate");
  const Shape& s = psi.re.shape();
  CVar h = fresnel_kernel(t, s[0], s[1], distance, spec);
  return ifft2c(cmul(fft2c(psi), h));
}

CVar fresnel_propagate(Tape& t, CVar psi, double distance, const PropSpec& spec) {
  return fresnel_propagate(t, psi, t.constant(distance), spec);
}

CVar fraunhofer_propagate(Tape& t, CVar psi, const PropSpec& spec) {
  check_field(psi, "fraunhofer_propagate");
  const double n = plane_size(psi);
  if (spec.sign == SignConvention::Negative)
    return cscale(t.constant(std::sqrt(n)), ifft2c(psi));
  return cscale(t.constant(1.0 / std::sqrt(n)), fft2c(psi));
}

CVar modulate(Tape& t, CVar psi, const ObjectSlice& s, Representation rep, Var dz,
              const PropSpec& spec) {
  check_field(psi, "modulate");
  if (!s.a.valid() || !s.b.valid()) throw Error("modulate: invalid slice");
  if (!same_shape(s.a.shape(), psi.re.shape()) || !same_shape(s.b.shape(), psi.re.shape()))
    throw Error("modulate: slice shape " + shape_str(s.a.shape()) + " does not match field " +
                shape_str(psi.re.shape()));
  if (rep == Representation::RealImag) return cmul(psi, cvar(s.a, s.b));

  check_spec(spec, "modulate");
  if (!dz.valid() || dz.size() != 1) throw Error("modulate: dz must be a single value");
  const double k = 2.0 * kPi / spec.wavelength;
  const double sgn = spec.sign == SignConvention::Negative ? 1.0 : -1.0;
  Var amp = t.exp(t.mul(s.b, dz) * -k);
  Var phase = t.mul(s.a, dz) * (sgn * k);
  return cmul(psi, cscale(amp, cexp_i(phase)));
}

CVar modulate(Tape& t, CVar psi, const ObjectSlice& s, Representation rep, double dz,
              const PropSpec& spec) {
  return modulate(t, psi, s, rep, t.constant(dz), spec);
}

CVar multislice_propagate(Tape& t, CVar psi, const std::vector<ObjectSlice>& stack,
                          Representation rep, double dz, const PropSpec& spec) {
  check_field(psi, "multislice_propagate");
  if (stack.empty()) throw Error("multislice_propagate: empty slice stack");
  Var dzv = t.constant(dz);
  CVar w = psi;
  for (const ObjectSlice& s : stack) {
    w = modulate(t, w, s, rep, dzv, spec);
    w = fresnel_propagate(t, w, dzv, spec);
  }
  return w;
}

CVar multislice_sparse(Tape& t, CVar psi, const std::vector<ObjectSlice>& stack,
                       Representation rep, Var positions, const PropSpec& spec,
                       double slice_thickness, double exit_distance) {
  check_field(psi, "multislice_sparse");
  const int64_t n = (int64_t)stack.size();
  if (n == 0) throw Error("multislice_sparse: empty slice stack");
  if (!positions.valid() || positions.shape() != Shape{n})
    throw Error("multislice_sparse: positions must be a [" + std::to_string(n) + "] vector");
  const Tensor& p = positions.val();
  for (int64_t j = 1; j < n; j++)
    if (!(p[j] > p[j - 1]))
      throw Error("multislice_sparse: positions must be strictly increasing");

  Var dzv = t.constant(slice_thickness > 0.0 ? slice_thickness : spec.pitch);
  CVar w = modulate(t, psi, stack[0], rep, dzv, spec);
  for (int64_t j = 1; j < n; j++) {
    Var gap = t.slice(positions, {j}, {1}) - t.slice(positions, {j - 1}, {1});
    w = fresnel_propagate(t, w, gap, spec);
    w = modulate(t, w, stack[j], rep, dzv, spec);
  }
  if (exit_distance != 0.0) w = fresnel_propagate(t, w, exit_distance, spec);
  return w;
}

CVar project_modulate(Tape& t, CVar psi, const std::vector<ObjectSlice>& volume,
                      Representation rep, Var dz, const PropSpec& spec) {
  check_field(psi, "project_modulate");
  if (volume.empty()) throw Error("project_modulate: empty volume");
  if (rep == Representation::RealImag) {
    CVar w = psi;
    for (const ObjectSlice& s : volume) w = cmul(w, cvar(s.a, s.b));
    return w;
  }
  Var a = volume[0].a;
  Var b = volume[0].b;
  for (size_t j = 1; j < volume.size(); j++) {
    a = a + volume[j].a;
    b = b + volume[j].b;
  }
  return modulate(t, psi, ObjectSlice{a, b}, rep, dz, spec);
}

CVar fourier_shift(Tape& t, CVar psi, Var shift) {
  check_field(psi, "fourier_shift");
  if (!shift.valid() || shift.shape() != Shape{2})
    throw Error("fourier_shift: shift must be a [2] vector (dy, dx)");
  const Shape& s = psi.re.shape();
  const int64_t ny = s[0], nx = s[1];
  std::vector<double> fy = fft_freqs(ny, 1.0);
  std::vector<double> fx = fft_freqs(nx, 1.0);
  Tensor gy({ny, nx});
  Tensor gx({ny, nx});
  for (int64_t i = 0; i < ny; i++)
    for (int64_t j = 0; j < nx; j++) {
      gy.at2(i, j) = -2.0 * kPi * fy[i];
      gx.at2(i, j) = -2.0 * kPi * fx[j];
    }
  Var dy = t.slice(shift, {0}, {1});
  Var dx = t.slice(shift, {1}, {1});
  Var phase = t.mul(t.constant(std::move(gy)), dy) + t.mul(t.constant(std::move(gx)), dx);
  return ifft2c(cmul(fft2c(psi), cexp_i(phase)));
}

CVar with_buffer_zone(Tape& t, CVar field, int64_t pad,
                      const std::function<CVar(Tape&, CVar)>& inner) {
  check_field(field, "with_buffer_zone");
  if (pad < 0) throw Error("with_buffer_zone: pad must be >= 0");
  const Shape s = field.re.shape();
  if (pad > s[0] || pad > s[1]) throw Error("with_buffer_zone: pad exceeds the tile extent");
  if (pad == 0) {
    CVar out = inner(t, field);
    if (!same_shape(out.re.shape(), s))
      throw Error("with_buffer_zone: inner op changed the field shape");
    return out;
  }
  std::vector<std::array<int64_t, 2>> widths{{pad, pad}, {pad, pad}};
  CVar big = cvar(t.pad(field.re, widths, PadMode::Edge), t.pad(field.im, widths, PadMode::Edge));
  CVar out = inner(t, big);
  if (!same_shape(out.re.shape(), big.re.shape()))
    throw Error("with_buffer_zone: inner op changed the field shape");
  return cvar(t.slice(out.re, {pad, pad}, s), t.slice(out.im, {pad, pad}, s));
}

}  // namespace xrec
