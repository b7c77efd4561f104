#pragma once

#include <functional>
#include <vector>

#include "xrec/autodiff.hpp"

// Differentiable wave optics: free-space transfer functions, Fraunhofer
// far-field, object modulation in both representations, uniform and sparse
// multislice, pure projection, Fourier-space subpixel shift, and the padded
// "buffer zone" wrapper for tiled fields. Everything is built from tape
// primitives, so gradients flow through distances, slice gaps, and shifts.
//
// Units are SI: wavelength, pixel pitch and distances in meters. Frequency
// grids use the fftfreq layout from tensor.hpp (cycles per meter), except
// fourier_shift which works in pixels (cycles per pixel).

namespace xrec {

enum class KernelKind { Paraxial, Sommerfeld };

// Phase-sign convention of the wave. Negative keeps the kernels as written
// below; Positive conjugates kernel and refractive modulation phases and
// swaps the transform direction in fraunhofer_propagate. Intensities are
// convention-independent when the flag is threaded through the whole model.
enum class SignConvention { Negative, Positive };

struct PropSpec {
  double wavelength = 0.0;  // m
  double pitch = 0.0;       // m per pixel
  KernelKind kernel = KernelKind::Paraxial;
  SignConvention sign = SignConvention::Negative;
};

// Which pair of real channels describes the object.
//   DeltaBeta: (delta, beta) refractive decrement / absorption index
//   RealImag:  (Re, Im) of the complex transmission, vacuum = 1 + 0i
enum class Representation { DeltaBeta, RealImag };

// One object slice; `a` is delta or Re, `b` is beta or Im.
struct ObjectSlice {
  Var a, b;
};

// Free-space transfer function H(nu) for propagation by `distance`, on an
// [ny, nx] frequency grid. `distance` is a one-element tape value so it can
// be a refined leaf.
//   Paraxial:   H = exp(+i pi lambda d |nu|^2)
//   Sommerfeld: H = exp(-i k d sqrt(1 - lambda^2 |nu|^2)), k = 2 pi / lambda,
//               zeroed where lambda^2 |nu|^2 >= 1 (evanescent).
// Positive sign convention flips both phases.
CVar fresnel_kernel(Tape& t, int64_t ny, int64_t nx, Var distance, const PropSpec& spec);

// ifft2(fft2(psi) * H). Pitch is unchanged.
CVar fresnel_propagate(Tape& t, CVar psi, Var distance, const PropSpec& spec);
CVar fresnel_propagate(Tape& t, CVar psi, double distance, const PropSpec& spec);

// Unitary far-field transform: inverse DFT direction under the negative
// convention, forward under positive; either way sum |psi|^2 is preserved.
CVar fraunhofer_propagate(Tape& t, CVar psi, const PropSpec& spec);

// Single-slice modulation.
//   RealImag:  psi * (a + i b), dz ignored
//   DeltaBeta: psi * exp(-k b dz) * exp(+i k a dz)   (phase conjugated for
//              the positive convention)
CVar modulate(Tape& t, CVar psi, const ObjectSlice& s, Representation rep, Var dz,
              const PropSpec& spec);
CVar modulate(Tape& t, CVar psi, const ObjectSlice& s, Representation rep, double dz,
              const PropSpec& spec);

// Exit wave of prod_j (P_dz . M_j) psi, slices applied in beam order 0..n-1;
// every slice is followed by a dz propagation, the last one included.
CVar multislice_propagate(Tape& t, CVar psi, const std::vector<ObjectSlice>& stack,
                          Representation rep, double dz, const PropSpec& spec);

// Sparse variant: slice j sits at positions[j] (a [n] tape vector, strictly
// increasing; typically a leaf so slice spacings can be refined). The wave is
// modulated at each plane and propagated across the gaps in between; after
// the last slice it travels `exit_distance` further (0 = stop at the last
// plane). `slice_thickness` is the material thickness each plane stands for
// (delta/beta only; 0 = one pixel). With uniform spacing dz, thickness dz and
// exit_distance dz this reproduces multislice_propagate.
CVar multislice_sparse(Tape& t, CVar psi, const std::vector<ObjectSlice>& stack,
                       Representation rep, Var positions, const PropSpec& spec,
                       double slice_thickness = 0.0, double exit_distance = 0.0);

// Pure projection: one modulation by the z-integrated object (delta/beta sum
// scaled by dz, or the z-product of complex slices).
CVar project_modulate(Tape& t, CVar psi, const std::vector<ObjectSlice>& volume,
                      Representation rep, Var dz, const PropSpec& spec);

// Subpixel shift by shift = (dy, dx) pixels (a [2] tape vector):
// ifft2(fft2(psi) * exp(-2 pi i (dy fy + dx fx))), fy/fx in cycles/pixel.
// Positive integer dy rolls content toward larger y.
CVar fourier_shift(Tape& t, CVar psi, Var shift);

// Edge-replicate pad by `pad` pixels on all four sides, run `inner`, crop the
// center back out. Guards tiled propagation against wrap-around.
CVar with_buffer_zone(Tape& t, CVar field, int64_t pad,
                      const std::function<CVar(Tape&, CVar)>& inner);

}  // namespace xrec
