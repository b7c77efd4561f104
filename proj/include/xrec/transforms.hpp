#pragma once

#include <array>

#include "xrec/optics.hpp"

// Differentiable geometric resampling: plain and taped bilinear sampling,
// volume rotation about a coordinate axis (tomography / tilt refinement), and
// 2D affine warps for hologram alignment. Plain-Tensor and taped paths share
// the exact same tap arithmetic, so out-of-tape rotation of a volume matches
// the in-tape version bit for bit at equal angles.
//
// Conventions: warps are inverse maps (the matrix takes output coordinates to
// source coordinates, like grid_sample), anchored at the geometric center
// (N-1)/2 of each axis. Affine matrices act on homogeneous (x, y, 1) with x
// along the second (column) image axis.

namespace xrec {

// Order of the 7 refinable affine parameters wherever they appear as a flat
// array: [phi, c_x, c_y, S_x, S_y, dx, dy].
struct AffineParams {
  double phi = 0.0;            // tilt, radians
  double cx = 0.0, cy = 0.0;   // shear
  double sx = 1.0, sy = 1.0;   // scale (> 0)
  double dx = 0.0, dy = 0.0;   // translation, pixels
};

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 mat3_identity();
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Mat3 mat3_inverse(const Mat3& a);  // throws on singular input

// A = R(phi) . Shear(c) . Scale(S) . Translate(d), in exactly that order.
Mat3 affine_matrix(const AffineParams& p);

// |A_r A_0 r0 - r0| / |r0| with r0 = (1, 1); zero when A_r inverts A_0.
double d_affine(const Mat3& a_r, const Mat3& a_0);

// Out-of-range samples read this per-channel background: vacuum is (1, 0) for
// a Re/Im pair and 0 for delta/beta (and for anything else, e.g. gradients).
double vacuum_fill(Representation rep, int channel);

// Plain bilinear sampling of a rank-2 image at (cy, cx) source coordinates
// given per output pixel; same tap rule as Tape::bilinear.
Tensor bilinear_sample(const Tensor& image, const Tensor& cy, const Tensor& cx, double fill);

// Rotate a rank-3 volume about `axis` (0, 1 or 2); every plane perpendicular
// to the axis is inverse-mapped with [[cos, -sin], [sin, cos]] about the
// plane center and resampled. Slabs along the axis stay independent.
Tensor rotate_volume(const Tensor& volume, double theta, int axis, double fill);

// Taped rotation with a differentiable angle (a one-element tape value).
Var rotate_volume(Tape& t, Var volume, Var theta, int axis, double fill);

// Inverse-warp a rank-2 image: out(p) = image(A p) in centered homogeneous
// pixel coordinates.
Tensor apply_affine(const Tensor& image, const Mat3& a, double fill);

// Taped affine warp; `rows` holds the top two rows of A (x then y equation,
// each [m0 m1 m2] as one-element tape values), typically from
// affine_matrix_vars so the warp differentiates back to the parameters.
Var apply_affine(Tape& t, Var image, const std::array<Var, 6>& rows, double fill);

// Taped version of affine_matrix: params7 is a [7] tape vector in the order
// [phi, c_x, c_y, S_x, S_y, dx, dy]; returns the top two rows of A.
std::array<Var, 6> affine_matrix_vars(Tape& t, Var params7);

}  // namespace xrec
