#include "xrec/transforms.hpp"

#include <cmath>
#include <string>

namespace xrec {

namespace {

// same tap rule as Tape::bilinear: 4 floor-neighbour taps, out-of-bounds taps
// read the fill value
double sample_one(const Tensor& img, double y, double x, double fill) {
  const int64_t h = img.dim(0), w = img.dim(1);
  const double fy0 = std::floor(y), fx0 = std::floor(x);
  const int64_t y0 = (int64_t)fy0, x0 = (int64_t)fx0;
  const int64_t y1 = y0 + 1, x1 = x0 + 1;
  const double fy = y - fy0, fx = x - fx0;
  auto in = [&](int64_t yy, int64_t xx) { return yy >= 0 && yy < h && xx >= 0 && xx < w; };
  const double v00 = in(y0, x0) ? img.at2(y0, x0) : fill;
  const double v01 = in(y0, x1) ? img.at2(y0, x1) : fill;
  const double v10 = in(y1, x0) ? img.at2(y1, x0) : fill;
  const double v11 = in(y1, x1) ? img.at2(y1, x1) : fill;
  return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
}

void in_plane_axes(int axis, int& a1, int& a2) {
  switch (axis) {
    case 0: a1 = 1; a2 = 2; return;
    case 1: a1 = 0; a2 = 2; return;
    case 2: a1 = 0; a2 = 1; return;
    default: throw Error("rotate_volume: axis must be 0, 1 or 2");
  }
}

}  // namespace

Mat3 mat3_identity() {
  return Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
}

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++) {
      double s = 0;
      for (int k = 0; k < 3; k++) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

Mat3 mat3_inverse(const Mat3& a) {
  Mat3 c{};
  double det = 0;
  for (int i = 0; i < 3; i++)
    det += a[0][i] * (a[1][(i + 1) % 3] * a[2][(i + 2) % 3] -
                      a[1][(i + 2) % 3] * a[2][(i + 1) % 3]);
  if (std::abs(det) < 1e-12) throw Error("mat3_inverse: singular matrix");
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++)
      c[j][i] = (a[(i + 1) % 3][(j + 1) % 3] * a[(i + 2) % 3][(j + 2) % 3] -
                 a[(i + 1) % 3][(j + 2) % 3] * a[(i + 2) % 3][(j + 1) % 3]) /
                det;
  return c;
}

Mat3 affine_matrix(const AffineParams& p) {
  if (!(p.sx > 0.0) || !(p.sy > 0.0)) throw Error("affine_matrix: scales must be positive");
  const double c = std::cos(p.phi), s = std::sin(p.phi);
  Mat3 rot{{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
  Mat3 shear{{{1, p.cx, 0}, {p.cy, 1, 0}, {0, 0, 1}}};
  Mat3 scale{{{p.sx, 0, 0}, {0, p.sy, 0}, {0, 0, 1}}};
  Mat3 trans{{{1, 0, p.dx}, {0, 1, p.dy}, {0, 0, 1}}};
  return mat3_mul(mat3_mul(rot, shear), mat3_mul(scale, trans));
}

double d_affine(const Mat3& a_r, const Mat3& a_0) {
  Mat3 m = mat3_mul(a_r, a_0);
  const double x = m[0][0] + m[0][1] + m[0][2];
  const double y = m[1][0] + m[1][1] + m[1][2];
  return std::hypot(x - 1.0, y - 1.0) / std::sqrt(2.0);
}

double vacuum_fill(Representation rep, int channel) {
  return rep == Representation::RealImag && channel == 0 ? 1.0 : 0.0;
}

Tensor bilinear_sample(const Tensor& image, const Tensor& cy, const Tensor& cx, double fill) {
  if (image.rank() != 2)
    throw Error("bilinear_sample: image must be rank-2, got " + shape_str(image.shape()));
  if (!same_shape(cy.shape(), cx.shape())) throw Error("bilinear_sample: coordinate shape mismatch");
  cy.require_finite("bilinear_sample cy");
  cx.require_finite("bilinear_sample cx");
  Tensor out(cy.shape());
  for (int64_t i = 0; i < out.size(); i++) out[i] = sample_one(image, cy[i], cx[i], fill);
  return out;
}

Tensor rotate_volume(const Tensor& volume, double theta, int axis, double fill) {
  if (volume.rank() != 3)
    throw Error("rotate_volume: volume must be rank-3, got " + shape_str(volume.shape()));
  int a1, a2;
  in_plane_axes(axis, a1, a2);
  const int64_t ns = volume.dim(axis), np = volume.dim(a1), nq = volume.dim(a2);
  const double cp = (double)(np - 1) / 2.0, cq = (double)(nq - 1) / 2.0;
  const double c = std::cos(theta), s = std::sin(theta);

  Tensor out(volume.shape());
  std::vector<int64_t> idx(3);
  Tensor plane({np, nq});
  for (int64_t k = 0; k < ns; k++) {
    for (int64_t u = 0; u < np; u++)
      for (int64_t v = 0; v < nq; v++) {
        idx[axis] = k;
        idx[a1] = u;
        idx[a2] = v;
        plane.at2(u, v) = volume.at3(idx[0], idx[1], idx[2]);
      }
    for (int64_t u = 0; u < np; u++)
      for (int64_t v = 0; v < nq; v++) {
        const double ur = (double)u - cp, vr = (double)v - cq;
        const double u0 = c * ur - s * vr + cp;
        const double v0 = s * ur + c * vr + cq;
        idx[axis] = k;
        idx[a1] = u;
        idx[a2] = v;
        out.at3(idx[0], idx[1], idx[2]) = sample_one(plane, u0, v0, fill);
      }
  }
  return out;
}

Var rotate_volume(Tape& t, Var volume, Var theta, int axis, double fill) {
  if (!volume.valid() || volume.shape().size() != 3)
    throw Error("rotate_volume: volume must be rank-3");
  if (!theta.valid() || theta.size() != 1)
    throw Error("rotate_volume: theta must be a single value");
  int a1, a2;
  in_plane_axes(axis, a1, a2);
  const Shape vs = volume.shape();
  const int64_t ns = vs[axis], np = vs[a1], nq = vs[a2];
  const double cp = (double)(np - 1) / 2.0, cq = (double)(nq - 1) / 2.0;

  // centered in-plane coordinate grids; the angle enters through cos/sin nodes
  Tensor ug({np, nq}), vg({np, nq});
  for (int64_t u = 0; u < np; u++)
    for (int64_t v = 0; v < nq; v++) {
      ug.at2(u, v) = (double)u - cp;
      vg.at2(u, v) = (double)v - cq;
    }
  Var cs = t.cos(theta), sn = t.sin(theta);
  Var ugrid = t.constant(std::move(ug)), vgrid = t.constant(std::move(vg));
  Var u0 = t.mul(ugrid, cs) - t.mul(vgrid, sn) + cp;
  Var v0 = t.mul(ugrid, sn) + t.mul(vgrid, cs) + cq;

  std::vector<Var> slabs;
  slabs.reserve((size_t)ns);
  std::vector<int64_t> off(3, 0);
  Shape ext = vs;
  ext[axis] = 1;
  for (int64_t k = 0; k < ns; k++) {
    off[axis] = k;
    Var plane = t.reshape(t.slice(volume, off, ext), {np, nq});
    Var turned = t.bilinear(plane, u0, v0, fill);
    slabs.push_back(t.reshape(turned, ext));
  }
  return t.concat(slabs, axis);
}

Tensor apply_affine(const Tensor& image, const Mat3& a, double fill) {
  if (image.rank() != 2)
    throw Error("apply_affine: image must be rank-2, got " + shape_str(image.shape()));
  const int64_t ny = image.dim(0), nx = image.dim(1);
  const double cyc = (double)(ny - 1) / 2.0, cxc = (double)(nx - 1) / 2.0;
  Tensor out({ny, nx});
  for (int64_t r = 0; r < ny; r++)
    for (int64_t cidx = 0; cidx < nx; cidx++) {
      const double x = (double)cidx - cxc, y = (double)r - cyc;
      const double sx = a[0][0] * x + a[0][1] * y + a[0][2];
      const double sy = a[1][0] * x + a[1][1] * y + a[1][2];
      out.at2(r, cidx) = sample_one(image, sy + cyc, sx + cxc, fill);
    }
  return out;
}

Var apply_affine(Tape& t, Var image, const std::array<Var, 6>& rows, double fill) {
  if (!image.valid() || image.shape().size() != 2)
    throw Error("apply_affine: image must be rank-2");
  const int64_t ny = image.shape()[0], nx = image.shape()[1];
  const double cyc = (double)(ny - 1) / 2.0, cxc = (double)(nx - 1) / 2.0;
  Tensor xg({ny, nx}), yg({ny, nx});
  for (int64_t r = 0; r < ny; r++)
    for (int64_t c = 0; c < nx; c++) {
      xg.at2(r, c) = (double)c - cxc;
      yg.at2(r, c) = (double)r - cyc;
    }
  Var xgrid = t.constant(std::move(xg)), ygrid = t.constant(std::move(yg));
  Var sx = t.mul(xgrid, rows[0]) + t.mul(ygrid, rows[1]) + rows[2];
  Var sy = t.mul(xgrid, rows[3]) + t.mul(ygrid, rows[4]) + rows[5];
  return t.bilinear(image, sy + cyc, sx + cxc, fill);
}

std::array<Var, 6> affine_matrix_vars(Tape& t, Var params7) {
  if (!params7.valid() || params7.shape() != Shape{7})
    throw Error("affine_matrix_vars: params must be a [7] vector");
  auto at = [&](int64_t i) { return t.slice(params7, {i}, {1}); };
  Var phi = at(0), cx = at(1), cy = at(2), sx = at(3), sy = at(4), dx = at(5), dy = at(6);
  if (!(sx.val()[0] > 0.0) || !(sy.val()[0] > 0.0))
    throw Error("affine_matrix_vars: scales must be positive");
  Var c = t.cos(phi), s = t.sin(phi);

  // R(phi) . Shear . Scale, expanded symbolically (the translate factor only
  // contributes the last column)
  Var m00 = t.mul(c - t.mul(s, cy), sx);
  Var m01 = t.mul(t.mul(c, cx) - s, sy);
  Var m10 = t.mul(s + t.mul(c, cy), sx);
  Var m11 = t.mul(t.mul(s, cx) + c, sy);
  Var m02 = t.mul(m00, dx) + t.mul(m01, dy);
  Var m12 = t.mul(m10, dx) + t.mul(m11, dy);
  return {m00, m01, m02, m10, m11, m12};
}

}  // namespace xrec
