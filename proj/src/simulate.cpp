#include "xrec/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "xrec/autodiff.hpp"
#include "xrec/metrics.hpp"

namespace xrec {

// ---------------------------------------------------------------------- rng

uint64_t SimRng::next_u64() {
  uint64_t z = (s_ += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double SimRng::uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

double SimRng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int64_t SimRng::poisson(double mean) {
  if (!(mean >= 0)) throw Error("poisson: mean must be >= 0");
  if (mean == 0.0) return 0;
  if (mean < 30.0) {
    // product-of-uniforms inversion; cost grows with the mean
    const double limit = std::exp(-mean);
    int64_t k = 0;
    double p = 1.0;
    do {
      k++;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }
  // transformed rejection with squeeze (PTRS); a handful of iterations at any mean
  const double b = 0.931 + 2.53 * std::sqrt(mean);
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  const double log_mean = std::log(mean);
  for (;;) {
    const double u = uniform() - 0.5;
    double v = uniform();
    const double us = 0.5 - std::abs(u);
    const int64_t k = (int64_t)std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= vr) return k;
    if (k < 0 || (us < 0.013 && v > us)) continue;
    if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
        (double)k * log_mean - mean - std::lgamma((double)k + 1.0))
      return k;
  }
}

// ----------------------------------------------------------------- phantoms

namespace {

double smoothstep(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

Tensor spoke_target(int64_t n, int n_spokes, double lo, double hi) {
  if (n < 4) throw Error("spoke_target: image too small");
  if (!(hi > lo)) throw Error("spoke_target: need hi > lo");
  Tensor out({n, n});
  const double c = (double)(n - 1) / 2.0;
  for (int64_t y = 0; y < n; y++)
    for (int64_t x = 0; x < n; x++) {
      const double dy = (double)y - c, dx = (double)x - c;
      const double r = std::hypot(dy, dx) / (0.5 * (double)n);
      const double th = std::atan2(dy, dx);
      const double lobes = 0.5 * (1.0 + std::cos((double)n_spokes * th));
      // fade the azimuthal singularity at the center and blend to a flat rim
      const double fade = smoothstep((r - 0.06) / 0.08) * (1.0 - smoothstep((r - 0.80) / 0.15));
      out.at2(y, x) = hi - (hi - lo) * lobes * fade;
    }
  return out;
}

Tensor turbulence(int64_t n, uint64_t seed, double lo, double hi) {
  if (n < 4) throw Error("turbulence: image too small");
  if (!(hi > lo)) throw Error("turbulence: need hi > lo");
  SimRng rng(seed);
  Tensor acc({n, n});
  double amp = 1.0;
  for (int oct = 0; oct < 4; oct++) {
    const int64_t g = 4 * ((int64_t)1 << oct) + 1;  // 5, 9, 17, 33 control points
    Tensor grid({g, g});
    for (int64_t i = 0; i < grid.size(); i++) grid[i] = 2.0 * rng.uniform() - 1.0;
    Tensor cy({n, n}), cx({n, n});
    const double sy = (double)(g - 1) / (double)(n - 1);
    for (int64_t y = 0; y < n; y++)
      for (int64_t x = 0; x < n; x++) {
        cy.at2(y, x) = (double)y * sy;
        cx.at2(y, x) = (double)x * sy;
      }
    Tensor up = bilinear_sample(grid, cy, cx, 0.0);
    for (int64_t i = 0; i < acc.size(); i++) acc[i] += amp * up[i];
    amp *= 0.5;
  }
  double mn = acc[0], mx = acc[0];
  for (int64_t i = 0; i < acc.size(); i++) {
    mn = std::min(mn, acc[i]);
    mx = std::max(mx, acc[i]);
  }
  if (mx == mn) {
    for (int64_t i = 0; i < acc.size(); i++) acc[i] = 0.5 * (lo + hi);
    return acc;
  }
  for (int64_t i = 0; i < acc.size(); i++) acc[i] = lo + (hi - lo) * (acc[i] - mn) / (mx - mn);
  return acc;
}

Tensor pack_modulation(const Tensor& magnitude, const Tensor& phase) {
  if (magnitude.rank() != 2 || magnitude.shape() != phase.shape())
    throw Error("pack_modulation: magnitude " + shape_str(magnitude.shape()) + " and phase " +
                shape_str(phase.shape()) + " must be equal rank-2 images");
  const int64_t ny = magnitude.dim(0), nx = magnitude.dim(1);
  Tensor obj({ny, nx, 1, 2});
  for (int64_t y = 0; y < ny; y++)
    for (int64_t x = 0; x < nx; x++) {
      const double m = magnitude.at2(y, x), p = phase.at2(y, x);
      obj.at4(y, x, 0, 0) = m * std::cos(p);
      obj.at4(y, x, 0, 1) = m * std::sin(p);
    }
  return obj;
}

Tensor probe_from_aperture(int64_t n, double r_outer, double r_inner, double defocus,
                           double wavelength, double pixel_size) {
  if (n < 4) throw Error("probe_from_aperture: probe too small");
  if (!(r_outer > 0) || r_inner < 0 || r_inner >= r_outer)
    throw Error("probe_from_aperture: need 0 <= r_inner < r_outer");
  CTensor psi({n, n});
  const double c = (double)(n - 1) / 2.0;
  for (int64_t y = 0; y < n; y++)
    for (int64_t x = 0; x < n; x++) {
      const double r = std::hypot((double)y - c, (double)x - c);
      // one-pixel soft edges keep the far field from ringing hard
      double v = 1.0 - smoothstep(r - r_outer + 0.5);
      if (r_inner > 0) v *= smoothstep(r - r_inner + 0.5);
      psi.re.at2(y, x) = v;
    }
  if (defocus != 0.0) {
    if (!(wavelength > 0) || !(pixel_size > 0))
      throw Error("probe_from_aperture: defocus needs wavelength and pixel size");
    CTensor F = fft2(psi);
    const FrequencyGrid g = freq_grid(n, n, pixel_size);
    for (int64_t i = 0; i < F.size(); i++) {
      const double nu2 = g.fy[i] * g.fy[i] + g.fx[i] * g.fx[i];
      const double ph = M_PI * wavelength * defocus * nu2;
      const double re = F.re[i], im = F.im[i];
      F.re[i] = re * std::cos(ph) - im * std::sin(ph);
      F.im[i] = re * std::sin(ph) + im * std::cos(ph);
    }
    psi = ifft2(F);
  }
  double power = 0;
  for (int64_t i = 0; i < psi.size(); i++)
    power += psi.re[i] * psi.re[i] + psi.im[i] * psi.im[i];
  if (power == 0) throw Error("probe_from_aperture: aperture has no support");
  const double scale = 1.0 / std::sqrt(power / (double)psi.size());
  Tensor packed({1, 2, n, n});
  for (int64_t i = 0; i < psi.size(); i++) {
    packed[i] = psi.re[i] * scale;
    packed[n * n + i] = psi.im[i] * scale;
  }
  return packed;
}

void add_poisson_noise(Tensor& intensity, double incident, uint64_t seed) {
  if (!(incident > 0)) throw Error("add_poisson_noise: incident photon count must be > 0");
  SimRng rng(seed);
  for (int64_t i = 0; i < intensity.size(); i++) {
    if (!(intensity[i] >= 0)) throw Error("add_poisson_noise: negative intensity");
    intensity[i] = (double)rng.poisson(intensity[i] * incident) / incident;
  }
}

// ----------------------------------------------------------------- hologram

// the edge is a normal CDF whose width is 2.5 frequency-grid bins
Tensor highpass_phase(const Tensor& phase, double wavelength, double zbar, double pixel_size) {
  const int64_t ny = phase.dim(0), nx = phase.dim(1);
  const double cut = 1.0 / (4.0 * std::sqrt(wavelength * zbar));
  const double sigma = 2.5 / ((double)std::min(ny, nx) * pixel_size);
  CTensor f({ny, nx});
  for (int64_t i = 0; i < phase.size(); i++) f.re[i] = phase[i];
  CTensor F = fft2(f);
  const FrequencyGrid g = freq_grid(ny, nx, pixel_size);
  for (int64_t i = 0; i < F.size(); i++) {
    const double nu = std::hypot(g.fy[i], g.fx[i]);
    const double keep = 0.5 * (1.0 + std::erf((nu - cut) / (sigma * std::sqrt(2.0))));
    F.re[i] *= keep;
    F.im[i] *= keep;
  }
  return ifft2(F).re;
}

namespace {

Tensor affine_rows(const std::vector<AffineParams>& distortions, size_t n_dist, bool* any) {
  Tensor rows({(int64_t)n_dist, 7});
  *any = false;
  for (size_t i = 0; i < n_dist; i++) {
    AffineParams p;
    if (i < distortions.size()) p = distortions[i];
    rows.at2((int64_t)i, 0) = p.phi;
    rows.at2((int64_t)i, 1) = p.cx;
    rows.at2((int64_t)i, 2) = p.cy;
    rows.at2((int64_t)i, 3) = p.sx;
    rows.at2((int64_t)i, 4) = p.sy;
    rows.at2((int64_t)i, 5) = p.dx;
    rows.at2((int64_t)i, 6) = p.dy;
    *any |= p.phi != 0 || p.cx != 0 || p.cy != 0 || p.sx != 1 || p.sy != 1 || p.dx != 0 ||
            p.dy != 0;
  }
  return rows;
}

Tensor stack_under_one_angle(const Tensor& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  Tensor out(s);
  std::memcpy(out.data(), t.data(), (size_t)t.size() * sizeof(double));
  return out;
}

}  // namespace

MdhSim simulate_mdh(const MdhSimSpec& spec) {
  const int64_t n = spec.size;
  if (n < 8) throw Error("simulate_mdh: size must be >= 8");
  if (spec.distances.empty()) throw Error("simulate_mdh: need at least one distance");
  for (double z : spec.distances)
    if (!(z > 0)) throw Error("simulate_mdh: distances must be positive");
  if (spec.distortions.size() > spec.distances.size())
    throw Error("simulate_mdh: more distortions than holograms");
  if (spec.photons < 0) throw Error("simulate_mdh: photon budget must be >= 0");

  MdhSim sim;
  sim.magnitude = spec.magnitude.size() > 0 ? spec.magnitude : spoke_target(n, 12, 0.6, 1.0);
  sim.phase = spec.phase.size() > 0 ? spec.phase : turbulence(n, spec.seed, -0.5, 0.5);
  if (sim.magnitude.rank() != 2 || sim.magnitude.dim(0) != n || sim.magnitude.dim(1) != n)
    throw Error("simulate_mdh: magnitude must be [" + std::to_string(n) + "," +
                std::to_string(n) + "]");
  if (sim.phase.shape() != sim.magnitude.shape())
    throw Error("simulate_mdh: phase shape differs from magnitude");
  sim.object = pack_modulation(sim.magnitude, sim.phase);

  sim.cfg.representation = Representation::RealImag;
  sim.cfg.wavelength = wavelength_from_ev(spec.energy_ev);
  sim.cfg.pixel_size = spec.pixel_size;
  sim.cfg.distances = spec.distances;

  bool warped = false;
  const Tensor rows = affine_rows(spec.distortions, spec.distances.size(), &warped);

  // the same forward prediction the solver uses, evaluated at the truth
  Tape t;
  Var obj = t.constant(sim.object);
  Var dists = t.constant(Tensor({(int64_t)spec.distances.size()}, spec.distances));
  std::optional<Var> aff;
  if (warped) aff = t.constant(rows);
  Tensor holos = mdh_predict(t, obj, dists, aff, sim.cfg).val();

  if (spec.photons > 0)
    add_poisson_noise(holos, spec.photons / (double)spec.distances.size(),
                      spec.seed ^ 0xA3C59AC2ED1090F2ull);

  sim.dataset.data = stack_under_one_angle(holos);
  sim.dataset.meta.energy_ev = spec.energy_ev;
  sim.dataset.meta.pixel_size = spec.pixel_size;
  sim.dataset.meta.distances = spec.distances;

  double zbar = 0;
  for (double z : spec.distances) zbar += z;
  zbar /= (double)spec.distances.size();
  sim.phase_highpass = highpass_phase(sim.phase, sim.cfg.wavelength, zbar, spec.pixel_size);
  return sim;
}

PtychoSim simulate_ptycho(const PtychoSimSpec& spec) {
  const int64_t n = spec.obj, p = spec.probe;
  if (n < 8 || p < 4) throw Error("simulate_ptycho: object or probe too small");
  if (p > n) throw Error("simulate_ptycho: probe exceeds the object");
  if (spec.step < 1) throw Error("simulate_ptycho: step must be >= 1");
  if (spec.pos_error < 0) throw Error("simulate_ptycho: position error must be >= 0");

  PtychoSim sim;
  sim.object = pack_modulation(spoke_target(n, 10, 0.7, 1.0),
                               turbulence(n, spec.seed, -0.5, 0.5));
  sim.cfg.representation = Representation::RealImag;
  sim.cfg.wavelength = spec.wavelength;
  sim.cfg.pixel_size = spec.pixel_size;

  // a moderate-Fresnel-number defocus gives the disc some internal structure
  const double defocus = 0.5 * (0.3 * (double)p * spec.pixel_size) *
                         (0.3 * (double)p * spec.pixel_size) / spec.wavelength;
  sim.probe = probe_from_aperture(p, 0.3 * (double)p, 0.0, defocus, spec.wavelength,
                                  spec.pixel_size);

  for (int64_t oy = 0; oy + p <= n; oy += spec.step)
    for (int64_t ox = 0; ox + p <= n; ox += spec.step) {
      TileSpec s;
      s.oy = oy;
      s.ox = ox;
      s.ny = p;
      s.nx = p;
      s.pos_index = (int64_t)sim.tiles.size();
      sim.tiles.push_back(s);
    }
  const int64_t n_pos = (int64_t)sim.tiles.size();

  sim.true_correction = Tensor({n_pos, 2});
  if (spec.pos_error > 0) {
    SimRng rng(spec.seed ^ 0x6C62272E07BB0142ull);
    double mean[2] = {0, 0};
    for (int64_t i = 0; i < n_pos; i++)
      for (int64_t a = 0; a < 2; a++) {
        const double e = spec.pos_error * (2.0 * rng.uniform() - 1.0);
        sim.true_correction.at2(i, a) = e;
        mean[a] += e / (double)n_pos;
      }
    // mean-free, matching the hygiene rule refinement enforces
    for (int64_t i = 0; i < n_pos; i++)
      for (int64_t a = 0; a < 2; a++) sim.true_correction.at2(i, a) -= mean[a];
  }

  TileBatch batch;
  batch.tiles = sim.tiles;
  Tape t;
  Var obj = t.constant(sim.object);
  Var probe = t.constant(sim.probe);
  Var corr = t.constant(sim.true_correction);
  Tensor inten = multimode_intensity(t, ptycho_predict(t, obj, probe, batch, corr, sim.cfg)).val();

  if (spec.photons > 0)
    add_poisson_noise(inten, spec.photons, spec.seed ^ 0xED1090F2A3C59AC2ull);

  sim.dataset.data = stack_under_one_angle(inten);
  sim.dataset.meta.pixel_size = spec.pixel_size;
  sim.dataset.meta.energy_ev = 1239.842e-9 / spec.wavelength;
  Tensor pos({n_pos, 2});
  for (int64_t i = 0; i < n_pos; i++) {
    pos.at2(i, 0) = (double)sim.tiles[(size_t)i].oy;
    pos.at2(i, 1) = (double)sim.tiles[(size_t)i].ox;
  }
  sim.dataset.meta.probe_positions = std::move(pos);
  return sim;
}

}  // namespace xrec
