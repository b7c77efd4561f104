#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "support/oracles.hpp"
#include "xrec/autodiff.hpp"
#include "xrec/dataset.hpp"
#include "xrec/metrics.hpp"
#include "xrec/models.hpp"
#include "xrec/simulate.hpp"

using namespace xrec;

TEST_CASE("tile grids follow the ceiling rule and reassemble bit-exactly") {
  // the reference full-field geometry: 800x1653 detector split 32x32
  TileGrid g = tile_grid(800, 1653, 32, 32);
  CHECK(g.tile_y == 25);
  CHECK(g.tile_x == 52);
  CHECK(g.count() == 1024);
  CHECK(g.spec(0, 0).ny == 25);
  CHECK(g.spec(0, 0).nx == 52);
  // 31 full columns of 52 leave a 41-wide remainder strip
  CHECK(g.spec(0, 31).ox == 31 * 52);
  CHECK(g.spec(0, 31).nx == 1653 - 31 * 52);
  CHECK(g.spec(31, 0).ny == 25);  // 800 divides evenly

  TileGrid whole = tile_grid(17, 9, 1, 1);
  CHECK(whole.tile_y == 17);
  CHECK(whole.tile_x == 9);
  CHECK(whole.spec(0, 0).ny == 17);

  // ragged round trip in both directions
  oracle::Lcg rng(31);
  Tensor img = rng.tensor({37, 53});
  TileGrid rag = tile_grid(37, 53, 4, 5);
  CHECK(rag.tile_y == 10);
  CHECK(rag.tile_x == 11);
  CHECK(rag.spec(3, 0).ny == 7);
  CHECK(rag.spec(0, 4).nx == 9);
  auto tiles = tile_image(img, rag);
  REQUIRE((int64_t)tiles.size() == rag.count());
  Tensor back = assemble_tiles(tiles, rag);
  CHECK(oracle::max_abs_diff(back, img) == 0.0);

  CHECK_THROWS(tile_grid(8, 8, 9, 2));
  CHECK_THROWS(tile_grid(8, 8, 0, 2));
  CHECK_THROWS((void)rag.spec(4, 0));
  tiles.pop_back();
  CHECK_THROWS(assemble_tiles(tiles, rag));
}

namespace {

DatasetFile sample_dataset() {
  oracle::Lcg rng(77);
  DatasetFile d;
  d.data = Tensor({2, 3, 5, 7});
  for (int64_t i = 0; i < d.data.size(); i++) d.data[i] = rng.uniform() + 0.25;
  d.meta.energy_ev = 17500.0;
  d.meta.pixel_size = 1e-6;
  d.meta.distances = {0.4, 0.6, 0.8, 1.0};
  d.meta.probe_positions = Tensor({3, 2}, {0.0, 0.0, 0.0, 4.5, 2.25, 0.0});
  return d;
}

void check_roundtrip(const DatasetFile& a, const DatasetFile& b) {
  CHECK(a.data.shape() == b.data.shape());
  CHECK(oracle::max_abs_diff(a.data, b.data) == 0.0);
  CHECK(a.meta.energy_ev == b.meta.energy_ev);
  CHECK(a.meta.pixel_size == b.meta.pixel_size);
  REQUIRE(a.meta.distances == b.meta.distances);
  REQUIRE(a.meta.probe_positions.shape() == b.meta.probe_positions.shape());
  CHECK(oracle::max_abs_diff(a.meta.probe_positions, b.meta.probe_positions) == 0.0);
}

}  // namespace

TEST_CASE("dataset files round-trip through both containers") {
  const DatasetFile d = sample_dataset();

  const std::string h5 = "/tmp/xrec_ds_test.h5";
  write_dataset(h5, d);
  check_roundtrip(read_dataset(h5), d);
  std::remove(h5.c_str());

  const std::string raw = "/tmp/xrec_ds_test.bin";
  write_dataset(raw, d);
  check_roundtrip(read_dataset(raw), d);
  // the raw container is a bare value stream plus a text sidecar
  FILE* side = std::fopen((raw + ".meta").c_str(), "r");
  REQUIRE(side != nullptr);
  std::fclose(side);
  std::remove(raw.c_str());
  std::remove((raw + ".meta").c_str());

  DatasetFile bad = sample_dataset();
  bad.data[3] = -0.5;
  CHECK_THROWS_WITH_AS(write_dataset("/tmp/xrec_ds_bad.h5", bad),
                       doctest::Contains(">= 0"), Error);
  DatasetFile flat = sample_dataset();
  flat.data = Tensor({4, 5});
  CHECK_THROWS(write_dataset("/tmp/xrec_ds_bad.h5", flat));
  CHECK_THROWS(read_dataset("/tmp/xrec_ds_missing.h5"));
  CHECK_THROWS(read_dataset("/tmp/xrec_ds_missing.bin"));
}

TEST_CASE("photon energy sets the wavelength") {
  // frozen by tools/oracles/wavelength_oracle.py: hc = 1239.8419843 eV nm,
  // engine constant 1239.842, so 17.5 keV -> 0.07084811428571429 nm
  CHECK(wavelength_from_ev(17500.0) == doctest::Approx(7.084811428571429e-11).epsilon(1e-12));
  CHECK(std::abs(wavelength_from_ev(17500.0) * 1e9 - 0.07085) < 5e-6);
  CHECK(wavelength_from_ev(1239.842) == doctest::Approx(1e-9).epsilon(1e-12));
  CHECK_THROWS(wavelength_from_ev(0.0));
  CHECK_THROWS(wavelength_from_ev(-3.0));
}

TEST_CASE("global ssim is one on identity, negative on anticorrelation") {
  oracle::Lcg rng(5);
  Tensor x = rng.tensor({24, 24});
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));

  // zero-variance pair compares as 1 by definition
  Tensor flat_a({6, 6}, 3.0), flat_b({6, 6}, 3.0);
  CHECK(ssim(flat_a, flat_b) == 1.0);

  // zero-mean structured reference against its negative: the structure term
  // flips sign and dominates
  double mean = 0;
  for (int64_t i = 0; i < x.size(); i++) mean += x[i] / (double)x.size();
  Tensor zm(x.shape()), anti(x.shape());
  for (int64_t i = 0; i < x.size(); i++) {
    zm[i] = x[i] - mean;
    anti[i] = -zm[i] + 0.3;
  }
  CHECK(ssim(anti, zm) < 0.0);

  // phase comparison ignores offset and positive rescaling
  Tensor scaled(x.shape());
  for (int64_t i = 0; i < x.size(); i++) scaled[i] = 2.0 * x[i] + 1.0;
  CHECK(ssim_phase(scaled, x) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ssim_phase(x, x) == doctest::Approx(1.0).epsilon(1e-12));

  Tensor other({5, 5});
  CHECK_THROWS(ssim(x, other));
  CHECK_THROWS(ssim_phase(x, other));
}

namespace {

// image whose radial power is (f/fc)^-6 + 1: a steep content slope crossing
// a flat noise floor exactly at fc (cycles/pixel)
Tensor synthetic_crossover(int64_t n, double fc, unsigned long long seed) {
  oracle::Lcg rng(seed);
  CTensor F({n, n});
  const auto freqs = fft_freqs(n, 1.0);
  for (int64_t y = 0; y < n; y++)
    for (int64_t x = 0; x < n; x++) {
      const double nu = std::hypot(freqs[(size_t)y], freqs[(size_t)x]);
      if (nu == 0.0) continue;
      const double power = std::pow(nu / fc, -6.0) + 1.0;
      const double ph = rng.uniform() * 2.0 * 3.14159265358979323846;
      F.re.at2(y, x) = std::sqrt(power) * std::cos(ph);
      F.im.at2(y, x) = std::sqrt(power) * std::sin(ph);
    }
  return ifft2(F).re;
}

}  // namespace

TEST_CASE("radial spectra locate a synthetic crossover frequency") {
  const double fc = 0.22;
  Tensor img = synthetic_crossover(128, fc, 12);
  const double f = spectrum_resolution(img);
  CHECK(std::abs(f - fc) / fc < 0.2);

  // a vertical log-log shift cancels in the line intersection
  Tensor twice(img.shape());
  for (int64_t i = 0; i < img.size(); i++) twice[i] = 2.0 * img[i];
  CHECK(spectrum_resolution(twice) == doctest::Approx(f).epsilon(1e-9));

  // white noise is flat in both bands: near-parallel fits, no crossover
  oracle::Lcg rng(9);
  Tensor noise = rng.tensor({128, 128});
  CHECK_THROWS_WITH_AS(spectrum_resolution(noise), doctest::Contains("parallel"), Error);

  // a volume averages plane spectra; a stack of copies matches the image result
  Tensor vol({3, 128, 128});
  for (int64_t k = 0; k < 3; k++)
    for (int64_t i = 0; i < img.size(); i++) vol[k * img.size() + i] = img[i];
  CHECK(spectrum_resolution(vol, 0) == doctest::Approx(f).epsilon(1e-9));

  CHECK(radial_spectrum(img).freq.size() == 64);
  CHECK(radial_spectrum(img).freq.back() == doctest::Approx(0.5));
  CHECK_THROWS(spectrum_resolution(Tensor({4, 4, 4, 4})));
}

TEST_CASE("procedural phantoms cover their ranges deterministically") {
  Tensor m = spoke_target(64, 12, 0.6, 1.0);
  double lo = m[0], hi = m[0];
  for (int64_t i = 0; i < m.size(); i++) {
    lo = std::min(lo, m[i]);
    hi = std::max(hi, m[i]);
  }
  CHECK(lo >= 0.6 - 1e-12);
  CHECK(hi <= 1.0 + 1e-12);
  CHECK(lo < 0.65);  // the spokes actually reach the dark end
  CHECK(hi > 0.97);
  CHECK(m.at2(0, 0) == doctest::Approx(1.0));  // corners are flat background

  Tensor p1 = turbulence(64, 7, -0.5, 0.5);
  Tensor p2 = turbulence(64, 7, -0.5, 0.5);
  CHECK(oracle::max_abs_diff(p1, p2) == 0.0);
  Tensor p3 = turbulence(64, 8, -0.5, 0.5);
  CHECK(oracle::max_abs_diff(p1, p3) > 1e-3);
  lo = hi = p1[0];
  for (int64_t i = 0; i < p1.size(); i++) {
    lo = std::min(lo, p1[i]);
    hi = std::max(hi, p1[i]);
  }
  CHECK(lo == doctest::Approx(-0.5).epsilon(1e-12));  // range-mapped exactly
  CHECK(hi == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("poisson sampler is calibrated at both ends") {
  SimRng a(42), b(42);
  for (int i = 0; i < 50; i++) CHECK(a.next_u64() == b.next_u64());

  SimRng rng(7);
  const int n = 20000;
  for (double mean : {5.0, 300.0}) {  // inversion path and rejection path
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; i++) {
      const double k = (double)rng.poisson(mean);
      sum += k;
      sum2 += k * k;
    }
    const double m = sum / n;
    const double var = sum2 / n - m * m;
    CHECK(std::abs(m - mean) < 3.0 * std::sqrt(mean / n));
    CHECK(var / mean > 0.9);
    CHECK(var / mean < 1.1);
  }
  CHECK(rng.poisson(0.0) == 0);
  CHECK_THROWS(rng.poisson(-1.0));

  double s = 0, s2 = 0;
  for (int i = 0; i < n; i++) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / n) < 3.0 / std::sqrt((double)n));
  CHECK(s2 / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("aperture probes normalize and spread with defocus") {
  const double lam = 1e-10, px = 1e-8;
  Tensor flat = probe_from_aperture(32, 10.0, 0.0, 0.0, lam, px);
  REQUIRE(flat.shape() == Shape{1, 2, 32, 32});
  double power = 0, imag = 0;
  for (int64_t i = 0; i < 32 * 32; i++) {
    power += flat[i] * flat[i] + flat[32 * 32 + i] * flat[32 * 32 + i];
    imag = std::max(imag, std::abs(flat[32 * 32 + i]));
  }
  CHECK(power / (32 * 32) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(imag == 0.0);  // no propagation, the aperture is real

  Tensor blurred = probe_from_aperture(32, 10.0, 0.0, 2e-5, lam, px);
  power = 0;
  double outside = 0;
  const double c = 31.0 / 2.0;
  for (int64_t y = 0; y < 32; y++)
    for (int64_t x = 0; x < 32; x++) {
      const double re = blurred.at4(0, 0, y, x), im = blurred.at4(0, 1, y, x);
      const double p = re * re + im * im;
      power += p;
      if (std::hypot(y - c, x - c) > 11.0) outside += p;
    }
  CHECK(power / (32 * 32) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(outside > 1e-4 * power);  // defocus pushed energy past the aperture rim

  CHECK_THROWS(probe_from_aperture(32, 0.0, 0.0, 0.0, lam, px));
  CHECK_THROWS(probe_from_aperture(32, 5.0, 6.0, 0.0, lam, px));
}

TEST_CASE("noiseless holograms equal the forward prediction on the truth") {
  MdhSimSpec spec;
  spec.size = 32;
  spec.seed = 3;
  spec.distortions.resize(4);
  spec.distortions[1].dx = 1.3;
  spec.distortions[1].phi = 0.01;
  spec.distortions[2].sx = 1.02;
  spec.distortions[3].cy = 0.015;
  spec.distortions[3].dy = -0.8;
  MdhSim sim = simulate_mdh(spec);
  REQUIRE(sim.dataset.data.shape() == Shape{1, 4, 32, 32});
  CHECK(sim.object.shape() == Shape{32, 32, 1, 2});
  CHECK(sim.cfg.wavelength == doctest::Approx(7.0848114e-11).epsilon(1e-6));

  // same seed, same bits
  MdhSim again = simulate_mdh(spec);
  CHECK(oracle::max_abs_diff(again.dataset.data, sim.dataset.data) == 0.0);

  // replaying the forward model at the true parameters reproduces the data
  // exactly; the simulator and the solver share one code path
  Tensor rows({4, 7});
  for (int64_t i = 0; i < 4; i++) {
    const AffineParams& p = spec.distortions[(size_t)i];
    double r[7] = {p.phi, p.cx, p.cy, p.sx, p.sy, p.dx, p.dy};
    for (int64_t j = 0; j < 7; j++) rows.at2(i, j) = r[j];
  }
  Tape t;
  Var obj = t.constant(sim.object);
  Var dists = t.constant(Tensor({4}, spec.distances));
  std::optional<Var> aff = t.constant(rows);
  Tensor pred = mdh_predict(t, obj, dists, aff, sim.cfg).val();
  for (int64_t i = 0; i < pred.size(); i++)
    CHECK(pred[i] == sim.dataset.data[i]);
}

TEST_CASE("mdh photon budget is split across holograms") {
  // flat object: every hologram is exactly unit intensity before noise, so
  // the counts should average photons / n_dist per pixel
  MdhSimSpec spec;
  spec.size = 64;
  spec.magnitude = Tensor({64, 64}, 1.0);
  spec.phase = Tensor({64, 64});
  spec.photons = 4000.0;
  spec.seed = 11;
  MdhSim sim = simulate_mdh(spec);
  const double incident = 1000.0;
  const int64_t npix = 64 * 64;
  for (int64_t d = 0; d < 4; d++) {
    double counts = 0;
    for (int64_t i = 0; i < npix; i++) counts += sim.dataset.data[d * npix + i] * incident;
    const double mean = counts / (double)npix;
    CHECK(std::abs(mean - incident) < 3.0 * std::sqrt(incident / (double)npix));
  }
  // noiseless by default
  spec.photons = 0.0;
  MdhSim clean = simulate_mdh(spec);
  for (int64_t i = 0; i < clean.dataset.data.size(); i++)
    CHECK(clean.dataset.data[i] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("the highpass truth keeps detail and drops smooth trends") {
  const int64_t n = 128;
  // phase ramp: almost all energy below the hologram cutoff
  Tensor ramp({n, n});
  for (int64_t y = 0; y < n; y++)
    for (int64_t x = 0; x < n; x++)
      ramp.at2(y, x) = 0.4 * ((double)y / (double)n - 0.5);
  MdhSimSpec spec;
  spec.size = n;
  spec.magnitude = Tensor({n, n}, 1.0);
  spec.phase = ramp;
  MdhSim low = simulate_mdh(spec);
  double in2 = 0, out2 = 0;
  for (int64_t i = 0; i < n * n; i++) {
    in2 += ramp[i] * ramp[i];
    out2 += low.phase_highpass[i] * low.phase_highpass[i];
  }
  CHECK(out2 < 0.3 * in2);

  // checkerboard at Nyquist: far above the cutoff, it passes intact
  Tensor check({n, n});
  for (int64_t y = 0; y < n; y++)
    for (int64_t x = 0; x < n; x++) check.at2(y, x) = ((y + x) % 2 == 0) ? 0.4 : -0.4;
  spec.phase = check;
  MdhSim high = simulate_mdh(spec);
  CHECK(oracle::max_rel_diff(high.phase_highpass, check) < 0.05);
}

TEST_CASE("scanning simulation reproduces its own forward model") {
  PtychoSimSpec spec;
  spec.obj = 24;
  spec.probe = 8;
  spec.step = 4;
  spec.pos_error = 1.5;
  spec.seed = 21;
  PtychoSim sim = simulate_ptycho(spec);
  REQUIRE((int64_t)sim.tiles.size() == 25);
  REQUIRE(sim.dataset.data.shape() == Shape{1, 25, 8, 8});
  CHECK(sim.dataset.meta.probe_positions.shape() == Shape{25, 2});
  CHECK(sim.probe.shape() == Shape{1, 2, 8, 8});

  // jitter is mean-free and bounded by the requested error
  double my = 0, mx = 0, worst = 0;
  for (int64_t i = 0; i < 25; i++) {
    my += sim.true_correction.at2(i, 0) / 25.0;
    mx += sim.true_correction.at2(i, 1) / 25.0;
    worst = std::max({worst, std::abs(sim.true_correction.at2(i, 0)),
                      std::abs(sim.true_correction.at2(i, 1))});
  }
  CHECK(std::abs(my) < 1e-12);
  CHECK(std::abs(mx) < 1e-12);
  CHECK(worst <= 2.0 * spec.pos_error);  // bound survives the recentering
  CHECK(worst > 0.1);

  TileBatch batch;
  batch.tiles = sim.tiles;
  Tape t;
  Var obj = t.constant(sim.object);
  Var probe = t.constant(sim.probe);
  Var corr = t.constant(sim.true_correction);
  Tensor pred =
      multimode_intensity(t, ptycho_predict(t, obj, probe, batch, corr, sim.cfg)).val();
  for (int64_t i = 0; i < pred.size(); i++)
    CHECK(pred[i] == sim.dataset.data[i]);

  PtychoSim rerun = simulate_ptycho(spec);
  CHECK(oracle::max_abs_diff(rerun.dataset.data, sim.dataset.data) == 0.0);
}
