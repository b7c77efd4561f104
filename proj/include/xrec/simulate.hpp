#pragma once

// Synthetic data generation: procedural test objects, an aperture/defocus
// probe builder, and end-to-end simulators for multi-distance holography and
// scanning diffraction. Simulated intensities come from the same forward
// predictions the solver minimizes against, so a noiseless dataset evaluated
// at the true parameters is an exact zero of the data term.

#include <cstdint>
#include <vector>

#include "xrec/dataset.hpp"

namespace xrec {

// Deterministic uniform / normal / Poisson sampler built on splitmix64.
// Self-contained on purpose: seeded datasets stay bit-identical across
// standard libraries, which <random> distributions do not guarantee.
struct SimRng {
  explicit SimRng(uint64_t seed) : s_(seed) {}
  uint64_t next_u64();
  double uniform();              // [0, 1)
  double normal();               // standard normal
  int64_t poisson(double mean);  // inversion below mean 30, PTRS rejection above

 private:
  uint64_t s_;
};

// Radial spoke pattern: `n_spokes` azimuthal lobes inside a disc that fades
// to a flat rim; values cover [lo, hi] with the background at hi.
Tensor spoke_target(int64_t n, int n_spokes, double lo, double hi);

// Band-limited value-noise texture: octaves of bilinearly upsampled seeded
// grids, range-mapped exactly onto [lo, hi].
Tensor turbulence(int64_t n, uint64_t seed, double lo, double hi);

// Pack magnitude/phase images into an object volume [n, n, 1, 2] holding the
// (Re, Im) channels of M exp(i phi).
Tensor pack_modulation(const Tensor& magnitude, const Tensor& phase);

// Annular aperture (radii in pixels, r_inner = 0 for a disc) defocused by
// `defocus`, returned packed [1, 2, n, n] and normalized to mean |P|^2 = 1.
Tensor probe_from_aperture(int64_t n, double r_outer, double r_inner, double defocus,
                           double wavelength, double pixel_size);

// Replace intensities with renormalized Poisson draws at `incident` expected
// photons per unit intensity: I -> Poisson(I * incident) / incident.
void add_poisson_noise(Tensor& intensity, double incident, uint64_t seed);

// Drop phase frequencies below 1/(4 sqrt(lambda zbar)) — the band a hologram
// stack cannot constrain — with the edge smoothed by a 2.5-bin Gaussian.
// Scoring a reconstructed phase against `MdhSim::phase_highpass` must run the
// recovered image through this same filter first.
Tensor highpass_phase(const Tensor& phase, double wavelength, double zbar, double pixel_size);

struct MdhSimSpec {
  int64_t size = 256;
  double energy_ev = 17500.0;
  double pixel_size = 1e-6;                                  // m
  std::vector<double> distances = {0.40, 0.60, 0.80, 1.00};  // m
  std::vector<AffineParams> distortions;  // per hologram; empty/short = identity
  double photons = 0.0;  // total photons/pixel across all holograms; 0 = noiseless
  uint64_t seed = 1;
  Tensor magnitude, phase;  // [size, size] overrides; empty = procedural pair
};

struct MdhSim {
  DatasetFile dataset;    // data [1, n_dist, size, size]
  Tensor object;          // [size, size, 1, 2] true modulation (Re, Im)
  Tensor magnitude;       // true magnitude image
  Tensor phase;           // true phase image, radians
  Tensor phase_highpass;  // phase with only frequencies a hologram can carry:
                          // cutoff 1/(4 sqrt(lambda zbar)), edge smoothed by a
                          // 2.5-bin Gaussian
  ModelConfig cfg;        // forward configuration with the true distances
};

MdhSim simulate_mdh(const MdhSimSpec& spec);

struct PtychoSimSpec {
  int64_t obj = 64;           // square object extent, one z slice
  int64_t probe = 16;         // square probe extent
  int64_t step = 8;           // scan pitch, pixels
  double pos_error = 0.0;     // true-position jitter, uniform in [-e, e] px
  double photons = 0.0;       // expected photons per unit intensity; 0 = noiseless
  uint64_t seed = 1;
  double wavelength = 1e-10;  // m
  double pixel_size = 1e-8;   // m
};

struct PtychoSim {
  DatasetFile dataset;           // data [1, n_pos, probe, probe]
  Tensor object;                 // [obj, obj, 1, 2] true modulation (Re, Im)
  Tensor probe;                  // [1, 2, probe, probe]
  std::vector<TileSpec> tiles;   // nominal scan grid (jitter not included)
  Tensor true_correction;        // [n_pos, 2] mean-free jitter actually applied
  ModelConfig cfg;
};

PtychoSim simulate_ptycho(const PtychoSimSpec& spec);

}  // namespace xrec
