#pragma once

// JSON run configuration. A config file plus the flag overrides below fully
// determines a run: two executions from the same file and seed write
// bit-identical loss logs. Unknown keys anywhere are rejected with their
// JSON path so typos fail loudly instead of silently using a default.
//
// Reconstruction schema (paths are resolved from the invoking directory):
//   dataset          measurement container (.h5/.hdf5, or the raw pair)
//   output           artifact directory
//   model            ptychography | mdh | sparse_multislice | tomography
//   object           { shape: [Ly, Lx, Lz], representation: delta_beta | real_imag }
//   run              { mode: serial | dp | do | h5, ranks, epochs, batch_size,
//                      seed, loss: lsq | poisson, checkpoint_every }
//   object_update    { optimizer: gd | momentum | adam | cg, step,
//                      gd_base_iters, f32 }
//   refine           { <param>: { optimizer, step, enable_at }, ... } where
//                    <param> is one of distances, affine_params, kappa_log,
//                    probe, probe_pos_correction; enable_at counts minibatches
//   regularizers     [ { kind: l1, alpha_a, alpha_b } | { kind: tv, gamma } ]
//   model_options    { distances, angles, slice_positions, kernel: paraxial |
//                      sommerfeld, pure_projection, kappa: { enabled, init },
//                      slice_spacing, slice_binning, tile: [ty, tx] }
//   probe            { kind: aperture, size, r_outer, r_inner, defocus }
//                    | { kind: file, path }
//   resume           checkpoint to continue from (optional)

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xrec/runtime.hpp"
#include "xrec/simulate.hpp"

namespace xrec {

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::Adam;
  double step = 1e-3;
  int64_t enable_at = 0;
};

struct ProbeSpec {
  std::string kind;  // "aperture" | "file"; empty means no probe configured
  int64_t size = 0;  // pixels; 0 takes the detector extent
  double r_outer = 0, r_inner = 0;  // aperture radii, pixels
  double defocus = 0;               // same length unit as the wavelength
  std::string path;                 // tensor file holding [n_modes, 2, py, px]
};

struct ReconConfig {
  std::string dataset;
  std::string output = "run";
  std::string model;
  Shape object_shape;  // [Ly, Lx, Lz]; the channel axis is implied
  Representation representation = Representation::DeltaBeta;
  std::string mode = "serial";
  int64_t ranks = 1;
  int64_t epochs = 1;
  int64_t batch_size = 1;
  uint64_t seed = 0;
  LossKind loss = LossKind::Lsq;
  int64_t checkpoint_every = 0;  // numbered snapshots; 0 keeps only last.ckpt

  OptimizerKind object_opt = OptimizerKind::Adam;
  double object_step = 1e-3;
  int64_t gd_base_iters = 0;
  bool object_f32 = false;

  std::map<std::string, OptimizerSpec> refine;
  std::vector<RegSpec> regularizers;
  ProbeSpec probe;

  std::vector<double> distances;        // initial guesses; empty = dataset metadata
  std::vector<double> angles;           // viewing angles, radians; empty = {0}
  std::vector<double> slice_positions;  // sparse multislice z anchors, voxels
  KernelKind kernel = KernelKind::Paraxial;
  bool pure_projection = false;
  bool kappa_enabled = false;
  double kappa_init = 1e-2;
  double slice_spacing = 0.0;
  int64_t slice_binning = 1;
  Shape tile;  // [ty, tx] scan tiling for full-field models; empty = one tile

  std::string resume;
};

ReconConfig parse_recon_config(const std::string& path);

// Simulation schema: model (mdh | ptychography), output, seed, photons, plus
//   mdh           — size, energy_ev, pixel_size, distances,
//                   distortions: [ { phi, cx, cy, sx, sy, dx, dy }, ... ]
//   ptychography  — object, probe, step, pos_error, wavelength, pixel_size
struct SimJob {
  std::string model;
  std::string output = "sim";
  MdhSimSpec mdh;
  PtychoSimSpec ptycho;
};

SimJob parse_sim_config(const std::string& path);

// Flag-level overrides; a set flag wins over the file value.
struct CliOverrides {
  std::optional<std::string> output;
  std::optional<std::string> mode;
  std::optional<int64_t> ranks;
  std::optional<int64_t> epochs;
  std::optional<uint64_t> seed;
};

void apply_overrides(ReconConfig& c, const CliOverrides& o);
void apply_overrides(SimJob& j, const CliOverrides& o);  // output and seed only

// The config file re-serialized with the overrides folded in — written next
// to the artifacts so a run directory records exactly what produced it.
std::string effective_recon_json(const std::string& path, const CliOverrides& o);
std::string effective_sim_json(const std::string& path, const CliOverrides& o);

}  // namespace xrec
