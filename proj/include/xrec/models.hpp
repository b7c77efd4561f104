#pragma once

// Forward models tying optics to measured data.
//
// The object lives in a 4D tensor [Ly, Lx, Lz, C]: y vertical, x horizontal,
// z along the beam, C the representation channels — (delta, beta) or (Re, Im),
// or a single beta channel when the homogeneous-object constraint is active
// (delta derived as beta / kappa with kappa = exp(kappa_log)).
//
// Detector fields come back as complex pairs shaped [n_tiles, n_modes, py, px];
// intensities as [n_tiles, py, px]. All predictions are tape expressions, so
// any leaf fed in (object, probe, positions, distances, affine parameters,
// kappa_log, rotation angle) picks up gradients.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xrec/transforms.hpp"

namespace xrec {

enum class ModelKind { Ptychography, Mdh, SparseMultislice, Tomography };

// names accepted in configs: "ptychography", "mdh", "sparse_multislice", "tomography"
ModelKind parse_model_name(const std::string& name);
const std::vector<std::string>& model_names();

struct ModelConfig {
  Representation representation = Representation::DeltaBeta;
  double wavelength = 0.0;  // same length unit as pixel_size and distances
  double pixel_size = 0.0;
  std::vector<double> distances;  // sample-to-detector, one per hologram (MDH)
  bool pure_projection = false;
  KernelKind kernel = KernelKind::Paraxial;
  SignConvention sign = SignConvention::Negative;
  bool kappa_mode = false;    // delta/beta only; object stores beta alone
  double slice_spacing = 0.0; // voxel depth along z; 0 means pixel_size
  int64_t slice_binning = 1;  // merge this many voxel slices per modulation

  PropSpec prop() const;
  double dz() const;
};

struct TileSpec {
  int64_t oy = 0, ox = 0;  // integer chunk origin in object pixels
  int64_t ny = 0, nx = 0;  // chunk extent (= probe shape for ptychography)
  double frac_y = 0.0, frac_x = 0.0;  // sub-pixel probe offset inside the chunk
  int64_t pos_index = -1;  // row of the position-correction leaf, -1 = none
  int64_t dist_index = 0;  // distance selector (multi-distance holography)
};

struct TileBatch {
  int64_t angle_index = 0;
  std::vector<TileSpec> tiles;
};

// object channels unpacked to [Ly, Lx, Lz] each
struct ObjectVar {
  Var a, b;
};

// splits [Ly,Lx,Lz,2]; with kappa_mode the packed tensor is [Ly,Lx,Lz,1]
// holding beta and kappa_log must be supplied
ObjectVar split_object(Tape& t, Var packed, const ModelConfig& cfg,
                       std::optional<Var> kappa_log = {});

// rotation about the vertical (y) axis, in-tape
ObjectVar rotate_object(Tape& t, const ObjectVar& o, Var theta,
                        const ModelConfig& cfg);

// z-slices of the (possibly chunked) object as modulation planes; binning > 1
// merges groups of voxel slices (sums for delta/beta, products for Re/Im)
std::vector<ObjectSlice> object_slices(Tape& t, const ObjectVar& o,
                                       Representation rep, int64_t binning = 1);

// far-field ptychography: chunk, shift probe, multislice (or projection), Fraunhofer
CVar ptycho_predict(Tape& t, Var object, Var probe, const TileBatch& batch,
                    std::optional<Var> pos_correction, const ModelConfig& cfg,
                    std::optional<Var> theta = {});

// multi-distance holography on the full field: modulate, propagate to each
// distance, intensity, then warp the prediction into the measurement frame.
// Returns intensities [n_dist, Ly, Lx].
Var mdh_predict(Tape& t, Var object, Var distances, std::optional<Var> affine7,
                const ModelConfig& cfg, std::optional<Var> kappa_log = {},
                std::optional<CVar> incident = {});

// sparse multislice ptychography with refinable slice positions
CVar sparse_ms_predict(Tape& t, Var object, Var probe, const TileBatch& batch,
                       std::optional<Var> pos_correction, Var slice_positions,
                       const ModelConfig& cfg);

// projection tomography: rotate, project, unit plane wave, per-tile crops of |exit|^2
Var tomo_predict(Tape& t, Var object, Var theta, const TileBatch& batch,
                 const ModelConfig& cfg);

// incoherent mode sum: [n, m, y, x] fields -> [n, y, x] intensity
Var multimode_intensity(Tape& t, const CVar& fields);

inline constexpr double kLossEps = 1e-9;

// (1/N) sum (sqrt(I+eps) - sqrt(I_m+eps))^2
Var loss_lsq(Tape& t, Var ipred, const Tensor& imeas);
// (1/N) sum (I - I_m log(I+eps))
Var loss_poisson(Tape& t, Var ipred, const Tensor& imeas);

// mismatch + sum alpha_i * R_i
Var assemble_loss(Tape& t, Var mismatch,
                  const std::vector<std::pair<double, Var>>& regs);

}  // namespace xrec
