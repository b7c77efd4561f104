#pragma once

// Differentiable priors over the packed object [Ly, Lx, Lz, C], plus the
// finite-support mask machinery.  Values are normalized by the voxel count
// N_o = Ly*Lx*Lz.  For the Re/Im representation the penalized quantities are
// the derived maps |O| - mean|O| and arg(O).

#include "xrec/models.hpp"

namespace xrec {

struct SupportMask {
  Tensor mask;             // [Ly, Lx], entries 0 or 1
  double threshold = 0.1;  // fraction of the smoothed map's maximum
  double sigma = 1.0;      // Gaussian smoothing radius in pixels
};

struct ReweightState {
  Tensor w1, w2;        // per-voxel weights [Ly, Lx, Lz]
  int64_t cadence = 0;  // minibatches between refreshes; 0 = once per epoch
  double eps = 1e-6;
};

// sparsity: (1/N_o) sum a1|delta| + a2|beta|, or the derived-map analogue
Var reg_l1(Tape& t, Var object, double a1, double a2, Representation rep);

// weights W = max|C| / (|C| + eps) from an out-of-tape snapshot
void refresh_weights(ReweightState& state, const Tensor& object, Representation rep);
Var reg_reweighted_l1(Tape& t, Var object, double a1, double a2, Representation rep,
                      const ReweightState& state);

// anisotropic total variation: forward differences, zero at the far boundary
Var reg_tv(Tape& t, Var object, double gamma, Representation rep);

// threshold the Gaussian-smoothed structure map into a fresh binary mask
SupportMask shrink_wrap(const Tensor& object, Representation rep, const SupportMask& prev);

// project the object onto the support: zero outside (delta/beta) or reset to
// vacuum (Re/Im); the mask spans (y, x) and applies to every z and channel
void apply_support(Tensor& object, Representation rep, const SupportMask& mask);

}  // namespace xrec
