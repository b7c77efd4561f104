#pragma once

// Reconstruction quality metrics: global structural similarity, a power-
// spectrum resolution estimate, and the photon-energy to wavelength
// conversion used when a dataset states its beam energy.

#include <utility>
#include <vector>

#include "xrec/tensor.hpp"

namespace xrec {

// lambda = hc / E with hc = 1239.842 eV nm; returns meters.
double wavelength_from_ev(double energy_ev);

// Global (single-window) SSIM of `img` against `ref`: the product of the
// luminance, contrast and structure terms with k1 = 0.01, k2 = 0.03 and
// L = the dynamic range of `ref`. Any rank; shapes must match. Two
// zero-variance inputs compare as 1.
double ssim(const Tensor& img, const Tensor& ref);

// SSIM for phase maps: both sides are first normalized to (phi - mean) / std
// so constant offsets and linear rescalings drop out of the comparison.
double ssim_phase(const Tensor& phi, const Tensor& phi_ref);

// Radially averaged power spectrum of a rank-2 image; freq is in cycles per
// pixel, from one bin width up to the 0.5 Nyquist rate.
struct PowerSpectrum {
  std::vector<double> freq, power;
};
PowerSpectrum radial_spectrum(const Tensor& image);

// Resolution estimate from the spectrum shape: straight lines are fitted to
// log(power) over log(freq) in two bands (given as fractions of Nyquist) and
// the frequency where they cross is returned, in cycles per pixel. Rank-2
// input is one image; rank-3 is a stack of planes perpendicular to `axis`
// whose spectra are averaged first. Near-parallel fit lines (slope gap below
// 0.5, where the intersection is numerically meaningless) raise an Error.
double spectrum_resolution(const Tensor& image_or_volume, int axis = 0,
                           std::pair<double, double> band_lo = {0.008, 0.31},
                           std::pair<double, double> band_hi = {0.47, 1.0});

}  // namespace xrec
