#include "xrec/metrics.hpp"

#include <cmath>
#include <string>

namespace xrec {

double wavelength_from_ev(double energy_ev) {
  if (!(energy_ev > 0)) throw Error("wavelength_from_ev: energy must be positive");
  return 1239.842e-9 / energy_ev;
}

namespace {

struct Moments {
  double mean = 0, var = 0;
};

Moments moments(const Tensor& t) {
  Moments m;
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; i++) m.mean += t[i];
  m.mean /= (double)n;
  for (int64_t i = 0; i < n; i++) {
    const double d = t[i] - m.mean;
    m.var += d * d;
  }
  m.var /= (double)n;
  return m;
}

Tensor standardize(const Tensor& t) {
  const Moments m = moments(t);
  const double sd = std::sqrt(m.var);
  Tensor out(t.shape());
  if (sd == 0.0) return out;  // flat map: all zeros, compares as zero-variance
  for (int64_t i = 0; i < t.size(); i++) out[i] = (t[i] - m.mean) / sd;
  return out;
}

}  // namespace

double ssim(const Tensor& img, const Tensor& ref) {
  if (img.shape() != ref.shape())
    throw Error("ssim: shapes differ (" + shape_str(img.shape()) + " vs " + shape_str(ref.shape()) + ")");
  if (img.size() == 0) throw Error("ssim: empty input");
  const Moments ma = moments(img), mr = moments(ref);
  if (ma.var == 0.0 && mr.var == 0.0) return 1.0;

  double lo = ref[0], hi = ref[0];
  for (int64_t i = 0; i < ref.size(); i++) {
    lo = std::min(lo, ref[i]);
    hi = std::max(hi, ref[i]);
  }
  const double L = hi - lo;
  const double c1 = (0.01 * L) * (0.01 * L);
  const double c2 = (0.03 * L) * (0.03 * L);
  const double c3 = c2 / 2.0;

  double cov = 0;
  for (int64_t i = 0; i < img.size(); i++) cov += (img[i] - ma.mean) * (ref[i] - mr.mean);
  cov /= (double)img.size();

  const double sa = std::sqrt(ma.var), sr = std::sqrt(mr.var);
  const double lum = (2.0 * ma.mean * mr.mean + c1) / (ma.mean * ma.mean + mr.mean * mr.mean + c1);
  const double con = (2.0 * sa * sr + c2) / (ma.var + mr.var + c2);
  const double str = (cov + c3) / (sa * sr + c3);
  return lum * con * str;
}

double ssim_phase(const Tensor& phi, const Tensor& phi_ref) {
  if (phi.shape() != phi_ref.shape())
    throw Error("ssim_phase: shapes differ (" + shape_str(phi.shape()) + " vs " +
                shape_str(phi_ref.shape()) + ")");
  return ssim(standardize(phi), standardize(phi_ref));
}

PowerSpectrum radial_spectrum(const Tensor& image) {
  if (image.rank() != 2) throw Error("radial_spectrum: expected a rank-2 image");
  const int64_t ny = image.dim(0), nx = image.dim(1);
  CTensor f({ny, nx});
  for (int64_t i = 0; i < image.size(); i++) f.re[i] = image[i];
  CTensor F = fft2(f);

  // bin k covers |nu| in (k-1/2, k+1/2] bin widths; the bin width is the
  // coarser of the two axis resolutions so every ring has samples
  const std::vector<double> fy = fft_freqs(ny, 1.0), fx = fft_freqs(nx, 1.0);
  const double dnu = 1.0 / (double)std::min(ny, nx);
  const int64_t nbins = std::min(ny, nx) / 2;
  std::vector<double> power((size_t)nbins, 0.0);
  std::vector<int64_t> hits((size_t)nbins, 0);
  for (int64_t y = 0; y < ny; y++)
    for (int64_t x = 0; x < nx; x++) {
      const double nu = std::hypot(fy[(size_t)y], fx[(size_t)x]);
      const int64_t k = (int64_t)std::llround(nu / dnu);
      if (k < 1 || k > nbins) continue;  // DC excluded, beyond Nyquist excluded
      const double re = F.re.at2(y, x), im = F.im.at2(y, x);
      power[(size_t)k - 1] += re * re + im * im;
      hits[(size_t)k - 1]++;
    }
  PowerSpectrum out;
  for (int64_t k = 0; k < nbins; k++) {
    if (hits[(size_t)k] == 0) continue;
    out.freq.push_back((double)(k + 1) * dnu);
    out.power.push_back(power[(size_t)k] / (double)hits[(size_t)k]);
  }
  return out;
}

namespace {

struct Line {
  double slope = 0, icept = 0;
};

// least squares on (log f, log P) restricted to [lo, hi] in cycles/pixel
Line fit_band(const PowerSpectrum& s, double lo, double hi) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int64_t n = 0;
  for (size_t i = 0; i < s.freq.size(); i++) {
    if (s.freq[i] < lo || s.freq[i] > hi) continue;
    if (!(s.power[i] > 0)) continue;
    const double x = std::log(s.freq[i]), y = std::log(s.power[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    n++;
  }
  if (n < 3)
    throw Error("spectrum_resolution: fewer than 3 usable spectrum points in band [" +
                std::to_string(lo) + ", " + std::to_string(hi) + "] cycles/px");
  const double det = (double)n * sxx - sx * sx;
  Line l;
  l.slope = ((double)n * sxy - sx * sy) / det;
  l.icept = (sy - l.slope * sx) / (double)n;
  return l;
}

}  // namespace

double spectrum_resolution(const Tensor& image_or_volume, int axis,
                           std::pair<double, double> band_lo,
                           std::pair<double, double> band_hi) {
  PowerSpectrum s;
  if (image_or_volume.rank() == 2) {
    s = radial_spectrum(image_or_volume);
  } else if (image_or_volume.rank() == 3) {
    if (axis < 0 || axis > 2) throw Error("spectrum_resolution: axis must be 0, 1 or 2");
    const int64_t n = image_or_volume.dim(axis);
    const int a1 = axis == 0 ? 1 : 0, a2 = axis == 2 ? 1 : 2;
    const int64_t d1 = image_or_volume.dim(a1), d2 = image_or_volume.dim(a2);
    for (int64_t k = 0; k < n; k++) {
      Tensor plane({d1, d2});
      for (int64_t i = 0; i < d1; i++)
        for (int64_t j = 0; j < d2; j++) {
          int64_t idx[3];
          idx[axis] = k;
          idx[a1] = i;
          idx[a2] = j;
          plane.at2(i, j) = image_or_volume.at3(idx[0], idx[1], idx[2]);
        }
      PowerSpectrum p = radial_spectrum(plane);
      if (s.freq.empty()) {
        s = std::move(p);
      } else {
        if (p.freq.size() != s.freq.size())
          throw Error("spectrum_resolution: inconsistent plane spectra");
        for (size_t i = 0; i < p.power.size(); i++) s.power[i] += p.power[i];
      }
    }
  } else {
    throw Error("spectrum_resolution: expected a rank-2 image or rank-3 volume");
  }

  const double f_ny = 0.5;
  const Line a = fit_band(s, band_lo.first * f_ny, band_lo.second * f_ny);
  const Line b = fit_band(s, band_hi.first * f_ny, band_hi.second * f_ny);
  if (std::abs(a.slope - b.slope) < 0.5)
    throw Error("spectrum_resolution: fit lines are near-parallel (slopes " +
                std::to_string(a.slope) + " and " + std::to_string(b.slope) +
                "), no crossover");
  return std::exp((b.icept - a.icept) / (a.slope - b.slope));
}

}  // namespace xrec
