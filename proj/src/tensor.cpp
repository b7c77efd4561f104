#include "xrec/tensor.hpp"

#include <fftw3.h>

#include <atomic>
#include <cmath>
#include <map>
#include <cstring>
#include <mutex>
#include <sstream>

namespace xrec {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw Error("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), v_((size_t)shape_numel(shape_), fill) {
  account((int64_t)v_.size() * 8);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), v_(std::move(data)) {
  if ((int64_t)v_.size() != shape_numel(shape_))
    throw Error("tensor data size " + std::to_string(v_.size()) + " does not match shape " +
                shape_str(shape_));
  account((int64_t)v_.size() * 8);
}

namespace {
std::atomic<int64_t> g_tensor_live{0};
std::atomic<int64_t> g_tensor_peak{0};
}  // namespace

int64_t Tensor::live_bytes() { return g_tensor_live.load(std::memory_order_relaxed); }
int64_t Tensor::peak_bytes() { return g_tensor_peak.load(std::memory_order_relaxed); }
void Tensor::reset_peak() { g_tensor_peak.store(g_tensor_live.load()); }

void Tensor::account(int64_t bytes) {
  int64_t delta = bytes - accounted_;
  if (delta == 0) return;
  accounted_ = bytes;
  int64_t now = g_tensor_live.fetch_add(delta, std::memory_order_relaxed) + delta;
  int64_t peak = g_tensor_peak.load(std::memory_order_relaxed);
  while (now > peak &&
         !g_tensor_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw Error("dim index out of range for shape " + shape_str(shape_));
  return shape_[i];
}

bool Tensor::all_finite() const {
  for (double x : v_)
    if (!std::isfinite(x)) return false;
  return true;
}

void Tensor::require_finite(const char* who) const {
  if (!all_finite()) throw Error(std::string(who) + ": non-finite values in tensor " + shape_str(shape_));
}

double Tensor::min() const {
  if (v_.empty()) throw Error("min of empty tensor");
  double m = v_[0];
  for (double x : v_) m = x < m ? x : m;
  return m;
}

double Tensor::max() const {
  if (v_.empty()) throw Error("max of empty tensor");
  double m = v_[0];
  for (double x : v_) m = x > m ? x : m;
  return m;
}

double Tensor::sum() const {
  double s = 0;
  for (double x : v_) s += x;
  return s;
}

CTensor::CTensor(Tensor r, Tensor i) : re(std::move(r)), im(std::move(i)) {
  if (!same_shape(re.shape(), im.shape()))
    throw Error("complex pair shape mismatch: " + shape_str(re.shape()) + " vs " + shape_str(im.shape()));
}

std::vector<double> fft_freqs(int64_t n, double pitch) {
  if (n <= 0) throw Error("fft_freqs: n must be positive");
  if (!(pitch > 0) || !std::isfinite(pitch)) throw Error("fft_freqs: pitch must be positive finite");
  std::vector<double> f((size_t)n);
  for (int64_t k = 0; k < n; k++) {
    int64_t kk = (2 * k < n + (n % 2)) ? k : k - n;  // k < ceil(n/2) -> positive branch
    f[(size_t)k] = (double)kk / ((double)n * pitch);
  }
  return f;
}

FrequencyGrid freq_grid(int64_t ny, int64_t nx, double pitch) {
  auto fy = fft_freqs(ny, pitch);
  auto fx = fft_freqs(nx, pitch);
  FrequencyGrid g{Tensor({ny, nx}), Tensor({ny, nx})};
  for (int64_t y = 0; y < ny; y++)
    for (int64_t x = 0; x < nx; x++) {
      g.fy.at2(y, x) = fy[(size_t)y];
      g.fx.at2(y, x) = fx[(size_t)x];
    }
  return g;
}

namespace {

// FFTW guru split-array plans, cached per thread and (ny, nx), each with its
// own scratch arrays. A split plan may only be executed on arrays whose
// relative layout matches the ones it was planned for (swapping the re/im
// pointers to get the inverse transform segfaults for some sizes), so every
// execution stages through the plan's original buffers and the inverse is a
// copy-level swap. Plan creation itself is not thread-safe and takes a lock;
// execution is lock-free since the scratch is thread-local.
std::mutex g_planner_mutex;

struct PlanEntry {
  fftw_plan plan = nullptr;
  std::vector<double> ri, ii, ro, io;
};

struct PlanCache {
  std::map<std::pair<int64_t, int64_t>, PlanEntry> entries;
  ~PlanCache() {
    std::lock_guard<std::mutex> lock(g_planner_mutex);
    for (auto& kv : entries) fftw_destroy_plan(kv.second.plan);
  }
};

PlanEntry& get_plan(int64_t ny, int64_t nx) {
  thread_local PlanCache cache;
  auto key = std::make_pair(ny, nx);
  auto it = cache.entries.find(key);
  if (it != cache.entries.end()) return it->second;
  PlanEntry e;
  size_t n = (size_t)(ny * nx);
  e.ri.resize(n);
  e.ii.resize(n);
  e.ro.resize(n);
  e.io.resize(n);
  fftw_iodim dims[2];
  dims[0].n = (int)ny;
  dims[0].is = (int)nx;
  dims[0].os = (int)nx;
  dims[1].n = (int)nx;
  dims[1].is = 1;
  dims[1].os = 1;
  {
    std::lock_guard<std::mutex> lock(g_planner_mutex);
    e.plan = fftw_plan_guru_split_dft(2, dims, 0, nullptr, e.ri.data(), e.ii.data(), e.ro.data(),
                                      e.io.data(), FFTW_ESTIMATE);
  }
  if (!e.plan)
    throw Error("fftw plan creation failed for " + std::to_string(ny) + "x" + std::to_string(nx));
  return cache.entries.emplace(key, std::move(e)).first->second;
}

CTensor transform2(const CTensor& in, bool inverse) {
  const Shape& s = in.shape();
  if (s.size() < 2) throw Error("fft2: rank must be >= 2, got shape " + shape_str(s));
  in.re.require_finite(inverse ? "ifft2" : "fft2");
  in.im.require_finite(inverse ? "ifft2" : "fft2");
  int64_t ny = s[s.size() - 2], nx = s[s.size() - 1];
  if (ny == 0 || nx == 0) throw Error("fft2: empty trailing axes in shape " + shape_str(s));
  int64_t plane = ny * nx;
  int64_t batch = in.re.size() / plane;
  PlanEntry& pe = get_plan(ny, nx);
  CTensor out{Tensor(s), Tensor(s)};
  const size_t bytes = (size_t)plane * sizeof(double);
  for (int64_t b = 0; b < batch; b++) {
    const double* sre = in.re.data() + b * plane;
    const double* sim = in.im.data() + b * plane;
    // the plan computes the exp(-2*pi*i) transform on its own arrays; feeding
    // (im, re) and reading (im, re) back out gives the +i sign
    std::memcpy(pe.ri.data(), inverse ? sim : sre, bytes);
    std::memcpy(pe.ii.data(), inverse ? sre : sim, bytes);
    fftw_execute(pe.plan);
    std::memcpy(out.re.data() + b * plane, inverse ? pe.io.data() : pe.ro.data(), bytes);
    std::memcpy(out.im.data() + b * plane, inverse ? pe.ro.data() : pe.io.data(), bytes);
  }
  if (inverse) {
    double scale = 1.0 / (double)plane;
    for (int64_t i = 0; i < out.re.size(); i++) {
      out.re[i] *= scale;
      out.im[i] *= scale;
    }
  }
  return out;
}

}  // namespace

CTensor fft2(const CTensor& in) { return transform2(in, false); }
CTensor ifft2(const CTensor& in) { return transform2(in, true); }

}  // namespace xrec
