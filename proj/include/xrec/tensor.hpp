#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Dense row-major real tensors plus a split-complex pair type and the FFT used
// everywhere else. Convention: forward DFT is unnormalized exp(-2*pi*i .),
// inverse carries the 1/N. All compute is double precision.

namespace xrec {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  ~Tensor() { account(0); }
  Tensor(const Tensor& o) : shape_(o.shape_), v_(o.v_) { account((int64_t)v_.size() * 8); }
  Tensor& operator=(const Tensor& o) {
    if (this != &o) {
      shape_ = o.shape_;
      v_ = o.v_;
      account((int64_t)v_.size() * 8);
    }
    return *this;
  }
  Tensor(Tensor&& o) noexcept
      : shape_(std::move(o.shape_)), v_(std::move(o.v_)), accounted_(o.accounted_) {
    o.accounted_ = 0;
  }
  Tensor& operator=(Tensor&& o) noexcept {
    if (this != &o) {
      account(0);
      shape_ = std::move(o.shape_);
      v_ = std::move(o.v_);
      accounted_ = o.accounted_;
      o.accounted_ = 0;
    }
    return *this;
  }

  // process-wide payload accounting (construction sizes; in-place vec()
  // resizes are not tracked). peak is monotone until reset_peak().
  static int64_t live_bytes();
  static int64_t peak_bytes();
  static void reset_peak();

  const Shape& shape() const { return shape_; }
  int rank() const { return (int)shape_.size(); }
  int64_t dim(int i) const;  // negative counts from the end
  int64_t size() const { return (int64_t)v_.size(); }
  bool is_scalar() const { return v_.size() == 1; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& vec() { return v_; }
  const std::vector<double>& vec() const { return v_; }
  double& operator[](int64_t i) { return v_[i]; }
  double operator[](int64_t i) const { return v_[i]; }

  // rank-specific indexing helpers (bounds unchecked in release paths)
  double& at2(int64_t y, int64_t x) { return v_[y * shape_[1] + x]; }
  double at2(int64_t y, int64_t x) const { return v_[y * shape_[1] + x]; }
  double& at3(int64_t a, int64_t b, int64_t c) {
    return v_[(a * shape_[1] + b) * shape_[2] + c];
  }
  double at3(int64_t a, int64_t b, int64_t c) const {
    return v_[(a * shape_[1] + b) * shape_[2] + c];
  }
  double& at4(int64_t a, int64_t b, int64_t c, int64_t d) {
    return v_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  double at4(int64_t a, int64_t b, int64_t c, int64_t d) const {
    return v_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }

  bool all_finite() const;
  void require_finite(const char* who) const;  // throws Error naming the op

  double min() const;
  double max() const;
  double sum() const;
  double mean() const { return size() ? sum() / (double)size() : 0.0; }

 private:
  void account(int64_t bytes);

  Shape shape_;
  std::vector<double> v_;
  int64_t accounted_ = 0;  // bytes this instance contributed to the live counter
};

struct CTensor {
  Tensor re, im;
  CTensor() = default;
  CTensor(Tensor r, Tensor i);
  explicit CTensor(const Shape& s) : re(s), im(s) {}
  const Shape& shape() const { return re.shape(); }
  int64_t size() const { return re.size(); }
};

// fftfreq ordering: k/(n*pitch) for k < (n+1)/2, else (k-n)/(n*pitch).
std::vector<double> fft_freqs(int64_t n, double pitch);

struct FrequencyGrid {
  Tensor fy, fx;  // [ny, nx], cycles per unit length
};
FrequencyGrid freq_grid(int64_t ny, int64_t nx, double pitch);

// 2-D FFT over the trailing two axes; leading axes are batched.
// fft2 is the unnormalized forward transform, ifft2 applies 1/(ny*nx).
// Non-finite input raises Error.
CTensor fft2(const CTensor& in);
CTensor ifft2(const CTensor& in);

}  // namespace xrec
