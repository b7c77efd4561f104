#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "xrec/tensor.hpp"

using namespace xrec;

TEST_CASE("tensor shape and data invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), Error);
  CHECK_THROWS_AS(Tensor({-1, 2}), Error);
  Tensor s = Tensor::scalar(4.0);
  CHECK(s.is_scalar());
  CHECK(s.size() == 1);
  Tensor bad({2}, std::vector<double>{1.0, std::nan("")});
  CHECK_FALSE(bad.all_finite());
  CHECK_THROWS_AS(bad.require_finite("test"), Error);
}

TEST_CASE("complex pair rejects mismatched shapes") {
  CHECK_THROWS_AS(CTensor(Tensor({2, 2}), Tensor({2, 3})), Error);
}

TEST_CASE("fft_freqs ordering matches k/(N*pitch) with negative upper half") {
  auto f = fft_freqs(4, 0.5);  // N=4, pitch=0.5
  CHECK(f[0] == doctest::Approx(0.0));
  CHECK(f[1] == doctest::Approx(0.5));
  CHECK(f[2] == doctest::Approx(-1.0));
  CHECK(f[3] == doctest::Approx(-0.5));
  auto g = fft_freqs(5, 1.0);  // odd length: ceil(n/2) positive entries
  CHECK(g[0] == doctest::Approx(0.0));
  CHECK(g[1] == doctest::Approx(0.2));
  CHECK(g[2] == doctest::Approx(0.4));
  CHECK(g[3] == doctest::Approx(-0.4));
  CHECK(g[4] == doctest::Approx(-0.2));
}

TEST_CASE("freq_grid max frequency is 1/(2*pitch) for even N") {
  auto g = freq_grid(8, 8, 2.0);
  double m = 0;
  for (int64_t i = 0; i < g.fx.size(); i++) m = std::max(m, std::abs(g.fx[i]));
  CHECK(m == doctest::Approx(1.0 / (2.0 * 2.0)));
  CHECK(g.fy.shape() == Shape{8, 8});
}

// Frozen from tools/oracles/dft_oracle.cpp (long-double brute-force DFT of the
// LCG(42) 4x4 input). Forward transform is unnormalized.
static const double kDft4Re[16] = {
    0.93322399413341017,   1.2302740592601276,   1.3814559978928482,   -1.7883039315198093,
    -2.6950127808485562,   -1.2237378398434673,  -0.0024892851164717293, -1.8403069873379245,
    -2.3397212967004011,   3.4665962429153776,   3.0628158438577655,   -0.24134866451059889,
    1.5653281316285719,    -0.54492824806181495, 2.0684495373292058,   -0.84892432047321909};
static const double kDft4Im[16] = {
    -3.6187720926823896,   -0.23809674007174642, -3.4114418279108119,  -1.9929008209974393,
    -1.5803141678915784,   0.47555052121832198,  -1.7594168907886956,  3.4511123988854284,
    -2.0478194066107616,   -2.0162085620995063,  -0.93473974307186336, 2.9425061253522382,
    -0.47673087725607388,  0.24401080278808296,  1.8563124405752087,   0.32177856688962692};

TEST_CASE("fft2 matches frozen brute-force DFT oracle on 4x4") {
  oracle::Lcg rng(42);
  CTensor in{Tensor({4, 4}), Tensor({4, 4})};
  for (int i = 0; i < 16; i++) {
    in.re[i] = rng.sym();
    in.im[i] = rng.sym();
  }
  CTensor out = fft2(in);
  for (int i = 0; i < 16; i++) {
    CHECK(out.re[i] == doctest::Approx(kDft4Re[i]).epsilon(1e-12));
    CHECK(out.im[i] == doctest::Approx(kDft4Im[i]).epsilon(1e-12));
  }
}

TEST_CASE("fft2 matches in-test brute DFT on odd and batched shapes") {
  oracle::Lcg rng(7);
  for (Shape s : {Shape{5, 7}, Shape{8, 8}, Shape{3, 4, 6}}) {
    CTensor in{rng.tensor(s), rng.tensor(s)};
    CTensor got = fft2(in);
    CTensor want = oracle::dft2_brute(in);
    CHECK(oracle::max_abs_diff(got.re, want.re) < 1e-10);
    CHECK(oracle::max_abs_diff(got.im, want.im) < 1e-10);
  }
}

TEST_CASE("ifft2(fft2(x)) is identity to 1e-12") {
  oracle::Lcg rng(3);
  for (Shape s : {Shape{6, 6}, Shape{5, 9}, Shape{2, 4, 4}}) {
    CTensor in{rng.tensor(s), rng.tensor(s)};
    CTensor back = ifft2(fft2(in));
    CHECK(oracle::max_abs_diff(back.re, in.re) < 1e-12);
    CHECK(oracle::max_abs_diff(back.im, in.im) < 1e-12);
  }
}

TEST_CASE("Parseval: sum|X|^2 = N * sum|x|^2 under the unnormalized forward") {
  oracle::Lcg rng(11);
  CTensor in{rng.tensor({16, 16}), rng.tensor({16, 16})};
  CTensor out = fft2(in);
  double ein = 0, eout = 0;
  for (int64_t i = 0; i < in.re.size(); i++) {
    ein += in.re[i] * in.re[i] + in.im[i] * in.im[i];
    eout += out.re[i] * out.re[i] + out.im[i] * out.im[i];
  }
  CHECK(eout == doctest::Approx(256.0 * ein).epsilon(1e-12));
}

TEST_CASE("fft2 linearity") {
  oracle::Lcg rng(13);
  CTensor a{rng.tensor({8, 8}), rng.tensor({8, 8})};
  CTensor b{rng.tensor({8, 8}), rng.tensor({8, 8})};
  CTensor mix{Tensor({8, 8}), Tensor({8, 8})};
  for (int64_t i = 0; i < 64; i++) {
    mix.re[i] = 2.0 * a.re[i] - 0.5 * b.re[i];
    mix.im[i] = 2.0 * a.im[i] - 0.5 * b.im[i];
  }
  CTensor fa = fft2(a), fb = fft2(b), fmix = fft2(mix);
  for (int64_t i = 0; i < 64; i++) {
    CHECK(fmix.re[i] == doctest::Approx(2.0 * fa.re[i] - 0.5 * fb.re[i]).epsilon(1e-11));
    CHECK(fmix.im[i] == doctest::Approx(2.0 * fa.im[i] - 0.5 * fb.im[i]).epsilon(1e-11));
  }
}

TEST_CASE("adjoint identity: <Fx, y> = <x, N * F^-1 y> in the real pair inner product") {
  oracle::Lcg rng(17);
  CTensor x{rng.tensor({8, 8}), rng.tensor({8, 8})};
  CTensor y{rng.tensor({8, 8}), rng.tensor({8, 8})};
  CTensor fx = fft2(x);
  CTensor iy = ifft2(y);
  double lhs = oracle::dot(fx.re, y.re) + oracle::dot(fx.im, y.im);
  double rhs = 64.0 * (oracle::dot(x.re, iy.re) + oracle::dot(x.im, iy.im));
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-11));
}

TEST_CASE("fft2 rejects non-finite input and bad ranks") {
  CTensor bad{Tensor({2, 2}), Tensor({2, 2})};
  bad.re[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(fft2(bad), Error);
  CTensor vec{Tensor({4}), Tensor({4})};
  CHECK_THROWS_AS(fft2(vec), Error);
}

TEST_CASE("two identical transforms are bit-identical") {
  oracle::Lcg rng(23);
  CTensor in{rng.tensor({12, 10}), rng.tensor({12, 10})};
  CTensor a = fft2(in), b = fft2(in);
  for (int64_t i = 0; i < a.re.size(); i++) {
    CHECK(a.re[i] == b.re[i]);
    CHECK(a.im[i] == b.im[i]);
  }
}
