// Standalone brute-force DFT oracle. No project dependencies on purpose:
// values printed here are frozen into tests/test_tensor.cpp.
//
// Computes, in long double, the unnormalized forward DFT
//   X[u,v] = sum_{y,x} x[y,x] * exp(-2*pi*i*(u*y/Ny + v*x/Nx))
// of a fixed 4x4 complex input generated by the LCG below (same generator is
// reproduced in the test next to the frozen table).
//
// Build: g++ -O2 -o dft_oracle dft_oracle.cpp && ./dft_oracle

#include <cstdio>
#include <cmath>
#include <complex>
#include <vector>

int main() {
  const int N = 4;
  // LCG: x_{k+1} = (6364136223846793005 x_k + 1442695040888963407) mod 2^64,
  // seeded with 42; each draw maps the top 53 bits to [0,1).
  unsigned long long s = 42ull;
  auto draw = [&]() {
    s = 6364136223846793005ull * s + 1442695040888963407ull;
    return (double)(s >> 11) * (1.0 / 9007199254740992.0);
  };
  std::vector<std::complex<long double>> in(N * N);
  for (int i = 0; i < N * N; i++) {
    double re = draw() * 2.0 - 1.0;
    double im = draw() * 2.0 - 1.0;
    in[i] = {(long double)re, (long double)im};
  }
  std::printf("input (re im):\n");
  for (int i = 0; i < N * N; i++)
    std::printf("  %.17g %.17g\n", (double)in[i].real(), (double)in[i].imag());

  const long double pi = 3.14159265358979323846264338327950288L;
  std::printf("forward DFT (re im):\n");
  for (int u = 0; u < N; u++)
    for (int v = 0; v < N; v++) {
      std::complex<long double> acc = 0;
      for (int y = 0; y < N; y++)
        for (int x = 0; x < N; x++) {
          long double ph = -2.0L * pi * ((long double)u * y / N + (long double)v * x / N);
          acc += in[y * N + x] * std::complex<long double>(std::cos(ph), std::sin(ph));
        }
      std::printf("  %.17g %.17g\n", (double)acc.real(), (double)acc.imag());
    }
  return 0;
}
