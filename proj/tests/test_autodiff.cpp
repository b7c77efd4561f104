#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "xrec/autodiff.hpp"

using namespace xrec;

namespace {
using Point = std::map<std::string, Tensor>;

double eval_scalar(const std::function<Var(Tape&, const Point&)>& build, const Point& p) {
  Tape t;
  return build(t, p).val()[0];
}
}  // namespace

TEST_CASE("hand-derived gradient: f = sum(x^2 * y)") {
  // df/dx = 2xy, df/dy = x^2 — checked against the analytic form, not FD,
  // to anchor gradient() before FD-based checks lean on it
  oracle::Lcg rng(1);
  Tensor x = rng.tensor({3, 3}), y = rng.tensor({3, 3});
  Tape t;
  Var vx = t.leaf("x", x), vy = t.leaf("y", y);
  Var loss = t.sum(vx * vx * vy);
  auto g = t.gradient(loss, {"x", "y"});
  for (int64_t i = 0; i < 9; i++) {
    CHECK(g["x"][i] == doctest::Approx(2.0 * x[i] * y[i]).epsilon(1e-12));
    CHECK(g["y"][i] == doctest::Approx(x[i] * x[i]).epsilon(1e-12));
  }
}

TEST_CASE("gradient of sum((x*y)^2) wrt x matches FD columns on 3x3") {
  oracle::Lcg rng(2);
  Point p{{"x", rng.tensor({3, 3})}, {"y", rng.tensor({3, 3})}};
  auto build = [](Tape& t, const Point& q) {
    Var x = t.leaf("x", q.at("x"));
    Var y = t.leaf("y", q.at("y"));
    Var xy = x * y;
    return t.sum(xy * xy);
  };
  auto r = grad_check(build, p, 1e-6);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("elementwise primitives pass FD checks") {
  oracle::Lcg rng(3);
  Tensor a = rng.tensor({4, 3});
  for (int64_t i = 0; i < a.size(); i++) a[i] = 0.3 + std::abs(a[i]);  // keep log/sqrt in-domain
  Tensor b = rng.tensor({4, 3});
  for (int64_t i = 0; i < b.size(); i++) b[i] += (b[i] >= 0 ? 0.5 : -0.5);  // away from 0 for div/abs
  Point p{{"a", a}, {"b", b}};

  auto check = [&](const char* tag, std::function<Var(Tape&, Var, Var)> body) {
    auto build = [&body](Tape& t, const Point& q) {
      Var va = t.leaf("a", q.at("a"));
      Var vb = t.leaf("b", q.at("b"));
      return body(t, va, vb);
    };
    auto r = grad_check(build, p, 1e-6);
    INFO(tag << " worst leaf " << r.worst_leaf << "[" << r.worst_index << "] ad=" << r.ad
             << " fd=" << r.fd);
    CHECK(r.max_rel_err < 1e-7);
  };

  check("add", [](Tape& t, Var a, Var b) { return t.sum((a + b) * (a + b)); });
  check("sub", [](Tape& t, Var a, Var b) { return t.sum((a - b) * (a - b) * (a + 2.0)); });
  check("mul", [](Tape& t, Var a, Var b) { return t.sum(a * b * b); });
  check("div", [](Tape& t, Var a, Var b) { return t.sum(a / b); });
  check("neg", [](Tape& t, Var a, Var b) { return t.sum(-a * b); });
  check("exp", [](Tape& t, Var a, Var b) { return t.sum(t.exp(a * 0.5) * b); });
  check("log", [](Tape& t, Var a, Var) { return t.sum(t.log(a)); });
  check("sqrt", [](Tape& t, Var a, Var) { return t.sum(t.sqrt(a)); });
  check("pow", [](Tape& t, Var a, Var) { return t.sum(t.pow(a, 2.5)); });
  check("sin", [](Tape& t, Var a, Var b) { return t.sum(t.sin(a) * b); });
  check("cos", [](Tape& t, Var a, Var b) { return t.sum(t.cos(a * 2.0) * b); });
  check("atan2", [](Tape& t, Var a, Var b) { return t.sum(t.atan2(a, b)); });
  check("abs", [](Tape& t, Var a, Var b) { return t.sum(t.abs(b) * a); });
  check("mean", [](Tape& t, Var a, Var) { return t.mean(a * a); });
}

TEST_CASE("scalar broadcast in binaries, with reduced adjoint on the scalar side") {
  oracle::Lcg rng(4);
  Point p{{"m", rng.tensor({3, 4})}, {"s", Tensor::scalar(0.7)}};
  auto build = [](Tape& t, const Point& q) {
    Var m = t.leaf("m", q.at("m"));
    Var s = t.leaf("s", q.at("s"));
    return t.sum(m * s + s);
  };
  auto r = grad_check(build, p, 1e-6);
  CHECK(r.max_rel_err < 1e-8);
  // analytic: d/ds sum(m*s + s) = sum(m) + N
  Tape t;
  Var m = t.leaf("m", p.at("m"));
  Var s = t.leaf("s", p.at("s"));
  auto g = t.gradient(t.sum(m * s + s), {"s"});
  CHECK(g["s"][0] == doctest::Approx(p.at("m").sum() + 12.0).epsilon(1e-12));
}

TEST_CASE("reductions: sum/mean along an axis pass FD") {
  oracle::Lcg rng(5);
  Point p{{"x", rng.tensor({2, 3, 4})}};
  for (int axis : {0, 1, 2}) {
    auto build = [axis](Tape& t, const Point& q) {
      Var x = t.leaf("x", q.at("x"));
      Var s = t.sum(x * x, axis);
      Var m = t.mean(x, axis);
      return t.sum(s * s) + t.sum(m * m);
    };
    auto r = grad_check(build, p, 1e-6);
    INFO("axis " << axis);
    CHECK(r.max_rel_err < 1e-7);
  }
}

TEST_CASE("max_reduce takes first-argmax subgradient and passes FD off ties") {
  Tensor x({4}, std::vector<double>{0.1, 0.9, 0.4, 0.9});
  Tape t;
  Var v = t.leaf("x", x);
  Var m = t.max_reduce(v);
  CHECK(m.val()[0] == doctest::Approx(0.9));
  auto g = t.gradient(m, {"x"});
  CHECK(g["x"][1] == 1.0);  // first of the tied maxima
  CHECK(g["x"][3] == 0.0);

  oracle::Lcg rng(6);
  Point p{{"x", rng.tensor({5})}};
  p["x"][2] = 3.0;  // unique max, FD well-defined
  auto build = [](Tape& t2, const Point& q) {
    Var y = t2.leaf("x", q.at("x"));
    return t2.max_reduce(y * y) + t2.sum(y);
  };
  auto r = grad_check(build, p, 1e-6);
  CHECK(r.max_rel_err < 1e-8);
}

TEST_CASE("abs subgradient at exact zero is zero") {
  Tensor x({3}, std::vector<double>{-2.0, 0.0, 1.5});
  Tape t;
  Var v = t.leaf("x", x);
  auto g = t.gradient(t.sum(t.abs(v)), {"x"});
  CHECK(g["x"][0] == -1.0);
  CHECK(g["x"][1] == 0.0);
  CHECK(g["x"][2] == 1.0);
}

TEST_CASE("pad zero and edge modes: forward values and FD gradients") {
  Tensor x({2, 2}, std::vector<double>{1, 2, 3, 4});
  Tape t;
  Var v = t.leaf("x", x);
  Var pz = t.pad(v, {{1, 0}, {0, 1}}, PadMode::Zero);
  CHECK(pz.shape() == Shape{3, 3});
  CHECK(pz.val().at2(0, 0) == 0.0);
  CHECK(pz.val().at2(1, 0) == 1.0);
  CHECK(pz.val().at2(1, 2) == 0.0);
  Var pe = t.pad(v, {{1, 1}, {1, 1}}, PadMode::Edge);
  CHECK(pe.val().at2(0, 0) == 1.0);  // corner replicates
  CHECK(pe.val().at2(3, 3) == 4.0);
  CHECK(pe.val().at2(0, 2) == 2.0);

  oracle::Lcg rng(7);
  Point p{{"x", rng.tensor({3, 4})}};
  for (PadMode mode : {PadMode::Zero, PadMode::Edge}) {
    auto build = [mode](Tape& t2, const Point& q) {
      Var y = t2.leaf("x", q.at("x"));
      Var padded = t2.pad(y, {{2, 1}, {1, 2}}, mode);
      return t2.sum(padded * padded * 0.5);
    };
    auto r = grad_check(build, p, 1e-6);
    CHECK(r.max_rel_err < 1e-7);
  }
}

TEST_CASE("slice, concat, reshape: round trips and FD gradients") {
  oracle::Lcg rng(8);
  Point p{{"x", rng.tensor({4, 5})}, {"y", rng.tensor({2, 5})}};
  auto build = [](Tape& t, const Point& q) {
    Var x = t.leaf("x", q.at("x"));
    Var y = t.leaf("y", q.at("y"));
    Var top = t.slice(x, {0, 0}, {2, 5});
    Var cat = t.concat({top, y}, 0);               // [4,5]
    Var flat = t.reshape(cat, {20});
    return t.sum(flat * flat) + t.sum(t.slice(x, {1, 2}, {3, 2}));
  };
  auto r = grad_check(build, p, 1e-6);
  CHECK(r.max_rel_err < 1e-7);

  Tape t;
  Var x = t.leaf("x", p.at("x"));
  CHECK_THROWS_AS(t.slice(x, {2, 2}, {3, 2}), Error);  // 2+3 > 4 rows
  CHECK_THROWS_AS(t.reshape(x, {7, 3}), Error);
}

TEST_CASE("fft2/ifft2 nodes: adjoint passes FD through a nonlinear loss") {
  oracle::Lcg rng(9);
  Point p{{"re", rng.tensor({4, 4})}, {"im", rng.tensor({4, 4})}};
  auto build = [](Tape& t, const Point& q) {
    Var re = t.leaf("re", q.at("re"));
    Var im = t.leaf("im", q.at("im"));
    auto [fr, fi] = t.fft2(re, im);
    auto [br, bi] = t.ifft2(fr * fr - fi, fi + fr);
    return t.sum(br * br) + t.sum(bi * bi * 0.25);
  };
  auto r = grad_check(build, p, 1e-6);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("fft round trip inside the tape is the identity") {
  oracle::Lcg rng(10);
  Tensor re = rng.tensor({6, 6}), im = rng.tensor({6, 6});
  Tape t;
  CVar x{t.leaf("re", re), t.leaf("im", im)};
  CVar back = ifft2c(fft2c(x));
  CHECK(oracle::max_abs_diff(back.re.val(), re) < 1e-12);
  CHECK(oracle::max_abs_diff(back.im.val(), im) < 1e-12);
}

TEST_CASE("bilinear sampling: forward matches loop oracle, gradients pass FD") {
  oracle::Lcg rng(11);
  Tensor img = rng.tensor({5, 6});
  Tensor cy({3}, std::vector<double>{0.5, 2.25, 3.75});
  Tensor cx({3}, std::vector<double>{1.5, 0.25, 4.6});
  Tape t;
  Var vi = t.leaf("img", img);
  Var y = t.constant(cy), x = t.constant(cx);
  Var out = t.bilinear(vi, y, x, 0.0);
  for (int64_t i = 0; i < 3; i++) {
    int64_t y0 = (int64_t)std::floor(cy[i]), x0 = (int64_t)std::floor(cx[i]);
    double fy = cy[i] - y0, fx = cx[i] - x0;
    double want = (1 - fy) * ((1 - fx) * img.at2(y0, x0) + fx * img.at2(y0, x0 + 1)) +
                  fy * ((1 - fx) * img.at2(y0 + 1, x0) + fx * img.at2(y0 + 1, x0 + 1));
    CHECK(out.val()[i] == doctest::Approx(want).epsilon(1e-12));
  }

  Point p{{"img", img}, {"cy", cy}, {"cx", cx}};
  auto build = [](Tape& t2, const Point& q) {
    Var i2 = t2.leaf("img", q.at("img"));
    Var y2 = t2.leaf("cy", q.at("cy"));
    Var x2 = t2.leaf("cx", q.at("cx"));
    Var s = t2.bilinear(i2, y2, x2, 0.5);
    return t2.sum(s * s);
  };
  auto r = grad_check(build, p, 1e-6);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("bilinear: at most 4 image taps per sample; out-of-range reads fill") {
  Tensor img({8, 8}, 1.0);
  Tape t;
  Var vi = t.leaf("img", img);
  Var y = t.constant(Tensor({1}, std::vector<double>{3.3}));
  Var x = t.constant(Tensor({1}, std::vector<double>{4.7}));
  Var s = t.bilinear(vi, y, x, 0.0);
  auto g = t.gradient(s, {"img"});
  int nonzero = 0;
  for (int64_t i = 0; i < g["img"].size(); i++)
    if (g["img"][i] != 0.0) nonzero++;
  CHECK(nonzero == 4);

  Tape t2;
  Var vi2 = t2.leaf("img", img);
  Var far_y = t2.constant(Tensor({1}, std::vector<double>{-30.0}));
  Var far_x = t2.constant(Tensor({1}, std::vector<double>{2.0}));
  Var s2 = t2.bilinear(vi2, far_y, far_x, 7.5);
  CHECK(s2.val()[0] == doctest::Approx(7.5));
  auto g2 = t2.gradient(s2, {"img"});
  for (int64_t i = 0; i < g2["img"].size(); i++) CHECK(g2["img"][i] == 0.0);
}

TEST_CASE("where_mask selects and routes gradients by the mask") {
  Tensor mask({4}, std::vector<double>{1, 0, 1, 0});
  oracle::Lcg rng(12);
  Point p{{"a", rng.tensor({4})}, {"b", rng.tensor({4})}};
  auto build = [&mask](Tape& t, const Point& q) {
    Var a = t.leaf("a", q.at("a"));
    Var b = t.leaf("b", q.at("b"));
    Var w = t.where_mask(a, b, mask);
    return t.sum(w * w);
  };
  auto r = grad_check(build, p, 1e-6);
  CHECK(r.max_rel_err < 1e-8);

  Tape t;
  Var a = t.leaf("a", p.at("a"));
  Var b = t.leaf("b", p.at("b"));
  auto g = t.gradient(t.sum(t.where_mask(a, b, mask)), {"a", "b"});
  CHECK(g["a"][0] == 1.0);
  CHECK(g["a"][1] == 0.0);
  CHECK(g["b"][1] == 1.0);
  CHECK(g["b"][0] == 0.0);
}

TEST_CASE("complex helpers agree with std::complex math") {
  oracle::Lcg rng(13);
  Tensor ar = rng.tensor({7}), ai = rng.tensor({7}), br = rng.tensor({7}), bi = rng.tensor({7});
  Tape t;
  CVar a{t.constant(ar), t.constant(ai)}, b{t.constant(br), t.constant(bi)};
  CVar prod = cmul(a, b);
  Var i2 = cabs2(a);
  for (int64_t i = 0; i < 7; i++) {
    std::complex<double> z = std::complex<double>(ar[i], ai[i]) * std::complex<double>(br[i], bi[i]);
    CHECK(prod.re.val()[i] == doctest::Approx(z.real()).epsilon(1e-12));
    CHECK(prod.im.val()[i] == doctest::Approx(z.imag()).epsilon(1e-12));
    CHECK(i2.val()[i] == doctest::Approx(std::norm(std::complex<double>(ar[i], ai[i]))).epsilon(1e-12));
  }
  CVar ph = cexp_i(t.constant(Tensor({2}, std::vector<double>{0.3, -1.2})));
  CHECK(ph.re.val()[0] == doctest::Approx(std::cos(0.3)));
  CHECK(ph.im.val()[1] == doctest::Approx(std::sin(-1.2)));
}

TEST_CASE("gradient is linear in the loss") {
  oracle::Lcg rng(14);
  Tensor x = rng.tensor({3, 3});
  auto grad_of = [&](double a, double b) {
    Tape t;
    Var v = t.leaf("x", x);
    Var f = t.sum(v * v * v);
    Var g2 = t.sum(t.exp(v * 0.3));
    return t.gradient(a * f + b * g2, {"x"})["x"];
  };
  Tensor gf = grad_of(1, 0), gg = grad_of(0, 1), gmix = grad_of(2.0, -0.5);
  for (int64_t i = 0; i < 9; i++)
    CHECK(gmix[i] == doctest::Approx(2.0 * gf[i] - 0.5 * gg[i]).epsilon(1e-10));
}

TEST_CASE("unused leaf receives a zero gradient; unknown name is an error") {
  Tape t;
  Var x = t.leaf("x", Tensor({2}, std::vector<double>{1, 2}));
  t.leaf("unused", Tensor({3}, 1.0));
  Var loss = t.sum(x * x);
  auto g = t.gradient(loss, {"x", "unused"});
  CHECK(g["unused"].shape() == Shape{3});
  for (int64_t i = 0; i < 3; i++) CHECK(g["unused"][i] == 0.0);
  CHECK_THROWS_AS(t.gradient(loss, {"nope"}), Error);
}

TEST_CASE("tape hygiene: duplicate leaves, cross-tape ops, non-scalar loss") {
  Tape t;
  t.leaf("x", Tensor({2}, 1.0));
  CHECK_THROWS_AS(t.leaf("x", Tensor({2}, 1.0)), Error);
  Tape t2;
  Var a = t.leaf("a", Tensor({2}, 1.0));
  Var b = t2.leaf("b", Tensor({2}, 1.0));
  CHECK_THROWS_AS(t.add(a, b), Error);
  Var v = t.leaf("v", Tensor({3}, 2.0));
  CHECK_THROWS_AS(t.gradient(v * v, {"v"}), Error);  // non-scalar loss
  CHECK_THROWS_AS(t.leaf("bad", Tensor({2}, std::vector<double>{1.0, std::nan("")})), Error);
}

TEST_CASE("identical forward passes are bit-identical (no hidden tape state)") {
  oracle::Lcg rng(15);
  Tensor x = rng.tensor({6, 6});
  auto run = [&]() {
    Tape t;
    Var v = t.leaf("x", x);
    auto [fr, fi] = t.fft2(v, t.constant(Tensor({6, 6}, 0.0)));
    Var loss = t.sum(fr * fr + fi * fi);
    auto g = t.gradient(loss, {"x"});
    return std::make_pair(loss.val()[0], g["x"]);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  for (int64_t i = 0; i < g1.size(); i++) CHECK(g1[i] == g2[i]);
}
