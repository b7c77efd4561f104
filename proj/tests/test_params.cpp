#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "xrec/autodiff.hpp"
#include "xrec/params.hpp"

using namespace xrec;

namespace {

std::unique_ptr<Optimizer> gd(double rho) {
  GdOptions o;
  o.rho = rho;
  return make_gd(o);
}

}  // namespace

TEST_CASE("run mode names parse and print") {
  CHECK(parse_run_mode("dp") == RunMode::Dp);
  CHECK(parse_run_mode("do") == RunMode::Do);
  CHECK(parse_run_mode("h5") == RunMode::H5);
  CHECK(std::string(run_mode_name(RunMode::H5)) == "h5");
  CHECK_THROWS_AS(parse_run_mode("mpi"), Error);
}

TEST_CASE("registration: duplicates, unknown names, and shape screening") {
  ParamRegistry reg;
  reg.add("distances", Tensor({3}, {0.1, 0.2, 0.3}), gd(0.1));
  CHECK(reg.has("distances"));
  CHECK_THROWS_AS(reg.add("distances", Tensor({3}), gd(0.1)), Error);
  CHECK_THROWS_WITH_AS(reg.add("step_size", Tensor({1}), gd(0.1)),
                       doctest::Contains("unrecognized"), Error);
  CHECK_THROWS_AS(reg.add("probe_pos_correction", Tensor({4, 3}), gd(0.1)), Error);
  CHECK_THROWS_AS(reg.add("kappa_log", Tensor({2}), gd(0.1)), Error);
  CHECK_THROWS_AS(reg.add("affine_params", Tensor({2, 6}), gd(0.1)), Error);
  Tensor bad({1}, {std::nan("")});
  CHECK_THROWS_AS(reg.add("kappa_log", bad, gd(0.1)), Error);
  CHECK_THROWS_AS(reg.value("probe"), Error);
}

TEST_CASE("registered leaves show up in a tape's gradient map") {
  ParamRegistry reg;
  reg.add("distances", Tensor({2}, {0.4, 0.6}), gd(0.1));
  Tape t;
  Var d = t.leaf("distances", reg.value("distances"));
  Var loss = t.sum(t.mul(d, d));
  auto grads = t.gradient(loss, {"distances"});
  REQUIRE(grads.count("distances") == 1);
  CHECK(grads.at("distances")[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("enable_at freezes a parameter bit-for-bit until its minibatch arrives") {
  ParamRegistry reg;
  reg.add("defocus", Tensor({2}, {1.0, 2.0}), gd(0.5), 3);
  std::map<std::string, Tensor> grads{{"defocus", Tensor({2}, {1.0, 1.0})}};
  for (int64_t mb = 0; mb < 3; mb++) {
    CHECK(!reg.enabled("defocus", mb));
    reg.update_all(grads, mb);
    CHECK(reg.value("defocus")[0] == 1.0);
    CHECK(reg.value("defocus")[1] == 2.0);
  }
  CHECK(reg.enabled("defocus", 3));
  reg.update_all(grads, 3);
  CHECK(reg.value("defocus")[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("update_all: zero gradients change nothing, absent gradients are skipped") {
  ParamRegistry reg;
  reg.add("distances", Tensor({2}, {0.4, 0.6}), gd(0.1));
  reg.add("defocus", Tensor({1}, {5.0}), make_adam(AdamOptions{}));
  std::map<std::string, Tensor> grads{{"distances", Tensor({2})}};  // zeros; no defocus grad
  auto report = reg.update_all(grads, 0);
  CHECK(report.empty());
  CHECK(reg.value("distances")[0] == 0.4);
  CHECK(reg.value("distances")[1] == 0.6);
  CHECK(reg.value("defocus")[0] == 5.0);

  std::map<std::string, Tensor> wrong{{"distances", Tensor({3})}};
  CHECK_THROWS_AS(reg.update_all(wrong, 0), Error);
}

TEST_CASE("position corrections are re-centered after every update") {
  ParamRegistry reg;
  reg.add("probe_pos_correction", Tensor({2, 2}), gd(1.0));
  // gradient -[(1,1),(3,3)] drives the raw step to (1,1),(3,3)
  std::map<std::string, Tensor> grads{
      {"probe_pos_correction", Tensor({2, 2}, {-1.0, -1.0, -3.0, -3.0})}};
  reg.update_all(grads, 0);
  const Tensor& c = reg.value("probe_pos_correction");
  CHECK(c.at2(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(c.at2(0, 1) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(c.at2(1, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c.at2(1, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c.at2(0, 0) + c.at2(1, 0) == 0.0);
  CHECK(c.at2(0, 1) + c.at2(1, 1) == 0.0);

  // a biased initial value is recentered at registration as well
  ParamRegistry reg2;
  reg2.add("probe_pos_correction", Tensor({2, 2}, {2.0, 4.0, 4.0, 8.0}), gd(1.0));
  const Tensor& c2 = reg2.value("probe_pos_correction");
  CHECK(c2.at2(0, 0) == -1.0);
  CHECK(c2.at2(0, 1) == -2.0);
}

TEST_CASE("kappa stays positive while driven across a decade") {
  ParamRegistry reg;
  reg.add("kappa_log", Tensor({1}, {std::log(0.01)}), gd(0.2));
  const double target = std::log(0.1);
  for (int i = 0; i < 200; i++) {
    // quadratic pull in log space toward kappa = 0.1
    Tensor g({1}, {reg.value("kappa_log")[0] - target});
    reg.update_all({{"kappa_log", g}}, i);
    CHECK(reg.kappa() > 0.0);
  }
  CHECK(reg.kappa() == doctest::Approx(0.1).epsilon(1e-8));
}

TEST_CASE("tilt refinement is a dp-only feature") {
  ParamRegistry dp(RunMode::Dp);
  CHECK_NOTHROW(dp.add("tilts", Tensor({3, 4}), gd(0.1)));
  ParamRegistry dobj(RunMode::Do);
  CHECK_THROWS_WITH_AS(dobj.add("tilts", Tensor({3, 4}), gd(0.1)), doctest::Contains("dp mode"),
                       Error);
  ParamRegistry h5(RunMode::H5);
  CHECK_THROWS_AS(h5.add("tilts", Tensor({3, 4}), gd(0.1)), Error);
  // the vertical-axis-only parameters stay available everywhere
  CHECK_NOTHROW(h5.add("cross_angle_offsets", Tensor({4, 2}), gd(0.1)));
}

TEST_CASE("non-finite updates are rejected, reported, and leave no optimizer residue") {
  ParamRegistry poisoned;
  poisoned.add("defocus", Tensor({1}, {1.0}), make_adam(AdamOptions{}));
  ParamRegistry clean;
  clean.add("defocus", Tensor({1}, {1.0}), make_adam(AdamOptions{}));

  Tensor nan_g({1}, {std::nan("")});
  auto report = poisoned.update_all({{"defocus", nan_g}}, 0);
  REQUIRE(report.size() == 1);
  CHECK(report[0].find("defocus") != std::string::npos);
  CHECK(poisoned.value("defocus")[0] == 1.0);

  Tensor inf_g({1}, {std::numeric_limits<double>::infinity()});
  report = poisoned.update_all({{"defocus", inf_g}}, 1);
  REQUIRE(report.size() == 1);
  CHECK(poisoned.value("defocus")[0] == 1.0);

  // after the rejected steps, both registries must evolve identically
  Tensor good({1}, {0.3});
  poisoned.update_all({{"defocus", good}}, 2);
  clean.update_all({{"defocus", good}}, 0);
  CHECK(poisoned.value("defocus")[0] == clean.value("defocus")[0]);
}

TEST_CASE("line-searching optimizers require an evaluator") {
  ParamRegistry reg;
  reg.add("defocus", Tensor({1}, {2.0}), make_cg(CgOptions{}));
  std::map<std::string, Tensor> grads{{"defocus", Tensor({1}, {4.0})}};  // d/dx of x^2 at 2
  CHECK_THROWS_AS(reg.update_all(grads, 0), Error);
  auto eval = [&](const std::string& name, const Tensor& trial) {
    CHECK(name == "defocus");
    return trial[0] * trial[0];
  };
  reg.update_all(grads, 0, eval);
  CHECK(reg.value("defocus")[0] < 2.0);
  CHECK(reg.value("defocus")[0] == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("set_value restores checkpointed values but screens shape and finiteness") {
  ParamRegistry reg;
  reg.add("distances", Tensor({2}, {0.4, 0.6}), gd(0.1));
  reg.set_value("distances", Tensor({2}, {0.5, 0.7}));
  CHECK(reg.value("distances")[1] == 0.7);
  CHECK_THROWS_AS(reg.set_value("distances", Tensor({3})), Error);
  Tensor bad({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(reg.set_value("distances", bad), Error);
  CHECK_THROWS_AS(reg.set_value("probe", Tensor({1, 2, 3, 4})), Error);
}
