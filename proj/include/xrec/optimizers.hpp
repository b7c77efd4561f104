#pragma once

// First-order update rules. One Optimizer instance owns the history for one
// refinable tensor (object, probe, positions, ... each get their own instance
// and step size). All rules are deterministic: the same (x, g, state) always
// produces the same x'.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xrec/tensor.hpp"

namespace xrec {

enum class OptimizerKind { Gd, Momentum, Adam, Cg };

OptimizerKind parse_optimizer_name(const std::string& name);
const std::vector<std::string>& optimizer_names();

class Optimizer {
 public:
  // Evaluates the loss at a trial value of this optimizer's tensor, with every
  // other input held fixed. Only conjugate gradient probes it.
  using LossFn = std::function<double(const Tensor&)>;

  virtual ~Optimizer() = default;

  virtual void step(Tensor& x, const Tensor& g) = 0;
  virtual void step(Tensor& x, const Tensor& g, const LossFn& loss) {
    (void)loss;
    step(x, g);
  }
  virtual bool needs_loss() const { return false; }

  // Step size the next call will apply (reflects any scheduled halving).
  virtual double current_step() const = 0;

  // Buffers + counters for checkpointing; restore() expects a snapshot() map
  // from the same optimizer type and parameter shape.
  virtual std::map<std::string, Tensor> snapshot() const = 0;
  virtual void restore(const std::map<std::string, Tensor>& blob) = 0;
};

struct GdOptions {
  double rho = 1e-3;
  int64_t base_iters = 0;  // 0 disables the halving schedule
};
struct MomentumOptions {
  double rho = 1e-3;
  double gamma = 0.9;
};
struct AdamOptions {
  double rho = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};
struct CgOptions {
  double rho = 1e-3;  // initial trial step for each line search
  double armijo_c = 1e-4;
  double shrink = 0.5;
  int max_shrinks = 30;
};

std::unique_ptr<Optimizer> make_gd(const GdOptions& opt);
std::unique_ptr<Optimizer> make_momentum(const MomentumOptions& opt);
std::unique_ptr<Optimizer> make_adam(const AdamOptions& opt);
std::unique_ptr<Optimizer> make_cg(const CgOptions& opt);

// Named factory with per-kind defaults; only the step size is configurable here.
std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double rho);

}  // namespace xrec
