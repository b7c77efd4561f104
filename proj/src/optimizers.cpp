#include "xrec/optimizers.hpp"

#include <cmath>
#include <limits>

namespace xrec {
namespace {

void check_pair(const Tensor& x, const Tensor& g, const char* who) {
  if (x.shape() != g.shape())
    throw Error(std::string(who) + ": gradient shape does not match parameter shape");
}

bool all_finite(const Tensor& t) {
  for (int64_t i = 0; i < t.size(); i++)
    if (!std::isfinite(t[i])) return false;
  return true;
}

Tensor counter(double v) { return Tensor::scalar(v); }

double counter_of(const std::map<std::string, Tensor>& blob, const std::string& key) {
  auto it = blob.find(key);
  if (it == blob.end()) throw Error("optimizer snapshot is missing field '" + key + "'");
  if (it->second.size() != 1) throw Error("optimizer snapshot field '" + key + "' is not scalar");
  return it->second[0];
}

class GdOptimizer final : public Optimizer {
 public:
  explicit GdOptimizer(const GdOptions& opt) : rho_(opt.rho), base_(opt.base_iters) {
    if (!(rho_ > 0) || !std::isfinite(rho_)) throw Error("gd: step size must be positive");
    if (base_ < 0) throw Error("gd: base iteration count must be >= 0");
    next_halving_ = base_ > 0 ? base_ : -1;
  }

  void step(Tensor& x, const Tensor& g) override {
    check_pair(x, g, "gd");
    if (!all_finite(g)) throw Error("gd: gradient contains non-finite values");
    if (iter_ == next_halving_) {
      rho_ *= 0.5;
      next_halving_ = 2 * next_halving_ + base_;
    }
    for (int64_t i = 0; i < x.size(); i++) x[i] -= rho_ * g[i];
    iter_++;
  }

  double current_step() const override { return iter_ == next_halving_ ? rho_ * 0.5 : rho_; }

  std::map<std::string, Tensor> snapshot() const override {
    return {{"rho", counter(rho_)},
            {"iter", counter((double)iter_)},
            {"next_halving", counter((double)next_halving_)}};
  }
  void restore(const std::map<std::string, Tensor>& blob) override {
    rho_ = counter_of(blob, "rho");
    iter_ = (int64_t)counter_of(blob, "iter");
    next_halving_ = (int64_t)counter_of(blob, "next_halving");
  }

 private:
  double rho_;
  int64_t base_;
  int64_t iter_ = 0;
  int64_t next_halving_;
};

class MomentumOptimizer final : public Optimizer {
 public:
  explicit MomentumOptimizer(const MomentumOptions& opt) : rho_(opt.rho), gamma_(opt.gamma) {
    if (!(rho_ > 0) || !std::isfinite(rho_)) throw Error("momentum: step size must be positive");
    if (!(gamma_ >= 0 && gamma_ < 1)) throw Error("momentum: gamma must lie in [0,1)");
  }

  void step(Tensor& x, const Tensor& g) override {
    check_pair(x, g, "momentum");
    if (v_.size() == 0) v_ = Tensor(x.shape());
    if (v_.shape() != x.shape()) throw Error("momentum: velocity shape does not match parameter");
    for (int64_t i = 0; i < x.size(); i++) {
      v_[i] = gamma_ * v_[i] + rho_ * g[i];
      x[i] -= v_[i];
    }
  }

  double current_step() const override { return rho_; }

  std::map<std::string, Tensor> snapshot() const override { return {{"v", v_}}; }
  void restore(const std::map<std::string, Tensor>& blob) override {
    auto it = blob.find("v");
    if (it == blob.end()) throw Error("optimizer snapshot is missing field 'v'");
    v_ = it->second;
  }

 private:
  double rho_;
  double gamma_;
  Tensor v_{Shape{0}};
};

class AdamOptimizer final : public Optimizer {
 public:
  explicit AdamOptimizer(const AdamOptions& opt)
      : rho_(opt.rho), b1_(opt.beta1), b2_(opt.beta2), eps_(opt.eps) {
    if (!(rho_ > 0) || !std::isfinite(rho_)) throw Error("adam: step size must be positive");
    if (!(b1_ >= 0 && b1_ < 1) || !(b2_ >= 0 && b2_ < 1))
      throw Error("adam: beta coefficients must lie in [0,1)");
    if (!(eps_ > 0)) throw Error("adam: epsilon must be positive");
  }

  void step(Tensor& x, const Tensor& g) override {
    check_pair(x, g, "adam");
    if (m_.size() == 0) {
      m_ = Tensor(x.shape());
      v_ = Tensor(x.shape());
    }
    if (m_.shape() != x.shape()) throw Error("adam: moment shape does not match parameter");
    t_++;
    const double c1 = 1.0 - std::pow(b1_, (double)t_);
    const double c2 = 1.0 - std::pow(b2_, (double)t_);
    for (int64_t i = 0; i < x.size(); i++) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g[i] * g[i];
      x[i] -= rho_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

  double current_step() const override { return rho_; }

  std::map<std::string, Tensor> snapshot() const override {
    return {{"m", m_}, {"v", v_}, {"t", counter((double)t_)}};
  }
  void restore(const std::map<std::string, Tensor>& blob) override {
    m_ = blob.count("m") ? blob.at("m") : Tensor(Shape{0});
    v_ = blob.count("v") ? blob.at("v") : Tensor(Shape{0});
    t_ = (int64_t)counter_of(blob, "t");
  }

 private:
  double rho_;
  double b1_, b2_, eps_;
  Tensor m_{Shape{0}}, v_{Shape{0}};
  int64_t t_ = 0;
};

class CgOptimizer final : public Optimizer {
 public:
  explicit CgOptimizer(const CgOptions& opt) : opt_(opt) {
    if (!(opt_.rho > 0) || !std::isfinite(opt_.rho))
      throw Error("cg: initial step must be positive");
    if (!(opt_.armijo_c > 0 && opt_.armijo_c < 1)) throw Error("cg: armijo_c must lie in (0,1)");
    if (!(opt_.shrink > 0 && opt_.shrink < 1)) throw Error("cg: shrink must lie in (0,1)");
    if (opt_.max_shrinks < 1) throw Error("cg: max_shrinks must be >= 1");
  }

  void step(Tensor& x, const Tensor& g) override {
    (void)x;
    (void)g;
    throw Error("cg: needs a loss callback to run its line search");
  }
  bool needs_loss() const override { return true; }

  void step(Tensor& x, const Tensor& g, const LossFn& loss) override {
    check_pair(x, g, "cg");
    if (!loss) throw Error("cg: needs a loss callback to run its line search");
    if (has_history_ && g_prev_.shape() != g.shape())
      throw Error("cg: restored history does not match parameter shape");
    double gnorm2 = 0;
    for (int64_t i = 0; i < g.size(); i++) gnorm2 += g[i] * g[i];
    if (gnorm2 == 0) return;  // already stationary

    Tensor d(g.shape());
    double beta = 0;
    if (has_history_) {
      double num = 0, den = 0;
      for (int64_t i = 0; i < g.size(); i++) {
        num += g[i] * (g[i] - g_prev_[i]);
        den += g_prev_[i] * g_prev_[i];
      }
      if (den > 0) beta = std::max(0.0, num / den);
    }
    for (int64_t i = 0; i < g.size(); i++)
      d[i] = -g[i] + (has_history_ ? beta * d_prev_[i] : 0.0);

    bool moved = line_search(x, g, d, loss);
    if (!moved) {
      // direction went stale: restart once along steepest descent
      stagnations_++;
      for (int64_t i = 0; i < g.size(); i++) d[i] = -g[i];
      moved = line_search(x, g, d, loss);
    }
    if (moved) {
      g_prev_ = g;
      d_prev_ = d;
      has_history_ = true;
    } else {
      has_history_ = false;  // give the next call a clean restart
    }
  }

  double current_step() const override { return opt_.rho; }
  int64_t stagnations() const { return stagnations_; }

  std::map<std::string, Tensor> snapshot() const override {
    return {{"g_prev", has_history_ ? g_prev_ : Tensor(Shape{0})},
            {"d_prev", has_history_ ? d_prev_ : Tensor(Shape{0})},
            {"stagnations", counter((double)stagnations_)}};
  }
  void restore(const std::map<std::string, Tensor>& blob) override {
    g_prev_ = blob.count("g_prev") ? blob.at("g_prev") : Tensor(Shape{0});
    d_prev_ = blob.count("d_prev") ? blob.at("d_prev") : Tensor(Shape{0});
    has_history_ = g_prev_.size() > 0;
    stagnations_ = (int64_t)counter_of(blob, "stagnations");
  }

 private:
  static Tensor offset(const Tensor& x, const Tensor& d, double t) {
    Tensor out(x.shape());
    for (int64_t i = 0; i < x.size(); i++) out[i] = x[i] + t * d[i];
    return out;
  }

  // Backtracking Armijo search along d; a successful probe is refined once by
  // fitting a parabola through f(0), f'(0), f(t), which lands on the exact
  // line minimum whenever the loss is quadratic along d.
  bool line_search(Tensor& x, const Tensor& g, const Tensor& d, const LossFn& loss) {
    double slope = 0;
    for (int64_t i = 0; i < g.size(); i++) slope += g[i] * d[i];
    const double f0 = loss(x);
    double t = opt_.rho;
    for (int attempt = 0; attempt <= opt_.max_shrinks; attempt++) {
      double ft = loss(offset(x, d, t));
      if (std::isfinite(ft) && ft <= f0 + opt_.armijo_c * t * slope) {
        double denom = 2.0 * (ft - f0 - slope * t);
        if (denom > 0) {
          double tstar = -slope * t * t / denom;
          if (std::isfinite(tstar) && tstar > 0) {
            double fstar = loss(offset(x, d, tstar));
            if (std::isfinite(fstar) && fstar <= ft &&
                fstar <= f0 + opt_.armijo_c * tstar * slope) {
              t = tstar;
            }
          }
        }
        x = offset(x, d, t);
        return true;
      }
      t *= opt_.shrink;
    }
    return false;
  }

  CgOptions opt_;
  Tensor g_prev_{Shape{0}}, d_prev_{Shape{0}};
  bool has_history_ = false;
  int64_t stagnations_ = 0;
};

}  // namespace

OptimizerKind parse_optimizer_name(const std::string& name) {
  if (name == "gd") return OptimizerKind::Gd;
  if (name == "momentum") return OptimizerKind::Momentum;
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "cg") return OptimizerKind::Cg;
  throw Error("unknown optimizer '" + name + "' (expected gd, momentum, adam, or cg)");
}

const std::vector<std::string>& optimizer_names() {
  static const std::vector<std::string> names = {"gd", "momentum", "adam", "cg"};
  return names;
}

std::unique_ptr<Optimizer> make_gd(const GdOptions& opt) {
  return std::make_unique<GdOptimizer>(opt);
}
std::unique_ptr<Optimizer> make_momentum(const MomentumOptions& opt) {
  return std::make_unique<MomentumOptimizer>(opt);
}
std::unique_ptr<Optimizer> make_adam(const AdamOptions& opt) {
  return std::make_unique<AdamOptimizer>(opt);
}
std::unique_ptr<Optimizer> make_cg(const CgOptions& opt) {
  return std::make_unique<CgOptimizer>(opt);
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double rho) {
  switch (kind) {
    case OptimizerKind::Gd: {
      GdOptions o;
      o.rho = rho;
      return make_gd(o);
    }
    case OptimizerKind::Momentum: {
      MomentumOptions o;
      o.rho = rho;
      return make_momentum(o);
    }
    case OptimizerKind::Adam: {
      AdamOptions o;
      o.rho = rho;
      return make_adam(o);
    }
    case OptimizerKind::Cg: {
      CgOptions o;
      o.rho = rho;
      return make_cg(o);
    }
  }
  throw Error("unknown optimizer kind");
}

}  // namespace xrec
