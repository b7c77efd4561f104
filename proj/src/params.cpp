#include "xrec/params.hpp"

#include <cmath>

namespace xrec {
namespace {

bool all_finite(const Tensor& t) {
  for (int64_t i = 0; i < t.size(); i++)
    if (!std::isfinite(t[i])) return false;
  return true;
}

void check_recognized(const std::string& name, const Tensor& v, RunMode mode) {
  const Shape& s = v.shape();
  auto fail = [&](const std::string& want) {
    throw Error("parameter '" + name + "': expected " + want + ", got shape " +
                shape_str(s));
  };
  if (name == "object") {
    if (s.size() != 4 || (s[3] != 1 && s[3] != 2)) fail("[Ly,Lx,Lz,1|2]");
  } else if (name == "probe") {
    if (s.size() != 4 || s[1] != 2) fail("[n_modes,2,py,px]");
  } else if (name == "probe_pos_correction") {
    if (s.size() != 2 || s[1] != 2) fail("[n_pos,2]");
  } else if (name == "distances") {
    if (s.size() != 1 || s[0] < 1) fail("[n_dist]");
  } else if (name == "defocus") {
    if (s.size() != 1) fail("[num_angles]");
  } else if (name == "tilts") {
    if (s.size() != 2 || s[0] != 3) fail("[3,num_angles]");
    if (mode != RunMode::Dp)
      throw Error(
          "parameter 'tilts': refinement about the horizontal and beam axes is only "
          "available in dp mode (distributed object slabs rotate about the vertical axis "
          "only); current mode is " +
          std::string(run_mode_name(mode)));
  } else if (name == "affine_params") {
    if (s.size() != 2 || s[1] != 7) fail("[n_dist,7]");
  } else if (name == "kappa_log") {
    if (s.size() != 1 || s[0] != 1) fail("[1]");
  } else if (name == "slice_positions") {
    if (s.size() != 1) fail("[n_slices]");
  } else if (name == "cross_angle_offsets") {
    if (s.size() != 2 || s[1] != 2) fail("[num_angles,2]");
  } else {
    throw Error("unrecognized parameter '" + name +
                "' (known: object, probe, probe_pos_correction, distances, defocus, tilts, "
                "affine_params, kappa_log, slice_positions, cross_angle_offsets)");
  }
}

// remove the mean offset so refined positions cannot drift as a block
void recenter(Tensor& corr) {
  const int64_t n = corr.shape()[0];
  if (n == 0) return;
  double my = 0, mx = 0;
  for (int64_t i = 0; i < n; i++) {
    my += corr[2 * i];
    mx += corr[2 * i + 1];
  }
  my /= (double)n;
  mx /= (double)n;
  for (int64_t i = 0; i < n; i++) {
    corr[2 * i] -= my;
    corr[2 * i + 1] -= mx;
  }
}

}  // namespace

RunMode parse_run_mode(const std::string& name) {
  if (name == "dp") return RunMode::Dp;
  if (name == "do") return RunMode::Do;
  if (name == "h5") return RunMode::H5;
  throw Error("unknown runtime mode '" + name + "' (expected dp, do, or h5)");
}

const char* run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::Dp: return "dp";
    case RunMode::Do: return "do";
    case RunMode::H5: return "h5";
  }
  return "?";
}

void ParamRegistry::add(const std::string& name, Tensor init, std::unique_ptr<Optimizer> opt,
                        int64_t enable_at) {
  if (entries_.count(name)) throw Error("parameter '" + name + "' is already registered");
  if (!opt) throw Error("parameter '" + name + "': null optimizer");
  if (enable_at < 0) throw Error("parameter '" + name + "': enable_at must be >= 0");
  check_recognized(name, init, mode_);
  if (!all_finite(init)) throw Error("parameter '" + name + "': initial value is not finite");
  if (name == "probe_pos_correction") recenter(init);
  Entry e;
  e.value = std::move(init);
  e.opt = std::move(opt);
  e.enable_at = enable_at;
  entries_.emplace(name, std::move(e));
  order_.push_back(name);
}

bool ParamRegistry::has(const std::string& name) const { return entries_.count(name) > 0; }

ParamRegistry::Entry& ParamRegistry::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("parameter '" + name + "' is not registered");
  return it->second;
}

const ParamRegistry::Entry& ParamRegistry::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("parameter '" + name + "' is not registered");
  return it->second;
}

const Tensor& ParamRegistry::value(const std::string& name) const { return entry(name).value; }

void ParamRegistry::set_value(const std::string& name, Tensor v) {
  Entry& e = entry(name);
  if (v.shape() != e.value.shape())
    throw Error("parameter '" + name + "': restored value has the wrong shape");
  if (!all_finite(v)) throw Error("parameter '" + name + "': restored value is not finite");
  e.value = std::move(v);
}

int64_t ParamRegistry::enable_at(const std::string& name) const { return entry(name).enable_at; }

bool ParamRegistry::enabled(const std::string& name, int64_t minibatch) const {
  return minibatch >= entry(name).enable_at;
}

Optimizer& ParamRegistry::optimizer(const std::string& name) { return *entry(name).opt; }

std::vector<std::string> ParamRegistry::names() const { return order_; }

std::vector<std::string> ParamRegistry::update_all(const std::map<std::string, Tensor>& grads,
                                                   int64_t minibatch, const TrialEval& eval) {
  std::vector<std::string> report;
  for (const std::string& name : order_) {
    Entry& e = entries_.at(name);
    if (minibatch < e.enable_at) continue;  // frozen window: no update at all
    auto git = grads.find(name);
    if (git == grads.end()) continue;  // leaf unused by this minibatch's model
    const Tensor& g = git->second;
    if (g.shape() != e.value.shape()) {
      throw Error("parameter '" + name + "': gradient shape " + shape_str(g.shape()) +
                  " does not match value shape " + shape_str(e.value.shape()));
    }
    if (!all_finite(g)) {
      report.push_back("parameter '" + name + "': non-finite gradient at minibatch " +
                       std::to_string(minibatch) + "; step rejected");
      continue;
    }
    auto saved = e.opt->snapshot();
    Tensor trial = e.value;
    if (e.opt->needs_loss()) {
      if (!eval)
        throw Error("parameter '" + name +
                    "': its optimizer line-searches the loss but no evaluator was supplied");
      e.opt->step(trial, g, [&](const Tensor& probe) { return eval(name, probe); });
    } else {
      e.opt->step(trial, g);
    }
    if (!all_finite(trial)) {
      e.opt->restore(saved);
      report.push_back("parameter '" + name + "': non-finite update at minibatch " +
                       std::to_string(minibatch) + "; step rejected, value kept");
      continue;
    }
    if (name == "probe_pos_correction") recenter(trial);
    e.value = std::move(trial);
  }
  return report;
}

double ParamRegistry::kappa() const {
  const Entry& e = entry("kappa_log");
  return std::exp(e.value[0]);
}

}  // namespace xrec
