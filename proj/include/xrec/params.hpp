#pragma once

// Registry of refinable experimental parameters. Each entry owns its leaf
// tensor, its optimizer instance, and the minibatch index at which refinement
// switches on; before that the value is frozen bit-for-bit. update_all applies
// one optimizer step per enabled entry and then the hygiene rules (position
// corrections are re-centered, kappa lives in log space so it can never leave
// the positive axis).

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xrec/optimizers.hpp"
#include "xrec/tensor.hpp"

namespace xrec {

enum class RunMode { Dp, Do, H5 };

RunMode parse_run_mode(const std::string& name);
const char* run_mode_name(RunMode mode);

class ParamRegistry {
 public:
  explicit ParamRegistry(RunMode mode = RunMode::Dp) : mode_(mode) {}

  // Recognized names (shape constraints enforced): object, probe,
  // probe_pos_correction, distances, defocus, tilts, affine_params, kappa_log,
  // slice_positions, cross_angle_offsets. Duplicate registration is an error;
  // so is registering tilts outside data-parallel mode (the slab layouts
  // cannot re-rotate about the beam or horizontal axes).
  void add(const std::string& name, Tensor init, std::unique_ptr<Optimizer> opt,
           int64_t enable_at = 0);

  bool has(const std::string& name) const;
  const Tensor& value(const std::string& name) const;
  void set_value(const std::string& name, Tensor v);  // checkpoint restore
  int64_t enable_at(const std::string& name) const;
  bool enabled(const std::string& name, int64_t minibatch) const;
  Optimizer& optimizer(const std::string& name);
  std::vector<std::string> names() const;  // in registration order
  RunMode mode() const { return mode_; }

  // Loss probe for line-searching optimizers: evaluates the current minibatch
  // loss with the named parameter replaced by the trial tensor.
  using TrialEval = std::function<double(const std::string& name, const Tensor& trial)>;

  // Steps every enabled entry whose gradient is present. A non-finite gradient
  // or update rejects that parameter's step (value and optimizer state keep
  // their previous contents) and adds a line to the returned report.
  std::vector<std::string> update_all(const std::map<std::string, Tensor>& grads,
                                      int64_t minibatch, const TrialEval& eval = nullptr);

  double kappa() const;  // exp(kappa_log), for reporting

 private:
  struct Entry {
    Tensor value;
    std::unique_ptr<Optimizer> opt;
    int64_t enable_at = 0;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  RunMode mode_;
  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

}  // namespace xrec
