#include "xrec/runtime.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <thread>

#include "xrec/autodiff.hpp"
#include "xrec/regularizers.hpp"
#include "xrec/transforms.hpp"

namespace xrec {

LossKind parse_loss_name(const std::string& name) {
  if (name == "lsq") return LossKind::Lsq;
  if (name == "poisson") return LossKind::Poisson;
  throw Error("unknown loss '" + name + "' (expected lsq or poisson)");
}

// ---------------------------------------------------------------- collectives

WorkerGroup::WorkerGroup(int n_ranks) : n_(n_ranks) {
  if (n_ < 1) throw Error("worker group needs at least one rank");
  deposits_.resize(n_);
}

void WorkerGroup::run(const std::function<void(int)>& body) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    aborted_ = false;
    arrived_ = 0;
    leaving_ = 0;
  }
  if (n_ == 1) {
    body(0);
    return;
  }
  std::vector<std::exception_ptr> errors(n_);
  std::exception_ptr first;
  std::vector<std::thread> threads;
  for (int r = 0; r < n_; r++) {
    threads.emplace_back([&, r]() {
      try {
        body(r);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu_);
        errors[r] = std::current_exception();
        if (!aborted_) {
          aborted_ = true;
          first = std::current_exception();
        }
        cv_.notify_all();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
}

// One rendezvous: every rank deposits a payload, waits for the group, and then
// reads everyone's payloads. Returns a copy of all deposits indexed by rank.
std::vector<std::vector<Tensor>> WorkerGroup::round(int rank, std::vector<Tensor> payload,
                                                    bool /*unused*/) {
  std::unique_lock<std::mutex> lk(mu_);
  cv_.wait(lk, [&] { return leaving_ == 0 || aborted_; });
  if (aborted_) throw Error("worker group aborted");
  deposits_[rank] = std::move(payload);
  arrived_++;
  if (arrived_ == n_) {
    arrived_ = 0;
    leaving_ = n_;
    cv_.notify_all();
  } else {
    cv_.wait(lk, [&] { return leaving_ > 0 || aborted_; });
    if (aborted_) throw Error("worker group aborted");
  }
  std::vector<std::vector<Tensor>> all = deposits_;
  leaving_--;
  if (leaving_ == 0) cv_.notify_all();
  return all;
}

void WorkerGroup::barrier(int rank) { round(rank, {}, false); }

Tensor WorkerGroup::allreduce_sum(int rank, const Tensor& local) {
  auto all = round(rank, {local}, true);
  Tensor acc = all[0][0];
  for (int r = 1; r < n_; r++) {
    const Tensor& t = all[r][0];
    if (t.shape() != acc.shape()) throw Error("allreduce: rank payload shapes differ");
    for (int64_t i = 0; i < acc.size(); i++) acc[i] += t[i];
  }
  return acc;
}

Tensor WorkerGroup::broadcast(int rank, int root, const Tensor& value) {
  if (root < 0 || root >= n_) throw Error("broadcast: bad root rank");
  std::vector<Tensor> payload;
  if (rank == root) payload.push_back(value);
  auto all = round(rank, std::move(payload), false);
  if (all[root].empty()) throw Error("broadcast: root deposited nothing");
  return all[root][0];
}

std::vector<Tensor> WorkerGroup::alltoall(int rank, std::vector<Tensor> outgoing) {
  if ((int)outgoing.size() != n_)
    throw Error("alltoall: need exactly one outgoing tensor per rank");
  auto all = round(rank, std::move(outgoing), false);
  std::vector<Tensor> incoming;
  incoming.reserve(n_);
  for (int src = 0; src < n_; src++) incoming.push_back(std::move(all[src][rank]));
  return incoming;
}

// ------------------------------------------------------------- decomposition

SlabPartition make_slab_partition(int64_t extent, int n_ranks) {
  if (extent < 0) throw Error("slab partition: negative extent");
  if (n_ranks < 1) throw Error("slab partition: need at least one rank");
  SlabPartition p;
  p.total = extent;
  int64_t base = extent / n_ranks, rem = extent % n_ranks, y = 0;
  for (int r = 0; r < n_ranks; r++) {
    int64_t len = base + (r < rem ? 1 : 0);
    p.ranges.emplace_back(y, y + len);
    y += len;
  }
  return p;
}

namespace {

bool req_empty(const ChunkRequest& r) { return r.y1 <= r.y0; }

ChunkRequest decode_req(const Tensor& t) {
  return ChunkRequest{(int64_t)t[0], (int64_t)t[1], (int64_t)t[2], (int64_t)t[3]};
}

Tensor encode_req(const ChunkRequest& r) {
  return Tensor({4}, {(double)r.y0, (double)r.y1, (double)r.x0, (double)r.x1});
}

// rows [r0,r1) x cols [c0,c1) of a [R,X,Z,C] block
Tensor crop_rows_cols(const Tensor& t, int64_t r0, int64_t r1, int64_t c0, int64_t c1) {
  const Shape& s = t.shape();
  const int64_t inner = s[2] * s[3];
  Tensor out({r1 - r0, c1 - c0, s[2], s[3]});
  for (int64_t r = r0; r < r1; r++) {
    const double* src = t.data() + (r * s[1] + c0) * inner;
    double* dst = out.data() + (r - r0) * (c1 - c0) * inner;
    std::memcpy(dst, src, (size_t)((c1 - c0) * inner) * sizeof(double));
  }
  return out;
}

void add_block(Tensor& dst, const Tensor& block, int64_t r_off, int64_t c_off) {
  const Shape& bs = block.shape();
  const Shape& ds = dst.shape();
  const int64_t inner = ds[2] * ds[3];
  for (int64_t r = 0; r < bs[0]; r++) {
    const double* src = block.data() + r * bs[1] * inner;
    double* out = dst.data() + ((r + r_off) * ds[1] + c_off) * inner;
    for (int64_t i = 0; i < bs[1] * inner; i++) out[i] += src[i];
  }
}

void copy_block_into(Tensor& dst, const Tensor& block, int64_t r_off, int64_t c_off) {
  const Shape& bs = block.shape();
  const Shape& ds = dst.shape();
  const int64_t inner = ds[2] * ds[3];
  for (int64_t r = 0; r < bs[0]; r++) {
    const double* src = block.data() + r * bs[1] * inner;
    double* out = dst.data() + ((r + r_off) * ds[1] + c_off) * inner;
    std::memcpy(out, src, (size_t)(bs[1] * inner) * sizeof(double));
  }
}

void check_request(const ChunkRequest& r, const SlabPartition& part, const Shape& slab_shape) {
  if (req_empty(r)) return;
  if (r.y0 < 0 || r.y1 > part.total)
    throw Error("chunk request rows [" + std::to_string(r.y0) + "," + std::to_string(r.y1) +
                ") fall outside the object extent " + std::to_string(part.total));
  if (r.x0 < 0 || r.x1 <= r.x0 || r.x1 > slab_shape[1])
    throw Error("chunk request columns [" + std::to_string(r.x0) + "," + std::to_string(r.x1) +
                ") fall outside the object width " + std::to_string(slab_shape[1]));
}

}  // namespace

Tensor gather_chunk(WorkerGroup& g, int rank, const SlabPartition& part, const Tensor& slab,
                    const ChunkRequest& req) {
  if (slab.rank() != 4) throw Error("gather_chunk: slab must be [rows,Lx,Lz,C]");
  const auto [my0, my1] = part.ranges[rank];
  if (slab.shape()[0] != my1 - my0) throw Error("gather_chunk: slab rows do not match partition");
  check_request(req, part, slab.shape());

  std::vector<Tensor> reqs_out((size_t)g.n_ranks(), encode_req(req));
  std::vector<Tensor> reqs = g.alltoall(rank, std::move(reqs_out));

  std::vector<Tensor> segments((size_t)g.n_ranks());
  for (int d = 0; d < g.n_ranks(); d++) {
    ChunkRequest rd = decode_req(reqs[d]);
    if (req_empty(rd)) continue;
    int64_t lo = std::max(rd.y0, my0), hi = std::min(rd.y1, my1);
    if (lo >= hi) continue;
    segments[d] = crop_rows_cols(slab, lo - my0, hi - my0, rd.x0, rd.x1);
  }
  std::vector<Tensor> got = g.alltoall(rank, std::move(segments));

  if (req_empty(req)) return Tensor();
  const Shape& s = slab.shape();
  Tensor chunk({req.y1 - req.y0, req.x1 - req.x0, s[2], s[3]});
  for (int src = 0; src < g.n_ranks(); src++) {
    if (got[src].size() == 0) continue;
    int64_t src_lo = std::max(req.y0, part.ranges[src].first);
    copy_block_into(chunk, got[src], src_lo - req.y0, 0);
  }
  return chunk;
}

void scatter_gradient(WorkerGroup& g, int rank, const SlabPartition& part, Tensor& grad_slab,
                      const Tensor& chunk_grad, const ChunkRequest& req) {
  const auto [my0, my1] = part.ranges[rank];
  if (grad_slab.rank() != 4 || grad_slab.shape()[0] != my1 - my0)
    throw Error("scatter_gradient: gradient slab does not match partition");
  check_request(req, part, grad_slab.shape());
  if (!req_empty(req)) {
    if (chunk_grad.rank() != 4 || chunk_grad.shape()[0] != req.y1 - req.y0 ||
        chunk_grad.shape()[1] != req.x1 - req.x0)
      throw Error("scatter_gradient: chunk gradient shape does not match the request");
  }

  std::vector<Tensor> reqs_out((size_t)g.n_ranks(), encode_req(req));
  std::vector<Tensor> reqs = g.alltoall(rank, std::move(reqs_out));

  std::vector<Tensor> segments((size_t)g.n_ranks());
  if (!req_empty(req)) {
    for (int d = 0; d < g.n_ranks(); d++) {
      const auto [dy0, dy1] = part.ranges[d];
      int64_t lo = std::max(req.y0, dy0), hi = std::min(req.y1, dy1);
      if (lo >= hi) continue;
      segments[d] = crop_rows_cols(chunk_grad, lo - req.y0, hi - req.y0, 0, req.x1 - req.x0);
    }
  }
  std::vector<Tensor> got = g.alltoall(rank, std::move(segments));

  for (int src = 0; src < g.n_ranks(); src++) {
    if (got[src].size() == 0) continue;
    ChunkRequest rs = decode_req(reqs[src]);
    int64_t lo = std::max(rs.y0, my0);
    add_block(grad_slab, got[src], lo - my0, rs.x0);
  }
}

// ---------------------------------------------------------------- scheduling

std::vector<Iteration> make_schedule(int64_t n_angles, int64_t n_tiles, int64_t batch_size,
                                     int n_ranks) {
  if (n_angles < 1 || n_tiles < 1) throw Error("schedule: need at least one angle and one tile");
  if (batch_size < 1) throw Error("schedule: batch size must be >= 1");
  if (n_ranks < 1) throw Error("schedule: need at least one rank");
  std::vector<Iteration> plan;
  for (int64_t a = 0; a < n_angles; a++) {
    int64_t pos = 0;
    while (pos < n_tiles) {
      Iteration it;
      it.angle = a;
      it.per_rank.resize((size_t)n_ranks);
      for (int r = 0; r < n_ranks && pos < n_tiles; r++)
        for (int64_t b = 0; b < batch_size && pos < n_tiles; b++)
          it.per_rank[(size_t)r].push_back(pos++);
      for (const auto& v : it.per_rank) it.tile_count += (int64_t)v.size();
      plan.push_back(std::move(it));
    }
  }
  return plan;
}

// ----------------------------------------------------------- forward builder

namespace {

// Leaf bookkeeping for one tape: refinable parameters become named leaves,
// fixed inputs become constants. used() lists the leaves actually created, and
// is identical on every rank because it depends only on model kind + registry.
struct LeafSet {
  Tape& t;
  const ParamRegistry& reg;
  const std::map<std::string, Tensor>& fixed;
  std::map<std::string, Var> cache;
  std::vector<std::string> used;

  Var get(const std::string& name) {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    if (reg.has(name)) {
      Var v = t.leaf(name, reg.value(name));
      cache.emplace(name, v);
      used.push_back(name);
      return v;
    }
    auto fit = fixed.find(name);
    if (fit != fixed.end()) {
      Var v = t.constant(fit->second);
      cache.emplace(name, v);
      return v;
    }
    throw Error("model input '" + name +
                "' is neither registered for refinement nor provided as a fixed input");
  }
  std::optional<Var> maybe(const std::string& name) {
    if (!reg.has(name) && !fixed.count(name)) return std::nullopt;
    return get(name);
  }
};

// parameter names the forward pass of this model kind will turn into leaves
std::vector<std::string> model_param_names(const Problem& p, const ParamRegistry& reg) {
  std::vector<std::string> want;
  switch (p.kind) {
    case ModelKind::Ptychography:
      want = {"probe", "probe_pos_correction"};
      break;
    case ModelKind::SparseMultislice:
      want = {"probe", "probe_pos_correction", "slice_positions"};
      break;
    case ModelKind::Mdh:
      want = {"distances", "affine_params", "kappa_log"};
      break;
    case ModelKind::Tomography:
      break;
  }
  std::vector<std::string> out;
  for (const auto& n : want)
    if (reg.has(n)) out.push_back(n);
  return out;
}

Var predict_batch(Tape& t, const Problem& p, Var object, const TileBatch& batch, LeafSet& ls) {
  switch (p.kind) {
    case ModelKind::Ptychography: {
      CVar f = ptycho_predict(t, object, ls.get("probe"), batch, ls.maybe("probe_pos_correction"),
                              p.cfg);
      return multimode_intensity(t, f);
    }
    case ModelKind::SparseMultislice: {
      CVar f = sparse_ms_predict(t, object, ls.get("probe"), batch,
                                 ls.maybe("probe_pos_correction"), ls.get("slice_positions"),
                                 p.cfg);
      return multimode_intensity(t, f);
    }
    case ModelKind::Mdh: {
      std::optional<Var> klog;
      if (p.cfg.kappa_mode) klog = ls.get("kappa_log");
      return mdh_predict(t, object, ls.get("distances"), ls.maybe("affine_params"), p.cfg, klog);
    }
    case ModelKind::Tomography: {
      Var theta = t.constant(Tensor::scalar(0.0));  // rotation handled by the runtime
      return tomo_predict(t, object, theta, batch, p.cfg);
    }
  }
  throw Error("unknown model kind");
}

Var data_loss(Tape& t, LossKind k, Var ipred, const Tensor& imeas) {
  return k == LossKind::Lsq ? loss_lsq(t, ipred, imeas) : loss_poisson(t, ipred, imeas);
}

Var add_regs(Tape& t, const Problem& p, Var loss, Var object_leaf,
             std::vector<Var>* terms_out = nullptr) {
  std::vector<std::pair<double, Var>> terms;
  for (const RegSpec& r : p.regs) {
    if (r.kind == "l1")
      terms.emplace_back(1.0, reg_l1(t, object_leaf, r.a1, r.a2, p.cfg.representation));
    else if (r.kind == "tv")
      terms.emplace_back(1.0, reg_tv(t, object_leaf, r.gamma, p.cfg.representation));
    else
      throw Error("unknown regularizer '" + r.kind + "' (expected l1 or tv)");
  }
  if (terms_out)
    for (auto& [weight, v] : terms) terms_out->push_back(v);
  return assemble_loss(t, loss, terms);
}

Tensor measured_batch(const Problem& p, int64_t angle, const std::vector<int64_t>& tiles) {
  int64_t ty = p.measured.dim(2), tx = p.measured.dim(3);
  Tensor out({(int64_t)tiles.size(), ty, tx});
  for (size_t i = 0; i < tiles.size(); i++) {
    const double* src = p.measured.data() + ((angle * p.measured.dim(1)) + tiles[i]) * ty * tx;
    std::memcpy(out.data() + (int64_t)i * ty * tx, src, (size_t)(ty * tx) * sizeof(double));
  }
  return out;
}

// rotate a packed [Ly,Lx,Lz,C] volume about the vertical axis, channel by
// channel; gradients rotate with zero fill, objects with vacuum fill
Tensor rotate_packed(const Tensor& obj, double theta, Representation rep, bool gradient) {
  const Shape& s = obj.shape();
  if (s[0] == 0 || theta == 0.0) return obj;
  Tensor out(s);
  const int64_t n = s[0] * s[1] * s[2], C = s[3];
  for (int64_t c = 0; c < C; c++) {
    Tensor plane({s[0], s[1], s[2]});
    for (int64_t i = 0; i < n; i++) plane[i] = obj[i * C + c];
    double fill = gradient ? 0.0 : vacuum_fill(rep, (int)c);
    Tensor rot = rotate_volume(plane, theta, 0, fill);
    for (int64_t i = 0; i < n; i++) out[i * C + c] = rot[i];
  }
  return out;
}

void quantize_f32(Tensor& t) {
  for (int64_t i = 0; i < t.size(); i++) t[i] = (double)(float)t[i];
}

ChunkRequest chunk_for_tile(const TileSpec& tile) {
  return ChunkRequest{tile.oy, tile.oy + tile.ny, tile.ox, tile.ox + tile.nx};
}

std::unique_ptr<Optimizer> make_object_optimizer(const RuntimeOptions& opt) {
  switch (opt.object_opt) {
    case OptimizerKind::Gd: {
      GdOptions o;
      o.rho = opt.object_step;
      o.base_iters = opt.gd_base_iters;
      return make_gd(o);
    }
    case OptimizerKind::Momentum: {
      MomentumOptions o;
      o.rho = opt.object_step;
      return make_momentum(o);
    }
    case OptimizerKind::Adam: {
      AdamOptions o;
      o.rho = opt.object_step;
      return make_adam(o);
    }
    case OptimizerKind::Cg:
      throw Error("cg is not available for the object (its line search would re-run the full "
                  "forward pass per probe); use it for experimental parameters");
  }
  throw Error("unknown object optimizer kind");
}

struct ParamGradAccum {
  std::vector<std::string> names;
  std::map<std::string, Tensor> sums;

  explicit ParamGradAccum(const std::vector<std::string>& canonical, const ParamRegistry& reg) {
    names = canonical;
    for (const auto& n : names) sums.emplace(n, Tensor(reg.value(n).shape()));
  }
  void add(const std::map<std::string, Tensor>& grads) {
    for (const auto& n : names) {
      auto it = grads.find(n);
      if (it == grads.end()) continue;
      Tensor& acc = sums.at(n);
      for (int64_t i = 0; i < acc.size(); i++) acc[i] += it->second[i];
    }
  }
  // all-reduce each sum and divide by the shared weight
  std::map<std::string, Tensor> reduce(WorkerGroup& g, int rank, double denom) {
    std::map<std::string, Tensor> out;
    for (const auto& n : names) {
      Tensor t = g.allreduce_sum(rank, sums.at(n));
      for (int64_t i = 0; i < t.size(); i++) t[i] /= denom;
      out.emplace(n, std::move(t));
    }
    return out;
  }
};

struct EpochLossAccum {
  double weighted = 0;
  int64_t tiles = 0;
  void add(double loss, int64_t count) {
    weighted += loss * (double)count;
    tiles += count;
  }
  double mean() const { return tiles ? weighted / (double)tiles : 0.0; }
};

void apply_resume(ParamRegistry& reg, const Checkpoint& cp) {
  for (const auto& [name, value] : cp.params) {
    if (!reg.has(name)) throw Error("resume: parameter '" + name + "' is not registered");
    reg.set_value(name, value);
    auto it = cp.param_opt.find(name);
    if (it != cp.param_opt.end()) reg.optimizer(name).restore(it->second);
  }
}

Checkpoint build_checkpoint(const Tensor& object, int64_t epochs_done, int64_t iters_done,
                            ParamRegistry& reg,
                            std::vector<std::map<std::string, Tensor>> object_opt) {
  Checkpoint cp;
  cp.object = object;
  cp.epochs_done = epochs_done;
  cp.iterations_done = iters_done;
  for (const auto& name : reg.names()) {
    cp.params.emplace(name, reg.value(name));
    cp.param_opt.emplace(name, reg.optimizer(name).snapshot());
  }
  cp.object_opt = std::move(object_opt);
  return cp;
}

// optimizer snapshots are exchanged as (sorted-key, tensor) pairs so rank 0
// can checkpoint per-rank object optimizer state; key sets match across ranks
std::vector<std::map<std::string, Tensor>> collect_opt_snapshots(
    WorkerGroup& g, int rank, const std::map<std::string, Tensor>& mine) {
  std::vector<std::string> keys;
  for (const auto& [k, v] : mine) keys.push_back(k);
  std::vector<std::map<std::string, Tensor>> all((size_t)g.n_ranks());
  for (const auto& key : keys) {
    std::vector<Tensor> out((size_t)g.n_ranks());
    out[0] = mine.at(key);  // destined for rank 0
    auto got = g.alltoall(rank, std::move(out));
    if (rank == 0)
      for (int src = 0; src < g.n_ranks(); src++) all[(size_t)src].emplace(key, got[src]);
  }
  return all;
}

struct SharedReport {
  RunReport report;
  std::mutex mu;
};

void validate_problem(const Problem& p, const Tensor& object0, const RuntimeOptions& opt,
                      const Checkpoint* resume) {
  if (p.measured.rank() != 4)
    throw Error("measured data must be [n_angles, n_tiles, tile_y, tile_x]");
  if ((int64_t)p.angles.size() != p.measured.dim(0))
    throw Error("angle list does not match the measured data's angle count");
  if ((int64_t)p.tiles.size() != p.measured.dim(1))
    throw Error("tile list does not match the measured data's tile count");
  for (size_t i = 0; i < p.tiles.size(); i++)
    if (p.tiles[i].ny != p.measured.dim(2) || p.tiles[i].nx != p.measured.dim(3))
      throw Error("tile " + std::to_string(i) + " extent does not match the measured tile shape");
  if (object0.rank() != 4) throw Error("initial object must be [Ly,Lx,Lz,C]");
  if (opt.n_ranks < 1) throw Error("need at least one rank");
  if (opt.batch_size < 1) throw Error("batch size must be >= 1");
  if (opt.epochs < 0) throw Error("epoch count must be >= 0");
  if (p.kind == ModelKind::Mdh) {
    if (opt.mode != RunMode::Dp)
      throw Error("the multi-distance model runs full-field and supports dp mode only");
    if (p.angles.size() != 1)
      throw Error("the multi-distance model expects a single viewing angle");
    if (opt.batch_size < p.measured.dim(1))
      throw Error("the multi-distance model predicts all holograms jointly; set batch size >= "
                  "the hologram count");
  }
  if (p.cfg.kappa_mode && p.kind != ModelKind::Mdh)
    throw Error("the single-material coupling is only wired for the multi-distance model");
  if (!p.regs.empty() && opt.mode != RunMode::Dp)
    throw Error("regularizers need the full object in memory; run them in dp mode");
  if (opt.mode == RunMode::H5 && opt.store_path.empty())
    throw Error("h5 mode needs a backing store path");
  if (resume) {
    if (resume->object.shape() != object0.shape())
      throw Error("resume: checkpoint object shape does not match");
    if ((int)resume->object_opt.size() != opt.n_ranks)
      throw Error("resume: checkpoint was written with a different rank count");
  }
  for (double a : p.angles)
    if (!std::isfinite(a)) throw Error("viewing angles must be finite");
}

// ------------------------------------------------------------------- engines

// dp: every rank owns a full object copy; per iteration the weighted gradient
// average is all-reduced and each rank applies the identical update.
void run_dp_rank(int rank, const Problem& p, const Tensor& object0,
                 const RegistryFactory& make_registry, const RuntimeOptions& opt,
                 const EpochHook& hook, const Checkpoint* resume,
                 const std::vector<Iteration>& plan, WorkerGroup& g, SharedReport& shared) {
  const Representation rep = p.cfg.representation;
  Tensor object = resume ? resume->object : object0;
  auto reg = make_registry(rank);
  if (!reg) throw Error("registry factory returned null");
  auto obj_opt = make_object_optimizer(opt);
  if (resume) {
    apply_resume(*reg, *resume);
    obj_opt->restore(resume->object_opt[(size_t)rank]);
  }
  const std::vector<std::string> canonical = model_param_names(p, *reg);
  int64_t start_epoch = resume ? resume->epochs_done : 0;
  int64_t git = resume ? resume->iterations_done : 0;

  // line-searching parameter optimizers probe the global loss in lockstep
  ParamRegistry::TrialEval trial_eval;
  const Iteration* cur_it = nullptr;
  const Tensor* cur_forward_object = nullptr;
  trial_eval = [&](const std::string& name, const Tensor& trial) {
    Tape t;
    LeafSet ls{t, *reg, p.fixed, {{name, t.constant(trial)}}, {}};
    const auto& mine = cur_it->per_rank[(size_t)rank];
    double local = 0;
    if (!mine.empty()) {
      TileBatch batch;
      batch.angle_index = cur_it->angle;
      for (int64_t id : mine) batch.tiles.push_back(p.tiles[(size_t)id]);
      Var obj = t.constant(*cur_forward_object);
      Var I = predict_batch(t, p, obj, batch, ls);
      local = data_loss(t, p.loss, I, measured_batch(p, cur_it->angle, mine)).val()[0];
    }
    double w = (double)mine.size();
    Tensor tot = g.allreduce_sum(rank, Tensor({2}, {local * w, w}));
    return tot[0] / tot[1];
  };

  bool diverged = false;
  std::string divergence_note;
  std::vector<std::string> notes;
  std::vector<std::vector<double>> iter_rows;
  for (int64_t epoch = start_epoch; epoch < opt.epochs && !diverged; epoch++) {
    EpochLossAccum eloss;
    Tensor rotated;
    for (size_t ii = 0; ii < plan.size(); ii++) {
      const Iteration& it = plan[ii];
      double theta = p.angles[(size_t)it.angle];
      bool rotate_needed = theta != 0.0;
      bool angle_start = ii == 0 || plan[ii - 1].angle != it.angle;
      if (rotate_needed && angle_start) rotated = rotate_packed(object, theta, rep, false);
      const Tensor& forward_object = rotate_needed ? rotated : object;

      const auto& mine = it.per_rank[(size_t)rank];
      Tape t;
      LeafSet ls{t, *reg, p.fixed, {}, {}};
      bool have_data = !mine.empty();
      bool use_regs = !p.regs.empty() && have_data;  // idle ranks carry zero weight anyway
      bool reg_on_home = use_regs && rotate_needed;
      std::optional<Var> object_leaf;
      if (have_data) object_leaf = t.leaf("object", forward_object);
      Var dloss = [&] {
        if (!have_data) return t.constant(Tensor::scalar(0.0));
        TileBatch batch;
        batch.angle_index = it.angle;
        for (int64_t id : mine) batch.tiles.push_back(p.tiles[(size_t)id]);
        Var I = predict_batch(t, p, *object_leaf, batch, ls);
        return data_loss(t, p.loss, I, measured_batch(p, it.angle, mine));
      }();
      Var loss = dloss;
      std::vector<Var> reg_terms;
      if (use_regs) {
        // the penalty acts on the unrotated object so its gradient is exact;
        // at nonzero angles it gets its own leaf
        Var home = reg_on_home ? t.leaf("object_home", object) : *object_leaf;
        loss = add_regs(t, p, dloss, home, &reg_terms);
      }

      std::vector<std::string> want = ls.used;
      if (object_leaf) want.push_back("object");
      if (reg_on_home) want.push_back("object_home");
      auto grads = t.gradient(loss, want);

      double w = (double)mine.size();
      // per-rank gradients enter the all-reduce tile-weighted; the combined
      // average is exact even when the last iteration of an epoch is ragged
      Tensor gobj =
          grads.count("object") ? std::move(grads.at("object")) : Tensor(object.shape());
      for (int64_t i = 0; i < gobj.size(); i++) gobj[i] *= w;
      Tensor gsum = g.allreduce_sum(rank, gobj);
      Tensor wsum = g.allreduce_sum(rank, Tensor::scalar(w));
      double W = wsum[0];
      for (int64_t i = 0; i < gsum.size(); i++) gsum[i] /= W;
      Tensor gtotal = rotate_needed ? rotate_packed(gsum, -theta, rep, true) : std::move(gsum);
      if (rotate_needed && !p.regs.empty()) {
        Tensor gh(object.shape());
        if (reg_on_home) {
          gh = grads.at("object_home");
          for (int64_t i = 0; i < gh.size(); i++) gh[i] *= w;
        }
        Tensor ghsum = g.allreduce_sum(rank, gh);
        for (int64_t i = 0; i < gtotal.size(); i++) gtotal[i] += ghsum[i] / W;
      }

      ParamGradAccum pacc(canonical, *reg);
      pacc.add(grads);
      for (auto& [n, s] : pacc.sums)
        for (int64_t i = 0; i < s.size(); i++) s[i] *= w;
      auto pmeans = pacc.reduce(g, rank, W);

      // the loss all-reduce also carries the decomposition: total, data term,
      // one slot per regularizer (identical on every data-carrying rank, so
      // the tile-weighted mean reproduces the common value)
      const int64_t nreg = (int64_t)p.regs.size();
      Tensor lparts({2 + nreg});
      lparts[0] = loss.val()[0] * w;
      lparts[1] = dloss.val()[0] * w;
      for (int64_t i = 0; i < nreg; i++)
        lparts[2 + i] = use_regs ? reg_terms[(size_t)i].val()[0] * w : 0.0;
      Tensor lsum = g.allreduce_sum(rank, lparts);
      double iteration_loss = lsum[0] / W;
      if (!std::isfinite(iteration_loss)) {
        diverged = true;
        divergence_note = "loss became non-finite at epoch " + std::to_string(epoch) +
                          ", iteration " + std::to_string(git) + "; stopping before the update";
        break;
      }
      if (rank == 0) {
        std::vector<double> row{(double)epoch, (double)git, lsum[1] / W};
        for (int64_t i = 0; i < nreg; i++) row.push_back(lsum[2 + i] / W);
        iter_rows.push_back(std::move(row));
      }

      obj_opt->step(object, gtotal);
      cur_it = &it;
      cur_forward_object = &forward_object;
      auto rejected = reg->update_all(pmeans, git, trial_eval);
      if (rank == 0)
        for (auto& r : rejected) notes.push_back(std::move(r));
      git++;
      eloss.add(iteration_loss, it.tile_count);
    }

    auto snaps = collect_opt_snapshots(g, rank, obj_opt->snapshot());
    if (rank == 0) {
      double el = eloss.mean();
      std::lock_guard<std::mutex> lk(shared.mu);
      if (!diverged) shared.report.epoch_losses.push_back(el);
      for (auto& r : iter_rows) shared.report.iteration_log.push_back(std::move(r));
      iter_rows.clear();
      shared.report.iterations = git;
      shared.report.last =
          build_checkpoint(object, diverged ? epoch : epoch + 1, git, *reg, std::move(snaps));
      if (hook) hook(shared.report.last, el, diverged);
      if (diverged) {
        shared.report.diverged = true;
        shared.report.notes.push_back(divergence_note);
      }
      shared.report.object = object;
      for (auto& n : notes) shared.report.notes.push_back(std::move(n));
      notes.clear();
    }
  }
  if (rank == 0 && start_epoch >= opt.epochs) {
    // no epochs to run: report the starting state so callers can inspect it
    std::lock_guard<std::mutex> lk(shared.mu);
    shared.report.object = object;
    shared.report.iterations = git;
    shared.report.last = build_checkpoint(
        object, start_epoch, git, *reg,
        std::vector<std::map<std::string, Tensor>>((size_t)opt.n_ranks, obj_opt->snapshot()));
  }
}

// do/h5: the object lives as row slabs, one per rank (in memory for do, in a
// shared backing file for h5). Forward passes run per tile on gathered chunks;
// tile gradients are scattered back to their owning rows and averaged.
void run_slab_rank(int rank, const Problem& p, const Tensor& object0,
                   const RegistryFactory& make_registry, const RuntimeOptions& opt,
                   const EpochHook& hook, const Checkpoint* resume,
                   const std::vector<Iteration>& plan, WorkerGroup& g,
                   const std::shared_ptr<ObjectStore>& store, SharedReport& shared) {
  const Representation rep = p.cfg.representation;
  const bool use_store = opt.mode == RunMode::H5;
  const Shape oshape = object0.shape();
  const int64_t Ly = oshape[0];
  SlabPartition part = make_slab_partition(Ly, opt.n_ranks);
  const int64_t my0 = part.ranges[(size_t)rank].first;
  const int64_t my1 = part.ranges[(size_t)rank].second;

  auto reg = make_registry(rank);
  if (!reg) throw Error("registry factory returned null");
  for (const auto& name : reg->names())
    if (reg->optimizer(name).needs_loss())
      throw Error("parameter '" + name +
                  "' uses a line-searching optimizer, which is only wired for dp mode");
  auto obj_opt = make_object_optimizer(opt);
  if (resume) {
    apply_resume(*reg, *resume);
    obj_opt->restore(resume->object_opt[(size_t)rank]);
  }
  const std::vector<std::string> canonical = model_param_names(p, *reg);
  int64_t start_epoch = resume ? resume->epochs_done : 0;
  int64_t git = resume ? resume->iterations_done : 0;

  const Tensor& source = resume ? resume->object : object0;
  Tensor slab;  // do mode: this rank's live rows
  if (!use_store) {
    slab = crop_rows_cols(source, my0, my1, 0, oshape[1]);
    if (opt.object_f32) quantize_f32(slab);
  } else {
    Tensor rows = crop_rows_cols(source, my0, my1, 0, oshape[1]);
    if (opt.object_f32) quantize_f32(rows);
    store->write_rows(ObjectStore::kObject, my0, my1, rows);
    g.barrier(rank);
  }

  auto assemble_full = [&]() -> Tensor {
    if (use_store) {
      g.barrier(rank);
      return rank == 0 ? store->read_rows(ObjectStore::kObject, 0, Ly) : Tensor();
    }
    std::vector<Tensor> out((size_t)g.n_ranks());
    out[0] = slab;
    auto got = g.alltoall(rank, std::move(out));
    if (rank != 0) return Tensor();
    Tensor full(oshape);
    for (int src = 0; src < g.n_ranks(); src++)
      if (got[src].size() > 0) copy_block_into(full, got[src], part.ranges[src].first, 0);
    return full;
  };

  bool diverged = false;
  std::string divergence_note;
  std::vector<std::string> notes;
  std::vector<std::vector<double>> iter_rows;
  for (int64_t epoch = start_epoch; epoch < opt.epochs && !diverged; epoch++) {
    EpochLossAccum eloss;
    Tensor rotated_slab;
    for (size_t ii = 0; ii < plan.size(); ii++) {
      const Iteration& it = plan[ii];
      double theta = p.angles[(size_t)it.angle];
      bool rotate_needed = theta != 0.0;
      bool angle_start = ii == 0 || plan[ii - 1].angle != it.angle;
      if (rotate_needed && angle_start) {
        if (use_store) {
          Tensor rows = store->read_rows(ObjectStore::kObject, my0, my1);
          store->write_rows(ObjectStore::kRotated, my0, my1, rotate_packed(rows, theta, rep, false));
          g.barrier(rank);
        } else {
          rotated_slab = rotate_packed(slab, theta, rep, false);
        }
      }

      const auto& mine = it.per_rank[(size_t)rank];
      const int64_t T = it.tile_count;
      double local_loss = 0;
      ParamGradAccum pacc(canonical, *reg);

      Tensor grad_slab;
      std::vector<std::pair<ChunkRequest, Tensor>> pending;  // h5: grads awaiting accumulation

      auto forward_tile = [&](int64_t tid, const Tensor& chunk) -> Tensor {
        Tape t;
        LeafSet ls{t, *reg, p.fixed, {}, {}};
        TileSpec local = p.tiles[(size_t)tid];
        local.oy = 0;
        local.ox = 0;
        TileBatch batch;
        batch.angle_index = it.angle;
        batch.tiles.push_back(local);
        Var obj = t.leaf("object", chunk);
        Var I = predict_batch(t, p, obj, batch, ls);
        Var loss = data_loss(t, p.loss, I, measured_batch(p, it.angle, {tid}));
        std::vector<std::string> want = ls.used;
        want.push_back("object");
        auto grads = t.gradient(loss, want);
        local_loss += loss.val()[0];
        pacc.add(grads);
        return grads.at("object");
      };

      if (!use_store) {
        grad_slab = Tensor({my1 - my0, oshape[1], oshape[2], oshape[3]});
        const Tensor& rslab = rotate_needed ? rotated_slab : slab;
        size_t rounds = 0;
        for (const auto& v : it.per_rank) rounds = std::max(rounds, v.size());
        for (size_t k = 0; k < rounds; k++) {
          bool active = k < mine.size();
          ChunkRequest creq =
              active ? chunk_for_tile(p.tiles[(size_t)mine[k]]) : ChunkRequest{0, 0, 0, 0};
          Tensor chunk = gather_chunk(g, rank, part, rslab, creq);
          Tensor cgrad;
          if (active) cgrad = forward_tile(mine[k], chunk);
          scatter_gradient(g, rank, part, grad_slab, cgrad, creq);
        }
      } else {
        store->zero_rows(ObjectStore::kGradient, my0, my1);
        auto array = rotate_needed ? ObjectStore::kRotated : ObjectStore::kObject;
        for (int64_t tid : mine) {
          ChunkRequest creq = chunk_for_tile(p.tiles[(size_t)tid]);
          check_request(creq, part, Shape{0, oshape[1], oshape[2], oshape[3]});
          Tensor rows = store->read_rows(array, creq.y0, creq.y1);
          Tensor chunk = crop_rows_cols(rows, 0, creq.y1 - creq.y0, creq.x0, creq.x1);
          pending.emplace_back(creq, forward_tile(tid, chunk));
        }
        g.barrier(rank);  // all forward reads done before gradient writes begin
        for (int r = 0; r < g.n_ranks(); r++) {
          if (r == rank) {
            for (auto& [creq, cgrad] : pending) {
              Tensor rows({creq.y1 - creq.y0, oshape[1], oshape[2], oshape[3]});
              add_block(rows, cgrad, 0, creq.x0);
              store->accumulate_gradient(creq.y0, creq.y1, rows);
            }
          }
          g.barrier(rank);
        }
      }

      auto pmeans = pacc.reduce(g, rank, (double)T);
      Tensor lsum = g.allreduce_sum(rank, Tensor::scalar(local_loss));
      double iteration_loss = lsum[0] / (double)T;
      if (!std::isfinite(iteration_loss)) {
        diverged = true;
        divergence_note = "loss became non-finite at epoch " + std::to_string(epoch) +
                          ", iteration " + std::to_string(git) + "; stopping before the update";
        break;
      }
      // no regularizers in the slab modes, so the data term is the whole loss
      if (rank == 0) iter_rows.push_back({(double)epoch, (double)git, iteration_loss});

      if (use_store) grad_slab = store->read_rows(ObjectStore::kGradient, my0, my1);
      for (int64_t i = 0; i < grad_slab.size(); i++) grad_slab[i] /= (double)T;
      Tensor gback = rotate_needed ? rotate_packed(grad_slab, -theta, rep, true)
                                   : std::move(grad_slab);
      if (!use_store) {
        obj_opt->step(slab, gback);
        if (opt.object_f32) quantize_f32(slab);
      } else {
        Tensor rows = store->read_rows(ObjectStore::kObject, my0, my1);
        obj_opt->step(rows, gback);
        if (opt.object_f32) quantize_f32(rows);
        store->write_rows(ObjectStore::kObject, my0, my1, rows);
        g.barrier(rank);  // updates land before the next iteration reads
      }
      auto rejected = reg->update_all(pmeans, git, nullptr);
      if (rank == 0)
        for (auto& r : rejected) notes.push_back(std::move(r));
      git++;
      eloss.add(iteration_loss, T);
    }

    Tensor full = assemble_full();
    auto snaps = collect_opt_snapshots(g, rank, obj_opt->snapshot());
    if (rank == 0) {
      double el = eloss.mean();
      std::lock_guard<std::mutex> lk(shared.mu);
      if (!diverged) shared.report.epoch_losses.push_back(el);
      for (auto& r : iter_rows) shared.report.iteration_log.push_back(std::move(r));
      iter_rows.clear();
      shared.report.iterations = git;
      shared.report.last =
          build_checkpoint(full, diverged ? epoch : epoch + 1, git, *reg, std::move(snaps));
      if (hook) hook(shared.report.last, el, diverged);
      if (diverged) {
        shared.report.diverged = true;
        shared.report.notes.push_back(divergence_note);
      }
      shared.report.object = full;
      for (auto& n : notes) shared.report.notes.push_back(std::move(n));
      notes.clear();
    }
  }
  if (start_epoch >= opt.epochs) {
    Tensor full = assemble_full();
    if (rank == 0) {
      std::lock_guard<std::mutex> lk(shared.mu);
      shared.report.object = full;
      shared.report.iterations = git;
      shared.report.last = build_checkpoint(
          full, start_epoch, git, *reg,
          std::vector<std::map<std::string, Tensor>>((size_t)opt.n_ranks, obj_opt->snapshot()));
    }
  }
}

}  // namespace

RunReport run_reconstruction(const Problem& p, const Tensor& object0,
                             const RegistryFactory& make_registry, const RuntimeOptions& opt,
                             const EpochHook& hook, const Checkpoint* resume) {
  validate_problem(p, object0, opt, resume);
  auto plan = make_schedule(p.measured.dim(0), p.measured.dim(1), opt.batch_size, opt.n_ranks);
  WorkerGroup g(opt.n_ranks);
  SharedReport shared;
  if (opt.mode == RunMode::Dp) {
    g.run([&](int rank) {
      run_dp_rank(rank, p, object0, make_registry, opt, hook, resume, plan, g, shared);
    });
  } else {
    std::shared_ptr<ObjectStore> store;
    if (opt.mode == RunMode::H5) store = ObjectStore::create(opt.store_path, object0.shape());
    g.run([&](int rank) {
      run_slab_rank(rank, p, object0, make_registry, opt, hook, resume, plan, g, store, shared);
    });
  }
  return std::move(shared.report);
}

}  // namespace xrec
