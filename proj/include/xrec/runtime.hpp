#pragma once

// Minibatch/epoch scheduler and the three execution modes:
//   dp — every rank keeps a full object copy; gradients are all-reduced.
//   do — the object is severed into contiguous y-slabs, one per rank; each
//        tile's forward pass runs on a chunk assembled over AlltoAll, and the
//        chunk gradient is scattered back additively.
//   h5 — same algebra as do, but object/rotated/gradient arrays live in one
//        chunked backing file and chunks are read/accumulated through it.
//
// Workers are in-process threads; the collectives are blocking rendezvous
// with a fixed (ascending-rank) reduction order, so a fixed schedule gives
// bit-identical results run to run. Rotation to a viewing angle happens once
// per angle outside the tape, and gradients are rotated back — identically in
// every mode, which is what makes the modes numerically interchangeable.

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "xrec/models.hpp"
#include "xrec/params.hpp"

namespace xrec {

enum class LossKind { Lsq, Poisson };
LossKind parse_loss_name(const std::string& name);

struct RegSpec {
  std::string kind;        // "l1" | "tv"
  double a1 = 0, a2 = 0;   // l1 channel weights
  double gamma = 0;        // tv weight
};

// One reconstruction problem. `fixed` carries model inputs that are not being
// refined (a frozen probe, known distances, ...); refinable leaves live in the
// per-rank ParamRegistry instances produced by the RegistryFactory.
struct Problem {
  ModelKind kind = ModelKind::Tomography;
  ModelConfig cfg;
  Tensor measured;              // [n_angles, n_tiles, ty, tx]
  std::vector<double> angles;   // viewing angle (radians) per angle index
  std::vector<TileSpec> tiles;  // one scan layout shared by every angle
  LossKind loss = LossKind::Lsq;
  std::vector<RegSpec> regs;    // dp mode only
  std::map<std::string, Tensor> fixed;
};

// ---------------------------------------------------------------- collectives

class WorkerGroup {
 public:
  explicit WorkerGroup(int n_ranks);
  int n_ranks() const { return n_; }

  // Runs body(rank) on n_ranks threads and joins them. If any rank throws, the
  // group is aborted (blocked collectives wake up and throw) and the first
  // exception by rank order is rethrown here.
  void run(const std::function<void(int)>& body);

  // Collectives: every rank must call the same sequence.
  void barrier(int rank);
  Tensor allreduce_sum(int rank, const Tensor& local);   // ascending-rank sum
  Tensor broadcast(int rank, int root, const Tensor& value);
  // outgoing[d] is delivered to rank d; returns one tensor per source rank.
  std::vector<Tensor> alltoall(int rank, std::vector<Tensor> outgoing);

 private:
  std::vector<std::vector<Tensor>> round(int rank, std::vector<Tensor> payload,
                                         bool rank0_combines);

  int n_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool aborted_ = false;
  int arrived_ = 0;
  int leaving_ = 0;
  std::vector<std::vector<Tensor>> deposits_;
};

// ------------------------------------------------------------- decomposition

struct SlabPartition {
  int64_t total = 0;                                // object y extent
  std::vector<std::pair<int64_t, int64_t>> ranges;  // per-rank [y0, y1)
};

// Near-equal contiguous split; ranks beyond the extent hold empty slabs.
SlabPartition make_slab_partition(int64_t extent, int n_ranks);

struct ChunkRequest {
  int64_t y0 = 0, y1 = 0;  // y1 <= y0 marks "no chunk this round"
  int64_t x0 = 0, x1 = 0;
};

// Collective chunk assembly: every rank contributes the overlap of its
// (rotated) slab with each request and receives its own chunk, rows in
// ascending y. slab holds this rank's rows [ranges[rank]) of a [Ly,Lx,Lz,C]
// volume.
Tensor gather_chunk(WorkerGroup& g, int rank, const SlabPartition& part, const Tensor& slab,
                    const ChunkRequest& req);

// Collective adjoint of gather_chunk: splits chunk_grad by owner and adds each
// piece into that owner's grad_slab (ascending source rank, deterministic).
void scatter_gradient(WorkerGroup& g, int rank, const SlabPartition& part, Tensor& grad_slab,
                      const Tensor& chunk_grad, const ChunkRequest& req);

// ---------------------------------------------------------------- scheduling

struct Iteration {
  int64_t angle = 0;
  std::vector<std::vector<int64_t>> per_rank;  // tile ids per rank, this step
  int64_t tile_count = 0;                      // total across ranks
};

// Angle-major plan: one epoch touches every (angle, tile) pair exactly once,
// finishing an angle before starting the next.
std::vector<Iteration> make_schedule(int64_t n_angles, int64_t n_tiles, int64_t batch_size,
                                     int n_ranks);

// ------------------------------------------------------------------- running

struct Checkpoint {
  Tensor object;
  int64_t epochs_done = 0;
  int64_t iterations_done = 0;
  std::map<std::string, Tensor> params;                            // registry values
  std::map<std::string, std::map<std::string, Tensor>> param_opt;  // per-name optimizer state
  std::vector<std::map<std::string, Tensor>> object_opt;           // per-rank object optimizer
};

struct RuntimeOptions {
  RunMode mode = RunMode::Dp;
  int n_ranks = 1;
  int64_t batch_size = 1;
  int64_t epochs = 1;
  OptimizerKind object_opt = OptimizerKind::Gd;
  double object_step = 1e-3;
  int64_t gd_base_iters = 0;  // gd object optimizer halving schedule
  bool object_f32 = false;    // do mode: slabs round-trip through 32-bit storage
  std::string store_path;     // h5 mode: backing file (required)
};

struct RunReport {
  Tensor object;
  std::vector<double> epoch_losses;
  // one row per completed iteration: epoch, global iteration index, data
  // term, then one column per configured regularizer
  std::vector<std::vector<double>> iteration_log;
  std::vector<std::string> notes;  // rejected steps, divergence details
  bool diverged = false;
  int64_t iterations = 0;
  Checkpoint last;
};

using RegistryFactory = std::function<std::unique_ptr<ParamRegistry>(int rank)>;
// Called on rank 0 after every epoch (and once more on divergence, flagged).
using EpochHook = std::function<void(const Checkpoint&, double epoch_loss, bool diverged)>;

RunReport run_reconstruction(const Problem& p, const Tensor& object0,
                             const RegistryFactory& make_registry, const RuntimeOptions& opt,
                             const EpochHook& hook = {}, const Checkpoint* resume = nullptr);

// -------------------------------------------------------- h5 backing storage

// One binary file holding three equally shaped [Ly,Lx,Lz,C] arrays (object,
// rotated copy, gradient) with a small header. Row-level advisory locks guard
// read-modify-write accumulation; plain reads/writes address disjoint rows.
class ObjectStore {
 public:
  enum Array { kObject = 0, kRotated = 1, kGradient = 2 };

  static std::shared_ptr<ObjectStore> create(const std::string& path, const Shape& shape);
  static std::shared_ptr<ObjectStore> open(const std::string& path);
  ~ObjectStore();

  const Shape& object_shape() const { return shape_; }
  Tensor read_rows(Array a, int64_t y0, int64_t y1) const;            // [y1-y0, Lx, Lz, C]
  void write_rows(Array a, int64_t y0, int64_t y1, const Tensor& t);  // same shape
  void accumulate_gradient(int64_t y0, int64_t y1, const Tensor& t);  // locked +=
  void zero_rows(Array a, int64_t y0, int64_t y1);

 private:
  ObjectStore() = default;
  int64_t row_doubles() const;
  int64_t offset_of(Array a, int64_t y) const;

  int fd_ = -1;
  Shape shape_;
  mutable std::vector<std::unique_ptr<std::mutex>> row_locks_;
};

}  // namespace xrec
