#include "xrec/models.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace xrec {

namespace {

void check_cfg(const ModelConfig& cfg) {
  if (!(cfg.wavelength > 0.0)) throw Error("model config: wavelength must be positive");
  if (!(cfg.pixel_size > 0.0)) throw Error("model config: pixel size must be positive");
  if (cfg.slice_binning < 1) throw Error("model config: slice_binning must be >= 1");
  if (cfg.kappa_mode && cfg.representation != Representation::DeltaBeta)
    throw Error("model config: homogeneous-object constraint requires the delta/beta representation");
}

void check_object(const Var& packed) {
  if (packed.shape().size() != 4)
    throw Error("object tensor must be 4D [Ly, Lx, Lz, channels]");
}

void check_probe(const Var& probe) {
  const Shape& s = probe.shape();
  if (s.size() != 4 || s[1] != 2)
    throw Error("probe tensor must be [n_modes, 2, py, px]");
}

Var channel(Tape& t, Var packed, int64_t c) {
  const Shape& s = packed.shape();
  Var v = t.slice(packed, {0, 0, 0, c}, {s[0], s[1], s[2], 1});
  return t.reshape(v, {s[0], s[1], s[2]});
}

Var plane(Tape& t, Var vol3, int64_t z) {
  const Shape& s = vol3.shape();
  Var v = t.slice(vol3, {0, 0, z}, {s[0], s[1], 1});
  return t.reshape(v, {s[0], s[1]});
}

CVar probe_mode(Tape& t, Var probe, int64_t m) {
  const Shape& s = probe.shape();
  Var re = t.reshape(t.slice(probe, {m, 0, 0, 0}, {1, 1, s[2], s[3]}), {s[2], s[3]});
  Var im = t.reshape(t.slice(probe, {m, 1, 0, 0}, {1, 1, s[2], s[3]}), {s[2], s[3]});
  return cvar(re, im);
}

// probe shifted by the tile's sub-pixel offset plus its position correction
CVar place_probe(Tape& t, const CVar& mode, const TileSpec& tile,
                 const std::optional<Var>& correction) {
  bool has_corr = correction.has_value() && tile.pos_index >= 0;
  if (has_corr) {
    const Shape& cs = correction->shape();
    if (cs.size() != 2 || cs[1] != 2)
      throw Error("position correction must be [n_pos, 2]");
    if (tile.pos_index >= cs[0])
      throw Error("tile position index " + std::to_string(tile.pos_index) +
                  " outside correction table of " + std::to_string(cs[0]));
  }
  if (!has_corr && tile.frac_y == 0.0 && tile.frac_x == 0.0) return mode;
  Var shift = t.constant(Tensor({2}, {tile.frac_y, tile.frac_x}));
  if (has_corr) {
    Var row = t.reshape(t.slice(*correction, {tile.pos_index, 0}, {1, 2}), {2});
    shift = t.add(shift, row);
  }
  return fourier_shift(t, mode, shift);
}

void check_footprint(const char* model, int64_t k, const TileSpec& tile, const Shape& obj) {
  if (tile.ny <= 0 || tile.nx <= 0 || tile.oy < 0 || tile.ox < 0 ||
      tile.oy + tile.ny > obj[0] || tile.ox + tile.nx > obj[1]) {
    std::ostringstream msg;
    msg << model << " tile " << k << ": footprint y[" << tile.oy << "," << tile.oy + tile.ny
        << ") x[" << tile.ox << "," << tile.ox + tile.nx << ") outside object " << obj[0] << "x"
        << obj[1];
    throw Error(msg.str());
  }
}

ObjectVar chunk_of(Tape& t, const ObjectVar& o, const TileSpec& tile) {
  const Shape& s = o.a.shape();
  return {t.slice(o.a, {tile.oy, tile.ox, 0}, {tile.ny, tile.nx, s[2]}),
          t.slice(o.b, {tile.oy, tile.ox, 0}, {tile.ny, tile.nx, s[2]})};
}

// modulation + propagation through the whole stack, honoring projection/binning
CVar exit_field(Tape& t, CVar psi, const ObjectVar& o, const ModelConfig& cfg) {
  const PropSpec spec = cfg.prop();
  const double dz = cfg.dz();
  if (cfg.pure_projection)
    return project_modulate(t, psi, object_slices(t, o, cfg.representation, 1),
                            cfg.representation, t.constant(dz), spec);
  std::vector<ObjectSlice> slices = object_slices(t, o, cfg.representation, cfg.slice_binning);
  if (cfg.slice_binning == 1)
    return multislice_propagate(t, psi, slices, cfg.representation, dz, spec);
  // merged slices still modulate with the voxel depth (their values are bin
  // sums); only the propagation gap grows to the bin depth
  const double gap = dz * (double)cfg.slice_binning;
  for (const ObjectSlice& s : slices) {
    psi = modulate(t, psi, s, cfg.representation, dz, spec);
    psi = fresnel_propagate(t, psi, gap, spec);
  }
  return psi;
}

Var intensity2(Tape& t, const CVar& f) { return t.add(t.mul(f.re, f.re), t.mul(f.im, f.im)); }

}  // namespace

PropSpec ModelConfig::prop() const {
  PropSpec s;
  s.wavelength = wavelength;
  s.pitch = pixel_size;
  s.kernel = kernel;
  s.sign = sign;
  return s;
}

double ModelConfig::dz() const { return slice_spacing > 0.0 ? slice_spacing : pixel_size; }

ModelKind parse_model_name(const std::string& name) {
  static const std::map<std::string, ModelKind> table = {
      {"ptychography", ModelKind::Ptychography},
      {"mdh", ModelKind::Mdh},
      {"sparse_multislice", ModelKind::SparseMultislice},
      {"tomography", ModelKind::Tomography},
  };
  auto it = table.find(name);
  if (it == table.end()) {
    std::string all;
    for (const std::string& n : model_names()) all += (all.empty() ? "" : ", ") + n;
    throw Error("unknown model '" + name + "' (expected one of: " + all + ")");
  }
  return it->second;
}

const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names = {"ptychography", "mdh", "sparse_multislice",
                                                 "tomography"};
  return names;
}

ObjectVar split_object(Tape& t, Var packed, const ModelConfig& cfg,
                       std::optional<Var> kappa_log) {
  check_cfg(cfg);
  check_object(packed);
  const Shape& s = packed.shape();
  if (cfg.kappa_mode) {
    if (s[3] != 1)
      throw Error("homogeneous-object mode stores a single beta channel; got " +
                  std::to_string(s[3]));
    if (!kappa_log) throw Error("homogeneous-object mode needs the kappa_log leaf");
    if (kappa_log->size() != 1) throw Error("kappa_log must hold a single value");
    kappa_log->val().require_finite("kappa_log");
    Var beta = channel(t, packed, 0);
    // delta = beta / kappa with kappa = exp(kappa_log) > 0 by construction
    Var inv_kappa = t.exp(t.neg(*kappa_log));
    return {t.mul(beta, inv_kappa), beta};
  }
  if (s[3] != 2) throw Error("object must carry 2 channels; got " + std::to_string(s[3]));
  return {channel(t, packed, 0), channel(t, packed, 1)};
}

ObjectVar rotate_object(Tape& t, const ObjectVar& o, Var theta, const ModelConfig& cfg) {
  return {rotate_volume(t, o.a, theta, 0, vacuum_fill(cfg.representation, 0)),
          rotate_volume(t, o.b, theta, 0, vacuum_fill(cfg.representation, 1))};
}

std::vector<ObjectSlice> object_slices(Tape& t, const ObjectVar& o, Representation rep,
                                       int64_t binning) {
  const Shape& s = o.a.shape();
  if (s.size() != 3) throw Error("object channels must be rank-3 [ly, lx, lz]");
  const int64_t lz = s[2];
  if (binning < 1) throw Error("slice binning must be >= 1");
  if (lz % binning != 0)
    throw Error("slice binning " + std::to_string(binning) + " does not divide depth " +
                std::to_string(lz));
  std::vector<ObjectSlice> out;
  out.reserve(lz / binning);
  for (int64_t j = 0; j < lz; j += binning) {
    if (binning == 1 || rep == Representation::DeltaBeta) {
      Var a = plane(t, o.a, j);
      Var b = plane(t, o.b, j);
      for (int64_t k = 1; k < binning; k++) {
        a = t.add(a, plane(t, o.a, j + k));
        b = t.add(b, plane(t, o.b, j + k));
      }
      out.push_back({a, b});
    } else {
      // complex modulations compose by multiplication
      CVar m = cvar(plane(t, o.a, j), plane(t, o.b, j));
      for (int64_t k = 1; k < binning; k++)
        m = cmul(m, cvar(plane(t, o.a, j + k), plane(t, o.b, j + k)));
      out.push_back({m.re, m.im});
    }
  }
  return out;
}

CVar ptycho_predict(Tape& t, Var object, Var probe, const TileBatch& batch,
                    std::optional<Var> pos_correction, const ModelConfig& cfg,
                    std::optional<Var> theta) {
  check_cfg(cfg);
  check_object(object);
  check_probe(probe);
  if (batch.tiles.empty()) throw Error("ptychography: empty tile batch");
  const Shape& ps = probe.shape();
  const int64_t n_modes = ps[0];
  ObjectVar obj = split_object(t, object, cfg);
  if (theta) obj = rotate_object(t, obj, *theta, cfg);
  const PropSpec spec = cfg.prop();

  std::vector<Var> tile_re, tile_im;
  for (size_t k = 0; k < batch.tiles.size(); k++) {
    const TileSpec& tile = batch.tiles[k];
    check_footprint("ptychography", (int64_t)k, tile, object.shape());
    if (tile.ny != ps[2] || tile.nx != ps[3])
      throw Error("ptychography tile " + std::to_string(k) + ": chunk extent " +
                  std::to_string(tile.ny) + "x" + std::to_string(tile.nx) +
                  " must equal the probe shape");
    ObjectVar chunk = chunk_of(t, obj, tile);
    std::vector<Var> mode_re, mode_im;
    for (int64_t m = 0; m < n_modes; m++) {
      CVar psi = place_probe(t, probe_mode(t, probe, m), tile, pos_correction);
      psi = exit_field(t, psi, chunk, cfg);
      psi = fraunhofer_propagate(t, psi, spec);
      mode_re.push_back(t.reshape(psi.re, {1, 1, tile.ny, tile.nx}));
      mode_im.push_back(t.reshape(psi.im, {1, 1, tile.ny, tile.nx}));
    }
    tile_re.push_back(n_modes == 1 ? mode_re[0] : t.concat(mode_re, 1));
    tile_im.push_back(n_modes == 1 ? mode_im[0] : t.concat(mode_im, 1));
  }
  return cvar(tile_re.size() == 1 ? tile_re[0] : t.concat(tile_re, 0),
              tile_im.size() == 1 ? tile_im[0] : t.concat(tile_im, 0));
}

Var mdh_predict(Tape& t, Var object, Var distances, std::optional<Var> affine7,
                const ModelConfig& cfg, std::optional<Var> kappa_log,
                std::optional<CVar> incident) {
  check_cfg(cfg);
  check_object(object);
  if (distances.shape().size() != 1 || distances.size() < 1)
    throw Error("holography: distances must be a non-empty vector");
  const int64_t n_dist = distances.size();
  if (affine7) {
    const Shape& as = affine7->shape();
    if (as.size() != 2 || as[0] != n_dist || as[1] != 7)
      throw Error("holography: affine parameters must be [n_dist, 7]");
  }
  ObjectVar obj = split_object(t, object, cfg, kappa_log);
  const Shape& os = object.shape();
  CVar psi = incident ? *incident
                      : cvar(t.constant(Tensor({os[0], os[1]}, 1.0)),
                             t.constant(Tensor({os[0], os[1]})));
  if (psi.re.shape() != Shape{os[0], os[1]})
    throw Error("holography: incident wave shape must match the object plane");
  const PropSpec spec = cfg.prop();
  CVar exit = exit_field(t, psi, obj, cfg);

  std::vector<Var> holos;
  for (int64_t i = 0; i < n_dist; i++) {
    Var zi = t.slice(distances, {i}, {1});
    CVar f = fresnel_propagate(t, exit, zi, spec);
    Var inten = intensity2(t, f);
    if (affine7) {
      Var row = t.reshape(t.slice(*affine7, {i, 0}, {1, 7}), {7});
      // warp the prediction into the distorted detector frame; vacuum
      // background intensity 1 fills uncovered edges
      inten = apply_affine(t, inten, affine_matrix_vars(t, row), 1.0);
    }
    holos.push_back(t.reshape(inten, {1, os[0], os[1]}));
  }
  return holos.size() == 1 ? holos[0] : t.concat(holos, 0);
}

CVar sparse_ms_predict(Tape& t, Var object, Var probe, const TileBatch& batch,
                       std::optional<Var> pos_correction, Var slice_positions,
                       const ModelConfig& cfg) {
  check_cfg(cfg);
  check_object(object);
  check_probe(probe);
  if (batch.tiles.empty()) throw Error("sparse multislice: empty tile batch");
  const Shape& os = object.shape();
  if (os[2] < 2) throw Error("sparse multislice needs at least 2 slices");
  if (slice_positions.shape().size() != 1 || slice_positions.size() != os[2])
    throw Error("sparse multislice: slice_positions must be [n_slices]");
  const Shape& ps = probe.shape();
  const int64_t n_modes = ps[0];
  ObjectVar obj = split_object(t, object, cfg);
  const PropSpec spec = cfg.prop();

  std::vector<Var> tile_re, tile_im;
  for (size_t k = 0; k < batch.tiles.size(); k++) {
    const TileSpec& tile = batch.tiles[k];
    check_footprint("sparse multislice", (int64_t)k, tile, os);
    if (tile.ny != ps[2] || tile.nx != ps[3])
      throw Error("sparse multislice tile " + std::to_string(k) +
                  ": chunk extent must equal the probe shape");
    ObjectVar chunk = chunk_of(t, obj, tile);
    std::vector<ObjectSlice> slices = object_slices(t, chunk, cfg.representation, 1);
    std::vector<Var> mode_re, mode_im;
    for (int64_t m = 0; m < n_modes; m++) {
      CVar psi = place_probe(t, probe_mode(t, probe, m), tile, pos_correction);
      psi = multislice_sparse(t, psi, slices, cfg.representation, slice_positions, spec,
                              cfg.dz(), 0.0);
      psi = fraunhofer_propagate(t, psi, spec);
      mode_re.push_back(t.reshape(psi.re, {1, 1, tile.ny, tile.nx}));
      mode_im.push_back(t.reshape(psi.im, {1, 1, tile.ny, tile.nx}));
    }
    tile_re.push_back(n_modes == 1 ? mode_re[0] : t.concat(mode_re, 1));
    tile_im.push_back(n_modes == 1 ? mode_im[0] : t.concat(mode_im, 1));
  }
  return cvar(tile_re.size() == 1 ? tile_re[0] : t.concat(tile_re, 0),
              tile_im.size() == 1 ? tile_im[0] : t.concat(tile_im, 0));
}

Var tomo_predict(Tape& t, Var object, Var theta, const TileBatch& batch,
                 const ModelConfig& cfg) {
  check_cfg(cfg);
  check_object(object);
  if (!cfg.pure_projection) throw Error("tomography runs in pure-projection mode");
  if (batch.tiles.empty()) throw Error("tomography: empty tile batch");
  ObjectVar obj = rotate_object(t, split_object(t, object, cfg), theta, cfg);
  const Shape& os = object.shape();
  CVar unit = cvar(t.constant(Tensor({os[0], os[1]}, 1.0)), t.constant(Tensor({os[0], os[1]})));
  CVar exit = project_modulate(t, unit, object_slices(t, obj, cfg.representation, 1),
                               cfg.representation, t.constant(cfg.dz()), cfg.prop());
  Var full = intensity2(t, exit);

  std::vector<Var> tiles;
  const TileSpec& first = batch.tiles.front();
  for (size_t k = 0; k < batch.tiles.size(); k++) {
    const TileSpec& tile = batch.tiles[k];
    check_footprint("tomography", (int64_t)k, tile, os);
    if (tile.ny != first.ny || tile.nx != first.nx)
      throw Error("tomography: tiles in one batch must share a shape; split ragged tiles "
                  "across batches");
    Var crop = t.slice(full, {tile.oy, tile.ox}, {tile.ny, tile.nx});
    tiles.push_back(t.reshape(crop, {1, tile.ny, tile.nx}));
  }
  return tiles.size() == 1 ? tiles[0] : t.concat(tiles, 0);
}

Var multimode_intensity(Tape& t, const CVar& fields) {
  if (fields.re.shape().size() != 4)
    throw Error("mode fields must be [n_tiles, n_modes, y, x]");
  Var inten = t.add(t.mul(fields.re, fields.re), t.mul(fields.im, fields.im));
  return t.sum(inten, 1);
}

Var loss_lsq(Tape& t, Var ipred, const Tensor& imeas) {
  if (ipred.shape() != imeas.shape()) throw Error("loss: prediction/measurement shape mismatch");
  imeas.require_finite("measured intensity");
  if (imeas.min() < 0.0) throw Error("loss: negative measured intensity");
  Tensor smeas(imeas.shape());
  for (int64_t i = 0; i < imeas.size(); i++) smeas[i] = std::sqrt(imeas[i] + kLossEps);
  Var d = t.sub(t.sqrt(ipred + kLossEps), t.constant(smeas));
  return t.mean(t.mul(d, d));
}

Var loss_poisson(Tape& t, Var ipred, const Tensor& imeas) {
  if (ipred.shape() != imeas.shape()) throw Error("loss: prediction/measurement shape mismatch");
  imeas.require_finite("measured intensity");
  if (ipred.val().min() <= -kLossEps)
    throw Error("loss: predicted intensity fell below -epsilon");
  Var logp = t.log(ipred + kLossEps);
  return t.mean(t.sub(ipred, t.mul(t.constant(imeas), logp)));
}

Var assemble_loss(Tape& t, Var mismatch, const std::vector<std::pair<double, Var>>& regs) {
  Var out = mismatch;
  for (const auto& [alpha, reg] : regs) {
    if (alpha < 0.0) throw Error("regularizer weight must be non-negative");
    if (alpha == 0.0) continue;
    out = t.add(out, reg * alpha);
  }
  return out;
}

}  // namespace xrec
