#include "xrec/dataset.hpp"

#include <hdf5.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace xrec {

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

bool has_suffix(const std::string& s, const char* suf) {
  const size_t n = std::strlen(suf);
  return s.size() >= n && s.compare(s.size() - n, n, suf) == 0;
}

bool is_hdf5_path(const std::string& path) {
  return has_suffix(path, ".h5") || has_suffix(path, ".hdf5");
}

}  // namespace

TileGrid tile_grid(int64_t image_y, int64_t image_x, int64_t ny, int64_t nx) {
  if (image_y < 1 || image_x < 1) throw Error("tile_grid: empty image");
  if (ny < 1 || nx < 1) throw Error("tile_grid: grid counts must be >= 1");
  if (ny > image_y || nx > image_x)
    throw Error("tile_grid: " + std::to_string(ny) + "x" + std::to_string(nx) +
                " grid exceeds the " + std::to_string(image_y) + "x" +
                std::to_string(image_x) + " image");
  TileGrid g;
  g.image_y = image_y;
  g.image_x = image_x;
  g.ny = ny;
  g.nx = nx;
  g.tile_y = ceil_div(image_y, ny);
  g.tile_x = ceil_div(image_x, nx);
  return g;
}

TileSpec TileGrid::spec(int64_t iy, int64_t ix) const {
  if (iy < 0 || iy >= ny || ix < 0 || ix >= nx) throw Error("TileGrid: tile index out of range");
  TileSpec s;
  s.oy = iy * tile_y;
  s.ox = ix * tile_x;
  s.ny = std::min(tile_y, image_y - s.oy);
  s.nx = std::min(tile_x, image_x - s.ox);
  return s;
}

std::vector<TileSpec> TileGrid::specs() const {
  std::vector<TileSpec> out;
  out.reserve((size_t)count());
  for (int64_t iy = 0; iy < ny; iy++)
    for (int64_t ix = 0; ix < nx; ix++) out.push_back(spec(iy, ix));
  return out;
}

std::vector<Tensor> tile_image(const Tensor& image, const TileGrid& grid) {
  if (image.rank() != 2 || image.dim(0) != grid.image_y || image.dim(1) != grid.image_x)
    throw Error("tile_image: image does not match the grid (" + shape_str(image.shape()) + ")");
  std::vector<Tensor> out;
  out.reserve((size_t)grid.count());
  for (const TileSpec& s : grid.specs()) {
    Tensor t({s.ny, s.nx});
    for (int64_t y = 0; y < s.ny; y++)
      std::memcpy(t.data() + y * s.nx, image.data() + (s.oy + y) * grid.image_x + s.ox,
                  (size_t)s.nx * sizeof(double));
    out.push_back(std::move(t));
  }
  return out;
}

Tensor assemble_tiles(const std::vector<Tensor>& tiles, const TileGrid& grid) {
  if ((int64_t)tiles.size() != grid.count())
    throw Error("assemble_tiles: expected " + std::to_string(grid.count()) + " tiles, got " +
                std::to_string(tiles.size()));
  Tensor image({grid.image_y, grid.image_x});
  const auto specs = grid.specs();
  for (size_t i = 0; i < specs.size(); i++) {
    const TileSpec& s = specs[i];
    if (tiles[i].rank() != 2 || tiles[i].dim(0) != s.ny || tiles[i].dim(1) != s.nx)
      throw Error("assemble_tiles: tile " + std::to_string(i) + " is " + shape_str(tiles[i].shape()) +
                  ", grid expects [" + std::to_string(s.ny) + "," + std::to_string(s.nx) + "]");
    for (int64_t y = 0; y < s.ny; y++)
      std::memcpy(image.data() + (s.oy + y) * grid.image_x + s.ox, tiles[i].data() + y * s.nx,
                  (size_t)s.nx * sizeof(double));
  }
  return image;
}

// ------------------------------------------------------------------ HDF5 side

namespace {

// every handle funnels through this so a failed open/create can't leak
struct H5Handle {
  hid_t id = -1;
  herr_t (*close)(hid_t) = nullptr;
  H5Handle(hid_t i, herr_t (*c)(hid_t)) : id(i), close(c) {}
  ~H5Handle() {
    if (id >= 0 && close) close(id);
  }
  H5Handle(const H5Handle&) = delete;
  H5Handle& operator=(const H5Handle&) = delete;
};

void quiet_hdf5() {
  // report failures through our own errors, not the library's stderr stack
  static bool done = false;
  if (!done) {
    H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
    done = true;
  }
}

void write_h5_array(hid_t file, const char* name, const double* v,
                    const std::vector<hsize_t>& dims) {
  H5Handle space(dims.empty() ? H5Screate(H5S_SCALAR)
                              : H5Screate_simple((int)dims.size(), dims.data(), nullptr),
                 H5Sclose);
  if (space.id < 0) throw Error("hdf5: could not create dataspace for " + std::string(name));
  H5Handle dset(H5Dcreate2(file, name, H5T_IEEE_F64LE, space.id, H5P_DEFAULT, H5P_DEFAULT,
                           H5P_DEFAULT),
                H5Dclose);
  if (dset.id < 0) throw Error("hdf5: could not create dataset " + std::string(name));
  if (H5Dwrite(dset.id, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, v) < 0)
    throw Error("hdf5: write failed for " + std::string(name));
}

bool read_h5_array(hid_t file, const char* name, std::vector<double>& v,
                   std::vector<hsize_t>& dims) {
  if (H5Lexists(file, name, H5P_DEFAULT) <= 0) return false;
  H5Handle dset(H5Dopen2(file, name, H5P_DEFAULT), H5Dclose);
  if (dset.id < 0) throw Error("hdf5: could not open dataset " + std::string(name));
  H5Handle space(H5Dget_space(dset.id), H5Sclose);
  const int rank = H5Sget_simple_extent_ndims(space.id);
  if (rank < 0) throw Error("hdf5: bad dataspace for " + std::string(name));
  dims.assign((size_t)rank, 0);
  if (rank > 0) H5Sget_simple_extent_dims(space.id, dims.data(), nullptr);
  hsize_t n = 1;
  for (hsize_t d : dims) n *= d;
  v.assign((size_t)n, 0.0);
  if (H5Dread(dset.id, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, v.data()) < 0)
    throw Error("hdf5: read failed for " + std::string(name));
  return true;
}

void write_hdf5(const std::string& path, const DatasetFile& d) {
  quiet_hdf5();
  H5Handle file(H5Fcreate(path.c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT), H5Fclose);
  if (file.id < 0) throw Error("hdf5: could not create " + path);
  {
    H5Handle g(H5Gcreate2(file.id, "exchange", H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT), H5Gclose);
    if (g.id < 0) throw Error("hdf5: could not create group exchange");
  }
  {
    H5Handle g(H5Gcreate2(file.id, "meta", H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT), H5Gclose);
    if (g.id < 0) throw Error("hdf5: could not create group meta");
  }
  const Shape& s = d.data.shape();
  write_h5_array(file.id, "exchange/data", d.data.data(),
                 {(hsize_t)s[0], (hsize_t)s[1], (hsize_t)s[2], (hsize_t)s[3]});
  write_h5_array(file.id, "meta/energy_ev", &d.meta.energy_ev, {});
  write_h5_array(file.id, "meta/pixel_size", &d.meta.pixel_size, {});
  if (!d.meta.distances.empty())
    write_h5_array(file.id, "meta/distances", d.meta.distances.data(),
                   {(hsize_t)d.meta.distances.size()});
  if (d.meta.probe_positions.size() > 0)
    write_h5_array(file.id, "meta/probe_positions", d.meta.probe_positions.data(),
                   {(hsize_t)d.meta.probe_positions.dim(0),
                    (hsize_t)d.meta.probe_positions.dim(1)});
}

DatasetFile read_hdf5(const std::string& path) {
  quiet_hdf5();
  H5Handle file(H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  if (file.id < 0) throw Error("hdf5: could not open " + path);
  DatasetFile d;
  std::vector<double> v;
  std::vector<hsize_t> dims;
  if (!read_h5_array(file.id, "exchange/data", v, dims))
    throw Error("hdf5: " + path + " has no exchange/data");
  if (dims.size() != 4)
    throw Error("hdf5: exchange/data must be 4-dimensional, got rank " +
                std::to_string(dims.size()));
  d.data = Tensor({(int64_t)dims[0], (int64_t)dims[1], (int64_t)dims[2], (int64_t)dims[3]},
                  std::move(v));
  if (read_h5_array(file.id, "meta/energy_ev", v, dims)) d.meta.energy_ev = v.at(0);
  if (read_h5_array(file.id, "meta/pixel_size", v, dims)) d.meta.pixel_size = v.at(0);
  if (read_h5_array(file.id, "meta/distances", v, dims)) d.meta.distances = v;
  if (read_h5_array(file.id, "meta/probe_positions", v, dims)) {
    if (dims.size() != 2) throw Error("hdf5: probe_positions must be 2-dimensional");
    d.meta.probe_positions =
        Tensor({(int64_t)dims[0], (int64_t)dims[1]}, std::move(v));
  }
  return d;
}

// ------------------------------------------------------------------- raw side

// doubles in the sidecar are printed with max_digits10 so they parse back to
// the same bits
void write_raw(const std::string& path, const DatasetFile& d) {
  std::ofstream bin(path, std::ios::binary | std::ios::trunc);
  if (!bin) throw Error("could not create " + path);
  bin.write((const char*)d.data.data(), (std::streamsize)d.data.size() * 8);
  if (!bin) throw Error("short write to " + path);
  bin.close();

  std::ostringstream meta;
  meta.precision(17);
  const Shape& s = d.data.shape();
  meta << "# raw float64 stream, row-major [num_angles, num_tiles, det_y, det_x]\n";
  meta << "shape = " << s[0] << " " << s[1] << " " << s[2] << " " << s[3] << "\n";
  meta << "energy_ev = " << d.meta.energy_ev << "\n";
  meta << "pixel_size = " << d.meta.pixel_size << "\n";
  meta << "distances =";
  for (double z : d.meta.distances) meta << " " << z;
  meta << "\n";
  if (d.meta.probe_positions.size() > 0) {
    const Tensor& p = d.meta.probe_positions;
    meta << "probe_positions = " << p.dim(0) << "\n";
    for (int64_t i = 0; i < p.dim(0); i++)
      meta << p.at2(i, 0) << " " << p.at2(i, 1) << "\n";
  }
  std::ofstream side(path + ".meta", std::ios::trunc);
  if (!side) throw Error("could not create " + path + ".meta");
  side << meta.str();
  if (!side) throw Error("short write to " + path + ".meta");
}

DatasetFile read_raw(const std::string& path) {
  std::ifstream side(path + ".meta");
  if (!side) throw Error("could not open " + path + ".meta");
  DatasetFile d;
  Shape shape;
  std::string line;
  while (std::getline(side, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, eq;
    ls >> key >> eq;
    if (eq != "=") throw Error(path + ".meta: malformed line '" + line + "'");
    if (key == "shape") {
      int64_t v;
      while (ls >> v) shape.push_back(v);
      if (shape.size() != 4) throw Error(path + ".meta: shape must have 4 entries");
    } else if (key == "energy_ev") {
      ls >> d.meta.energy_ev;
    } else if (key == "pixel_size") {
      ls >> d.meta.pixel_size;
    } else if (key == "distances") {
      double z;
      while (ls >> z) d.meta.distances.push_back(z);
    } else if (key == "probe_positions") {
      int64_t n = 0;
      ls >> n;
      Tensor p({n, 2});
      for (int64_t i = 0; i < n; i++) {
        if (!(side >> p.at2(i, 0) >> p.at2(i, 1)))
          throw Error(path + ".meta: truncated probe_positions block");
      }
      d.meta.probe_positions = std::move(p);
    } else {
      throw Error(path + ".meta: unknown key '" + key + "'");
    }
  }
  if (shape.empty()) throw Error(path + ".meta: missing shape");

  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw Error("could not open " + path);
  Tensor data(shape);
  bin.read((char*)data.data(), (std::streamsize)data.size() * 8);
  if (bin.gcount() != (std::streamsize)data.size() * 8)
    throw Error(path + " is shorter than its sidecar shape implies");
  d.data = std::move(data);
  return d;
}

}  // namespace

void write_dataset(const std::string& path, const DatasetFile& d) {
  if (d.data.rank() != 4)
    throw Error("dataset data must be [num_angles, num_tiles, det_y, det_x], got " +
                shape_str(d.data.shape()));
  for (int64_t i = 0; i < d.data.size(); i++)
    if (!(d.data[i] >= 0.0))
      throw Error("dataset intensities must be finite and >= 0");
  if (d.meta.probe_positions.size() > 0 &&
      (d.meta.probe_positions.rank() != 2 || d.meta.probe_positions.dim(1) != 2))
    throw Error("probe_positions must be [n_tiles, 2]");
  if (is_hdf5_path(path))
    write_hdf5(path, d);
  else
    write_raw(path, d);
}

DatasetFile read_dataset(const std::string& path) {
  DatasetFile d = is_hdf5_path(path) ? read_hdf5(path) : read_raw(path);
  if (d.data.rank() != 4) throw Error(path + ": dataset is not 4-dimensional");
  return d;
}

}  // namespace xrec
