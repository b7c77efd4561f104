#pragma once

// Dataset container and full-field tiling.
//
// A dataset is a 4D intensity stack [num_angles, num_tiles, det_y, det_x]
// plus the beam/geometry metadata needed to reconstruct from it. Two on-disk
// containers are supported, chosen by file extension:
//   *.h5, *.hdf5 - HDF5; intensities live under "exchange/data", metadata
//                  under "meta/*" (energy_ev, pixel_size, distances,
//                  probe_positions)
//   anything else - a header-less row-major float64 stream with the same 4D
//                   ordering, described by a "<path>.meta" text sidecar
// Both containers round-trip bit-exactly.

#include <string>
#include <vector>

#include "xrec/models.hpp"

namespace xrec {

// Ceil-rule tiling of an [image_y, image_x] field into an ny-by-nx grid:
// tiles are tile_y-by-tile_x with tile = ceil(L / N), and tiles in the last
// row/column are clipped to the image edge, so they can be smaller.
struct TileGrid {
  int64_t image_y = 0, image_x = 0;
  int64_t ny = 0, nx = 0;
  int64_t tile_y = 0, tile_x = 0;

  int64_t count() const { return ny * nx; }
  TileSpec spec(int64_t iy, int64_t ix) const;
  std::vector<TileSpec> specs() const;  // row-major
};

TileGrid tile_grid(int64_t image_y, int64_t image_x, int64_t ny, int64_t nx);

// Cut a rank-2 image into grid-order tiles / put tiles back. The round trip
// reproduces the image bit for bit.
std::vector<Tensor> tile_image(const Tensor& image, const TileGrid& grid);
Tensor assemble_tiles(const std::vector<Tensor>& tiles, const TileGrid& grid);

struct DatasetMeta {
  double energy_ev = 0.0;
  double pixel_size = 0.0;        // m
  std::vector<double> distances;  // m, one per hologram plane (may be empty)
  Tensor probe_positions;         // [n_tiles, 2] scan origins in pixels, or empty
};

struct DatasetFile {
  Tensor data;  // [num_angles, num_tiles, det_y, det_x], intensities >= 0
  DatasetMeta meta;
};

void write_dataset(const std::string& path, const DatasetFile& d);
DatasetFile read_dataset(const std::string& path);

}  // namespace xrec
