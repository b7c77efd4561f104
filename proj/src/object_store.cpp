#include <fcntl.h>
#include <unistd.h>

#include "xrec/runtime.hpp"

namespace xrec {

namespace {
constexpr int64_t kStoreMagic = 0x524f545342A4F58;  // arbitrary fixed tag
constexpr int64_t kHeaderBytes = 8 * 6;             // magic, rank, dims[4]
}  // namespace

std::shared_ptr<ObjectStore> ObjectStore::create(const std::string& path, const Shape& shape) {
  if (shape.size() != 4) throw Error("object store: shape must be rank 4");
  auto s = std::shared_ptr<ObjectStore>(new ObjectStore());
  s->fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
  if (s->fd_ < 0) throw Error("object store: cannot create '" + path + "'");
  s->shape_ = shape;
  int64_t header[6] = {kStoreMagic, 4, shape[0], shape[1], shape[2], shape[3]};
  if (::pwrite(s->fd_, header, sizeof(header), 0) != (ssize_t)sizeof(header))
    throw Error("object store: header write failed");
  int64_t total = kHeaderBytes + 3 * shape_numel(shape) * 8;
  if (::ftruncate(s->fd_, (off_t)total) != 0)
    throw Error("object store: cannot size '" + path + "'");
  s->row_locks_.resize((size_t)shape[0]);
  for (auto& m : s->row_locks_) m = std::make_unique<std::mutex>();
  return s;
}

std::shared_ptr<ObjectStore> ObjectStore::open(const std::string& path) {
  auto s = std::shared_ptr<ObjectStore>(new ObjectStore());
  s->fd_ = ::open(path.c_str(), O_RDWR);
  if (s->fd_ < 0) throw Error("object store: cannot open '" + path + "'");
  int64_t header[6] = {0};
  if (::pread(s->fd_, header, sizeof(header), 0) != (ssize_t)sizeof(header))
    throw Error("object store: truncated header in '" + path + "'");
  if (header[0] != kStoreMagic || header[1] != 4)
    throw Error("object store: '" + path + "' is not an object store file");
  s->shape_ = {header[2], header[3], header[4], header[5]};
  s->row_locks_.resize((size_t)s->shape_[0]);
  for (auto& m : s->row_locks_) m = std::make_unique<std::mutex>();
  return s;
}

ObjectStore::~ObjectStore() {
  if (fd_ >= 0) ::close(fd_);
}

int64_t ObjectStore::row_doubles() const { return shape_[1] * shape_[2] * shape_[3]; }

int64_t ObjectStore::offset_of(Array a, int64_t y) const {
  return kHeaderBytes + ((int64_t)a * shape_[0] + y) * row_doubles() * 8;
}

Tensor ObjectStore::read_rows(Array a, int64_t y0, int64_t y1) const {
  if (y0 < 0 || y1 < y0 || y1 > shape_[0]) throw Error("object store: row range out of bounds");
  Tensor out({y1 - y0, shape_[1], shape_[2], shape_[3]});
  int64_t bytes = (y1 - y0) * row_doubles() * 8;
  if (bytes > 0 && ::pread(fd_, out.data(), (size_t)bytes, (off_t)offset_of(a, y0)) != bytes)
    throw Error("object store: short read");
  return out;
}

void ObjectStore::write_rows(Array a, int64_t y0, int64_t y1, const Tensor& t) {
  if (y0 < 0 || y1 < y0 || y1 > shape_[0]) throw Error("object store: row range out of bounds");
  if (t.shape() != Shape{y1 - y0, shape_[1], shape_[2], shape_[3]})
    throw Error("object store: row block has the wrong shape");
  int64_t bytes = (y1 - y0) * row_doubles() * 8;
  if (bytes > 0 && ::pwrite(fd_, t.data(), (size_t)bytes, (off_t)offset_of(a, y0)) != bytes)
    throw Error("object store: short write");
}

void ObjectStore::accumulate_gradient(int64_t y0, int64_t y1, const Tensor& t) {
  if (t.shape() != Shape{y1 - y0, shape_[1], shape_[2], shape_[3]})
    throw Error("object store: gradient block has the wrong shape");
  for (int64_t y = y0; y < y1; y++) {
    std::lock_guard<std::mutex> lk(*row_locks_[(size_t)y]);
    Tensor row = read_rows(kGradient, y, y + 1);
    const double* add = t.data() + (y - y0) * row_doubles();
    for (int64_t i = 0; i < row_doubles(); i++) row[i] += add[i];
    write_rows(kGradient, y, y + 1, row);
  }
}

void ObjectStore::zero_rows(Array a, int64_t y0, int64_t y1) {
  if (y1 <= y0) return;
  write_rows(a, y0, y1, Tensor({y1 - y0, shape_[1], shape_[2], shape_[3]}));
}

}  // namespace xrec
