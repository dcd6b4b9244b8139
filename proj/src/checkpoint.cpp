#include "clove/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "clove/error.hpp"

namespace clove {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}
  bool done() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }
  template <typename U>
  U get(const std::string& what) {
    U v;
    take(&v, sizeof(U), what);
    return v;
  }
  void take(void* out, std::size_t n, const std::string& what) {
    if (buf_.size() - pos_ < n) throw DataError("checkpoint truncated while reading " + what);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointRecord* CheckpointFile::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(file.step);
  for (const auto& r : file.records) {
    if (r.name.empty() || r.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ContractError("checkpoint: bad record name '" + r.name + "'");
    }
    if (r.shape.empty() || r.shape.size() > 255 || shape_size(r.shape) != r.data.size()) {
      throw ContractError("checkpoint: record " + r.name + " has inconsistent shape");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.shape.size()));
    for (std::size_t d : r.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.bytes(r.data.data(), r.data.size() * sizeof(float));
  }
  // Write beside the target, then rename, so a crash never leaves a torn file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open " + tmp + " for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw DataError("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("checkpoint: cannot move " + tmp + " to " + path);
}

CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw DataError("checkpoint: bad magic in " + path);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  }
  CheckpointFile file;
  file.step = r.get<std::uint64_t>("step");
  while (!r.done()) {
    const std::string at = "record " + std::to_string(file.records.size());
    CheckpointRecord rec;
    rec.name.resize(r.get<std::uint16_t>(at + " name length"));
    if (rec.name.empty()) throw DataError("checkpoint: empty name in " + at);
    r.take(rec.name.data(), rec.name.size(), at + " name");
    const auto dtype = r.get<std::uint8_t>(rec.name + " dtype");
    if (dtype != 0) throw DataError("checkpoint: record " + rec.name + " has unknown dtype " + std::to_string(dtype));
    const auto ndim = r.get<std::uint8_t>(rec.name + " ndim");
    if (ndim == 0) throw DataError("checkpoint: record " + rec.name + " has no dimensions");
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto extent = r.get<std::uint32_t>(rec.name + " dims");
      if (extent == 0) throw DataError("checkpoint: record " + rec.name + " has a zero extent");
      rec.shape.push_back(extent);
    }
    std::size_t count = 1;
    for (std::size_t d : rec.shape) {
      count *= d;
      if (count > r.remaining() / sizeof(float)) throw DataError("checkpoint truncated while reading " + rec.name + " payload");
    }
    rec.data.resize(count);
    r.take(rec.data.data(), rec.data.size() * sizeof(float), rec.name + " payload");
    if (file.find(rec.name)) throw DataError("checkpoint: duplicate record " + rec.name);
    file.records.push_back(std::move(rec));
  }
  return file;
}

}  // namespace clove
