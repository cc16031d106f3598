#include "fnas/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fnas/errors.hpp"
#include "fnas/rng.hpp"

namespace fnas {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = value;
      return;
    }
  }
  meta.emplace_back(key, value);
}

void Checkpoint::add_array(const std::string& name, Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) throw DimensionError("checkpoint array '" + name + "' size mismatch");
  arrays.push_back({name, std::move(shape), std::move(values)});
}

bool Checkpoint::has_meta(const std::string& key) const {
  for (const auto& kv : meta) {
    if (kv.first == key) return true;
  }
  return false;
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
  for (const auto& kv : meta) {
    if (kv.first == key) return kv.second;
  }
  throw FormatError("checkpoint has no metadata '" + key + "'");
}

bool Checkpoint::has_array(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

const CheckpointArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("checkpoint has no array '" + name + "'");
}

void Checkpoint::restore_into(const std::string& name, Tensor& target) const {
  const auto& a = array(name);
  if (a.shape != target.shape()) {
    throw FormatError("checkpoint array '" + name + "' has shape " + shape_str(a.shape) + ", expected " +
                      shape_str(target.shape()));
  }
  std::copy(a.values.begin(), a.values.end(), target.mutable_data().begin());
}

void Checkpoint::restore_into(const std::string& name, std::vector<double>& target) const {
  const auto& a = array(name);
  if (a.values.size() != target.size()) {
    throw FormatError("checkpoint array '" + name + "' has " + std::to_string(a.values.size()) + " values, expected " +
                      std::to_string(target.size()));
  }
  target = a.values;
}

namespace {

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, std::string source)
      : b_(bytes), end_(end), source_(std::move(source)) {}
  void raw(void* p, std::size_t n) {
    if (n > end_ - pos_) fail("truncated data");
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > end_ - pos_) fail("truncated string");
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

 private:
  const std::string& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string source_;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.raw("FNAS", 4);
  w.u32(kCheckpointVersion);
  w.str(ck.config_digest);
  w.u32(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    w.str(a.name);
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) w.u64(d);
    w.raw(a.values.data(), a.values.size() * sizeof(double));
  }
  const std::uint64_t sum = fnv1a64(w.bytes());
  w.u64(sum);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "FNAS") != 0) {
    throw FormatError(source + ": bad magic (expected FNAS) at byte offset 0");
  }
  if (bytes.size() < 16) throw FormatError(source + ": truncated data at byte offset " + std::to_string(bytes.size()));
  const std::size_t body = bytes.size() - 8;
  Reader r(bytes, body, source);
  char magic[4];
  r.raw(magic, 4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported format version " + std::to_string(version) + " at byte offset 4");
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (stored != fnv1a64(std::string_view(bytes.data(), body))) {
    throw FormatError(source + ": checksum mismatch at byte offset " + std::to_string(body));
  }
  Checkpoint ck;
  ck.config_digest = r.str();
  const std::uint32_t nmeta = r.u32();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    ck.meta.emplace_back(std::move(k), r.str());
  }
  const std::uint32_t narrays = r.u32();
  for (std::uint32_t i = 0; i < narrays; ++i) {
    CheckpointArray a;
    a.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64();
      if (dim > (body - r.pos()) / sizeof(double) + 1) r.fail("array '" + a.name + "' larger than the file");
      a.shape.push_back(dim);
      count *= dim;
    }
    if (count > (body - r.pos()) / sizeof(double)) r.fail("truncated array '" + a.name + "'");
    a.values.resize(count);
    r.raw(a.values.data(), count * sizeof(double));
    ck.arrays.push_back(std::move(a));
  }
  if (r.pos() != body) r.fail("trailing bytes before checksum");
  return ck;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + tmp + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, target);
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) { write_file_atomic(path, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

void store_optimizer(Checkpoint& ck, const std::string& prefix, const Optimizer& opt) {
  const auto& s = opt.state();
  ck.set_meta(prefix + ".step", std::to_string(s.step));
  for (std::size_t k = 0; k < s.first.size(); ++k) {
    ck.add_array(prefix + ".first." + std::to_string(k), {s.first[k].size()}, s.first[k]);
  }
  for (std::size_t k = 0; k < s.second.size(); ++k) {
    ck.add_array(prefix + ".second." + std::to_string(k), {s.second[k].size()}, s.second[k]);
  }
}

void restore_optimizer(const Checkpoint& ck, const std::string& prefix, Optimizer& opt) {
  OptimizerState s = opt.state();
  s.step = std::stoull(ck.meta_value(prefix + ".step"));
  for (std::size_t k = 0; k < s.first.size(); ++k) ck.restore_into(prefix + ".first." + std::to_string(k), s.first[k]);
  for (std::size_t k = 0; k < s.second.size(); ++k) {
    ck.restore_into(prefix + ".second." + std::to_string(k), s.second[k]);
  }
  opt.load_state(std::move(s));
}

}  // namespace fnas
