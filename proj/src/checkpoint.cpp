#include "acfpipe/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace acfpipe::ckpt {
namespace {

constexpr std::array<char, 8> kMagic = {'A', 'C', 'F', 'P', 'I', 'P', 'E', '\0'};

const std::array<std::uint32_t, 256>& crc_table() {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

// Serialization buffer; CRC is computed over the accumulated bytes.
struct Buffer {
  std::vector<std::uint8_t> bytes;

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

struct Cursor {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    // overflow-safe: a corrupt length field must not wrap the comparison
    if (n > bytes.size() || pos > bytes.size() - n) {
      throw IntegrityError("checkpoint truncated");
    }
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(bytes[pos++]) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
    return v;
  }
};

}  // namespace

std::uint32_t crc32(const std::uint8_t* data, std::size_t n, std::uint32_t seed) {
  const auto& t = crc_table();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = t[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, a] : arrays) {
    if (n == name) return true;
  }
  return false;
}

const CheckpointArray& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, a] : arrays) {
    if (n == name) return a;
  }
  throw IntegrityError("checkpoint has no array named '" + name + "'");
}

void Checkpoint::add(const std::string& name, const nn::Tensor<double>& t) {
  CheckpointArray a;
  a.dtype = 0;
  for (auto d : t.shape) a.dims.push_back(static_cast<std::uint64_t>(d));
  a.f64.assign(t.values.data(), t.values.data() + t.numel());
  arrays.emplace_back(name, std::move(a));
}

void Checkpoint::add(const std::string& name, const nn::Tensor<float>& t) {
  CheckpointArray a;
  a.dtype = 1;
  for (auto d : t.shape) a.dims.push_back(static_cast<std::uint64_t>(d));
  a.f32.assign(t.values.data(), t.values.data() + t.numel());
  arrays.emplace_back(name, std::move(a));
}

void Checkpoint::add(const std::string& name, const Eigen::MatrixXd& m) {
  CheckpointArray a;
  a.dtype = 0;
  a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  a.f64.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) a.f64.push_back(m(r, c));
  }
  arrays.emplace_back(name, std::move(a));
}

Eigen::MatrixXd Checkpoint::matrix(const std::string& name) const {
  const auto& a = at(name);
  if (a.dims.size() != 2) {
    throw IntegrityError("checkpoint array '" + name + "' is not a matrix");
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(a.dims[0]), static_cast<Eigen::Index>(a.dims[1]));
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = a.dtype == 0 ? a.f64[k] : static_cast<double>(a.f32[k]);
      ++k;
    }
  }
  return m;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  Buffer buf;
  buf.raw(kMagic.data(), kMagic.size());
  buf.u32(kCheckpointVersion);
  const std::string meta = c.meta.dump();
  buf.u64(meta.size());
  buf.raw(meta.data(), meta.size());
  buf.u32(static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& [name, a] : c.arrays) {
    if (name.size() > 0xFFFF) throw ArgumentError("checkpoint array name too long");
    buf.u16(static_cast<std::uint16_t>(name.size()));
    buf.raw(name.data(), name.size());
    buf.u8(a.dtype);
    buf.u8(static_cast<std::uint8_t>(a.dims.size()));
    for (auto d : a.dims) buf.u64(d);
    if (a.dtype == 0) {
      buf.raw(a.f64.data(), a.f64.size() * sizeof(double));
    } else {
      buf.raw(a.f32.data(), a.f32.size() * sizeof(float));
    }
  }
  const std::uint32_t crc = crc32(buf.bytes.data(), buf.bytes.size());
  buf.u32(crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.bytes.data()),
            static_cast<std::streamsize>(buf.bytes.size()));
  if (!out) throw IoError("short write: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());

  if (bytes.size() < kMagic.size() + 4 + 4) throw IntegrityError("checkpoint truncated");
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8 |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16 |
                                   static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24;
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc) {
    throw IntegrityError("checkpoint CRC mismatch: " + path.string());
  }

  Cursor cur{bytes};
  std::array<char, 8> magic{};
  cur.raw(magic.data(), magic.size());
  if (magic != kMagic) throw IntegrityError("not a checkpoint file: " + path.string());
  const std::uint32_t version = cur.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }

  Checkpoint c;
  const std::uint64_t meta_len = cur.u64();
  cur.need(meta_len);
  const std::string meta(reinterpret_cast<const char*>(bytes.data() + cur.pos), meta_len);
  cur.pos += meta_len;
  try {
    c.meta = json::parse(meta);
  } catch (const json::parse_error& e) {
    throw IntegrityError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }

  const std::uint32_t count = cur.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = cur.u16();
    cur.need(name_len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + cur.pos), name_len);
    cur.pos += name_len;

    CheckpointArray a;
    a.dtype = cur.u8();
    if (a.dtype > 1) throw IntegrityError("checkpoint array '" + name + "' has unknown dtype");
    const std::uint8_t rank = cur.u8();
    for (std::uint8_t d = 0; d < rank; ++d) a.dims.push_back(cur.u64());
    const std::uint64_t n = a.numel();
    // cheap sanity bound before resize so corrupt dims fail cleanly
    if (n > bytes.size()) throw IntegrityError("checkpoint truncated");
    if (a.dtype == 0) {
      a.f64.resize(n);
      cur.raw(a.f64.data(), n * sizeof(double));
    } else {
      a.f32.resize(n);
      cur.raw(a.f32.data(), n * sizeof(float));
    }
    c.arrays.emplace_back(std::move(name), std::move(a));
  }
  if (cur.pos != bytes.size() - 4) {
    throw IntegrityError("checkpoint has trailing bytes: " + path.string());
  }
  return c;
}

void save_standardizer(Checkpoint& c, const acf::AcfStandardizer& s) {
  c.add("standardizer/mean", s.mean);
  c.add("standardizer/std", s.std);
  c.meta["standardizer_fitted_on"] = s.fitted_on;
}

acf::AcfStandardizer load_standardizer(const Checkpoint& c) {
  acf::AcfStandardizer s;
  s.mean = c.matrix("standardizer/mean");
  s.std = c.matrix("standardizer/std");
  s.fitted_on = c.meta.value("standardizer_fitted_on", 0L);
  return s;
}

}  // namespace acfpipe::ckpt
