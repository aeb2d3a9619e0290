#include "qp/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "qp/error.hpp"

namespace qp {

namespace {

constexpr char kMagic[8] = {'Q', 'P', 'C', 'K', 'P', 'T', '0', '1'};

void write_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& os, double v) {
  uint64_t u = std::bit_cast<uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  os.write(b, 8);
}

double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw DataError("checkpoint: truncated payload");
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot write " + path);
  os.write(kMagic, sizeof(kMagic));
  std::string meta = ckpt.meta.dump();
  write_u32(os, static_cast<uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_u32(os, static_cast<uint32_t>(ckpt.entries.size()));
  for (const auto& [name, tensor] : ckpt.entries) {  // std::map: sorted by path
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(tensor.shape.size()));
    for (int d : tensor.shape) write_u32(os, static_cast<uint32_t>(d));
    for (double v : tensor.data) write_f64(os, v);
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  uint32_t meta_len = read_u32(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), meta_len);
  if (!is) throw DataError("checkpoint: truncated metadata in " + path);
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: bad metadata JSON in " + path + ": " + e.what());
  }
  uint32_t count = read_u32(is);
  for (uint32_t e = 0; e < count; ++e) {
    uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw DataError("checkpoint: truncated entry name in " + path);
    uint32_t rank = read_u32(is);
    std::vector<int> shape;
    size_t total = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      uint32_t d = read_u32(is);
      shape.push_back(static_cast<int>(d));
      total *= d;
    }
    Tensor t;
    t.shape = shape;
    t.data.resize(total);
    for (size_t i = 0; i < total; ++i) t.data[i] = read_f64(is);
    ckpt.entries.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

void put_params(Checkpoint& ckpt, const std::vector<NamedParam>& params) {
  for (const NamedParam& np : params) ckpt.entries["param/" + np.path] = np.param->value;
}

void restore_params(const Checkpoint& ckpt, const std::vector<NamedParam>& params) {
  for (const NamedParam& np : params) {
    auto it = ckpt.entries.find("param/" + np.path);
    if (it == ckpt.entries.end()) throw DataError("checkpoint: missing parameter '" + np.path + "'");
    if (it->second.shape != np.param->value.shape)
      throw DataError("checkpoint: shape mismatch for '" + np.path + "': " + it->second.shape_str() +
                      " vs " + np.param->value.shape_str());
    np.param->value = it->second;
  }
}

}  // namespace qp
