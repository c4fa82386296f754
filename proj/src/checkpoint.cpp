#include "bld/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "bld/image.hpp"

namespace bld {

namespace {

constexpr char kMagic[8] = {'B', 'L', 'D', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    raw(b, 4);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    raw(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add_params(const nn::ParamSet& ps, const std::string& prefix) {
  for (const auto& [name, v] : ps.items()) tensors.emplace_back(prefix + name, v.value());
}

nn::ParamSet Checkpoint::take_params(const std::string& prefix) const {
  nn::ParamSet ps;
  for (const auto& [name, t] : tensors)
    if (name.rfind(prefix, 0) == 0) ps.add(name.substr(prefix.size()), t);
  return ps;
}

std::vector<Tensor> Checkpoint::tensors_with_prefix(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : tensors)
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  return out;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(Checkpoint::kVersion);
  w.str(ck.type);
  w.str(ck.header.dump());
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values()) w.f32(v);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.type = r.str();
  try {
    ck.header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("implausible tensor rank in " + name);
    Shape s(rank);
    for (auto& d : s) d = static_cast<int>(r.u32());
    Tensor t(s);
    for (auto& v : t.values()) v = r.f32();
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, serialize_checkpoint(ck));
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_type) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const ImageIoError& e) {
    throw CheckpointError(e.what());
  }
  Checkpoint ck = deserialize_checkpoint(bytes);
  if (!expected_type.empty() && ck.type != expected_type) {
    throw CheckpointError("checkpoint " + path.string() + " has type '" + ck.type + "', expected '" + expected_type + "'");
  }
  return ck;
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_hex(const std::string& text) { return sha256_hex(std::vector<std::uint8_t>(text.begin(), text.end())); }

}  // namespace bld
