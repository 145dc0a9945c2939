// Binary checkpoint container, all integers and doubles little-endian:
//
//   "CLLMCKPT"                       8-byte magic
//   u32 version
//   u64 vocab_size, d_model, n_layers, n_heads, max_seq_len, seed
//   u64 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values
//   u64 FNV-1a digest of every preceding byte

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cllm/errors.hpp"
#include "cllm/model.hpp"
#include "cllm/rng.hpp"

namespace cllm {
namespace {

constexpr char kMagic[8] = {'C', 'L', 'L', 'M', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw LoadError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  Writer w;
  const ModelConfig& c = model.config();
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u64(c.vocab_size);
  w.u64(c.d_model);
  w.u64(c.n_layers);
  w.u64(c.n_heads);
  w.u64(c.max_seq_len);
  w.u64(c.seed);
  w.u64(model.params().size());
  for (const auto& [name, t] : model.params()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape()) w.u64(dim);
    for (double v : t.values()) w.f64(v);
  }
  const std::uint64_t digest = fnv1a64(w.data());
  w.u64(digest);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path);
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw Error("failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint: " + path);
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof kMagic + 4 + 8) throw LoadError("checkpoint too short: " + path);
  Reader r(data);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw LoadError("not a checkpoint file: " + path);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw LoadError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::string_view body(data.data(), data.size() - 8);
  Reader tail(std::string_view(data).substr(data.size() - 8));
  if (fnv1a64(body) != tail.u64()) throw LoadError("checkpoint digest mismatch (corrupt file): " + path);

  ModelConfig c;
  c.vocab_size = r.u64();
  c.d_model = r.u64();
  c.n_layers = r.u64();
  c.n_heads = r.u64();
  c.max_seq_len = r.u64();
  c.seed = r.u64();
  if (expected && !(*expected == c)) {
    throw LoadError("checkpoint config " + c.hash() + " does not match expected config " + expected->hash());
  }
  const std::uint64_t count = r.u64();
  ParameterSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    if (len > r.remaining()) throw LoadError("checkpoint truncated in tensor name");
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& dim : shape) {
      dim = r.u64();
      n *= dim;
    }
    if (n * 8 > r.remaining()) throw LoadError("checkpoint truncated in tensor " + name);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    try {
      params.add(name, Tensor(shape, std::move(values)));
    } catch (const Error& e) {
      throw LoadError(std::string("bad tensor block in checkpoint: ") + e.what());
    }
  }
  if (r.remaining() != 8) throw LoadError("trailing bytes in checkpoint: " + path);
  try {
    Model model(c, std::move(params));
    // Shapes must be exactly what this config would initialise.
    const Model reference = init_model(c);
    for (const auto& [name, t] : reference.params()) {
      if (!model.params().contains(name) || model.params().at(name).shape() != t.shape()) {
        throw LoadError("checkpoint tensor " + name + " missing or mis-shaped");
      }
    }
    if (model.params().size() != reference.params().size()) throw LoadError("checkpoint has unexpected tensors");
    return model;
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint holds an invalid config: ") + e.what());
  }
}

}  // namespace cllm
