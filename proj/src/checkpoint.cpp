#include "mhenet/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <type_traits>
#include <vector>

namespace mhenet {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  std::size_t size() const { return buf_.size(); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::vector<std::uint8_t> data, std::string path)
      : data_(std::move(data)), path_(std::move(path)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointError(path_ + ": truncated checkpoint");
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void seek(std::size_t pos) {
    pos_ = pos;
    need(0);
  }

 private:
  std::vector<std::uint8_t> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

Reader open(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return Reader(std::move(data), path);
}

nlohmann::json read_header(Reader& r, const std::string& path) {
  if (r.str(4) != std::string(kCheckpointMagic, 4)) {
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = r.le<std::uint32_t>();
  try {
    return nlohmann::json::parse(r.str(len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": corrupt config block: " + e.what());
  }
}

void check_compatible(const NetworkConfig& stored, const NetworkConfig& have,
                      const std::string& path) {
  auto mismatch = [&](const std::string& what, const std::string& a, const std::string& b) {
    throw CheckpointError(path + ": checkpoint " + what + " " + a + " does not match model " +
                          what + " " + b);
  };
  if (stored.channels != have.channels) {
    mismatch("channels C", std::to_string(stored.channels), std::to_string(have.channels));
  }
  if (stored.stem_width != have.stem_width) {
    mismatch("stem width", std::to_string(stored.stem_width), std::to_string(have.stem_width));
  }
  if (stored.stage_widths != have.stage_widths) {
    mismatch("stage widths", nlohmann::json(stored.stage_widths).dump(),
             nlohmann::json(have.stage_widths).dump());
  }
  if (!(stored.ablation == have.ablation)) {
    mismatch("ablation", "'" + stored.ablation.disabled_list() + "'",
             "'" + have.ablation.disabled_list() + "'");
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Network& net) {
  const auto& entries = net.params().entries();
  const std::string config = net.config().to_json().dump();
  const std::uint8_t dtype = sizeof(Real) == 8 ? 1 : 0;

  std::size_t header = 4 + 4 + 4 + config.size() + 4;
  for (const auto& e : entries) header += 2 + e.name.size() + 1 + 1 + 16 + 8;

  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.bytes(config.data(), config.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = header;
  for (const auto& e : entries) {
    const Shape& s = e.tensor.shape();
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.le<std::uint8_t>(dtype);
    w.le<std::uint8_t>(4);
    for (int d : {s.n, s.c, s.h, s.w}) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.le<std::uint64_t>(offset);
    offset += e.tensor.numel() * sizeof(Real);
  }
  for (const auto& e : entries) {
    for (Real v : e.tensor.data()) {
      using Bits = std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>;
      w.le<Bits>(std::bit_cast<Bits>(v));
    }
  }
  // write to a sibling file first so a crash never leaves a torn checkpoint
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    out.write(reinterpret_cast<const char*>(w.buffer().data()),
              static_cast<std::streamsize>(w.size()));
    if (!out) throw CheckpointError("short write to " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError("cannot move checkpoint into place at " + path);
  }
}

nlohmann::json read_checkpoint_config(const std::string& path) {
  Reader r = open(path);
  return read_header(r, path);
}

void load_checkpoint_into(const std::string& path, Network& net) {
  Reader r = open(path);
  const NetworkConfig stored = NetworkConfig::from_json(read_header(r, path));
  check_compatible(stored, net.config(), path);

  const auto count = r.le<std::uint32_t>();
  const auto& entries = net.params().entries();
  if (count != entries.size()) {
    throw CheckpointError(path + ": holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(entries.size()));
  }
  struct Meta {
    std::string name;
    std::uint8_t dtype;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Meta> metas;
  for (std::uint32_t i = 0; i < count; ++i) {
    Meta m;
    m.name = r.str(r.le<std::uint16_t>());
    m.dtype = r.le<std::uint8_t>();
    const auto rank = r.le<std::uint8_t>();
    if (rank != 4 || m.dtype > 1) throw CheckpointError(path + ": bad entry for " + m.name);
    m.shape.n = static_cast<int>(r.le<std::uint32_t>());
    m.shape.c = static_cast<int>(r.le<std::uint32_t>());
    m.shape.h = static_cast<int>(r.le<std::uint32_t>());
    m.shape.w = static_cast<int>(r.le<std::uint32_t>());
    m.offset = r.le<std::uint64_t>();
    metas.push_back(std::move(m));
  }
  for (const Meta& m : metas) {
    const ParamEntry* e = net.params().find(m.name);
    if (!e) throw CheckpointError(path + ": unknown tensor " + m.name);
    if (!(e->tensor.shape() == m.shape)) {
      throw CheckpointError(path + ": " + m.name + " has shape " + m.shape.str() +
                            ", model expects " + e->tensor.shape().str());
    }
    Tensor t = e->tensor;
    auto dst = t.mutable_data();
    r.seek(m.offset);
    for (Real& v : dst) {
      if (m.dtype == 1) {
        v = static_cast<Real>(std::bit_cast<double>(r.le<std::uint64_t>()));
      } else {
        v = static_cast<Real>(std::bit_cast<float>(r.le<std::uint32_t>()));
      }
    }
    if (e->kind == ParamKind::Frozen) {
      const bool horizontal = m.name.ends_with("basis_h");
      const Tensor expect = horizontal ? sobel_horizontal() : sobel_vertical();
      if (!m.name.ends_with("basis_h") && !m.name.ends_with("basis_v")) continue;
      for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i] != expect.data()[i]) {
          throw CheckpointError(path + ": frozen Sobel basis " + m.name + " is corrupted");
        }
      }
    }
  }
}

std::unique_ptr<Network> load_checkpoint(const std::string& path) {
  auto net = std::make_unique<Network>(NetworkConfig::from_json(read_checkpoint_config(path)));
  load_checkpoint_into(path, *net);
  return net;
}

}  // namespace mhenet
