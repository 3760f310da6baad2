#include "cmtboost/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace cmtboost {

namespace {

constexpr char kMagic[4] = {'C', 'B', 'R', 'B'};

template <typename T>
constexpr std::uint8_t dtype_code();
template <>
constexpr std::uint8_t dtype_code<float>() { return 0; }
template <>
constexpr std::uint8_t dtype_code<double>() { return 1; }

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) const {
    if (pos + n > size) throw CheckpointError("truncated checkpoint: " + path);
  }
  std::uint8_t u8() {
    need(1);
    return data[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(data[pos]) |
                      static_cast<std::uint16_t>(data[pos + 1]) << 8;
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data + pos), n);
    pos += n;
    return s;
  }
};

struct ParsedTensor {
  std::string name;
  std::uint8_t dtype;
  Shape shape;
  std::size_t data_offset;  // into the file buffer
  std::size_t numel;
};

struct ParsedCheckpoint {
  std::vector<ParsedTensor> tensors;
  std::string config_echo;
};

ParsedCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& buf, const std::string& path) {
  Reader r{buf.data(), buf.size(), 0, path};
  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw CheckpointError("bad checkpoint magic in " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " +
                          path);
  }
  ParsedCheckpoint parsed;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    ParsedTensor t;
    t.name = r.bytes(r.u16());
    t.dtype = r.u8();
    if (t.dtype > 1) throw CheckpointError("unknown dtype code in " + path);
    const std::uint8_t rank = r.u8();
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      t.shape.push_back(dim);
      numel *= dim;
    }
    t.numel = numel;
    t.data_offset = r.pos;
    const std::size_t elem = t.dtype == 0 ? 4 : 8;
    r.need(numel * elem);
    r.pos += numel * elem;
    parsed.tensors.push_back(std::move(t));
  }
  const std::uint32_t echo_len = r.u32();
  parsed.config_echo = r.bytes(echo_len);
  return parsed;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return buf;
}

}  // namespace

template <typename T>
void save_checkpoint(const BoostedHybridModel<T>& model, const std::string& path,
                     const std::string& config_echo) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const auto& params = model.registry().params();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out.append(p.name);
    out.push_back(static_cast<char>(dtype_code<T>()));
    out.push_back(static_cast<char>(p.value.rank()));
    for (auto d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    const auto& data = p.value.data();
    const std::size_t bytes = data.size() * sizeof(T);
    const std::size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, data.data(), bytes);
  }
  put_u32(out, static_cast<std::uint32_t>(config_echo.size()));
  out.append(config_echo);

  // Write-temp-then-rename so readers never observe a partial file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("checkpoint write failed: " + path);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void load_checkpoint(BoostedHybridModel<T>& model, const std::string& path,
                     const std::string& prefix, bool strict) {
  const std::vector<std::uint8_t> buf = read_file(path);
  const ParsedCheckpoint parsed = parse_checkpoint(buf, path);

  // Validate everything first; apply only after no error is possible.
  std::vector<std::pair<Tensor<T>*, const ParsedTensor*>> plan;
  for (const auto& t : parsed.tensors) {
    if (!prefix.empty() && t.name.compare(0, prefix.size(), prefix) != 0) continue;
    Tensor<T>* dest = model.registry().find(t.name);
    if (dest == nullptr) {
      if (strict) throw CheckpointError("checkpoint tensor " + t.name + " not in model");
      continue;
    }
    if (t.dtype != dtype_code<T>()) {
      throw CheckpointError("checkpoint tensor " + t.name + " has mismatched dtype");
    }
    if (t.shape != dest->shape()) {
      throw CheckpointError("checkpoint tensor " + t.name + " shape " + shape_str(t.shape) +
                            " does not match model shape " + shape_str(dest->shape()));
    }
    plan.emplace_back(dest, &t);
  }
  if (!prefix.empty() && plan.empty()) {
    throw CheckpointError("no checkpoint tensors match prefix '" + prefix + "' in " + path);
  }
  for (auto& [dest, src] : plan) {
    std::memcpy(dest->data().data(), buf.data() + src->data_offset, src->numel * sizeof(T));
  }
}

std::string read_checkpoint_config_echo(const std::string& path) {
  const std::vector<std::uint8_t> buf = read_file(path);
  return parse_checkpoint(buf, path).config_echo;
}

template void save_checkpoint(const BoostedHybridModel<float>&, const std::string&,
                              const std::string&);
template void save_checkpoint(const BoostedHybridModel<double>&, const std::string&,
                              const std::string&);
template void load_checkpoint(BoostedHybridModel<float>&, const std::string&, const std::string&,
                              bool);
template void load_checkpoint(BoostedHybridModel<double>&, const std::string&, const std::string&,
                              bool);

}  // namespace cmtboost
