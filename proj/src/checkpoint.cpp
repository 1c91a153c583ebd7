#include "xvit/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

namespace xvit {

namespace {

constexpr char kMagic[4] = {'X', 'V', 'I', 'T'};
constexpr std::size_t kAlign = 64;
constexpr std::size_t kPreamble = 4 + 4 + 8 + 4;

std::size_t align_up(std::size_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

template <class U>
void put_le(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

// Raw element bytes in little-endian order.
void append_payload(std::vector<unsigned char>& out, const Tensor& t) {
  const std::size_t n = t.nbytes();
  const std::size_t w = dtype_size(t.dtype());
  const auto* src = static_cast<const unsigned char*>(
      t.dtype() == DType::f32 ? static_cast<const void*>(t.data<float>().data())
                              : static_cast<const void*>(t.data<double>().data()));
  const std::size_t at = out.size();
  out.insert(out.end(), src, src + n);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = at; i < at + n; i += w) std::reverse(&out[i], &out[i + w]);
  }
}

void read_payload(const unsigned char* src, Tensor& t) {
  const std::size_t n = t.nbytes();
  const std::size_t w = dtype_size(t.dtype());
  auto* dst = static_cast<unsigned char*>(
      t.dtype() == DType::f32
          ? static_cast<void*>(t.mutable_data<float>().data())
          : static_cast<void*>(t.mutable_data<double>().data()));
  std::memcpy(dst, src, n);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; i += w) std::reverse(dst + i, dst + i + w);
  }
}

std::uint32_t crc(const unsigned char* p, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace

void save_checkpoint(const ModelParams& mp, const ModelConfig& cfg,
                     const std::filesystem::path& path) {
  check_params(mp, cfg);
  // Offsets depend on the header length, which depends on the offsets'
  // digits; iterate until the layout is stable.
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  mp.visit([&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, &t); });
  std::string header;
  std::size_t guess = 0;
  for (int iter = 0; iter < 8; ++iter) {
    nlohmann::ordered_json j;
    j["config"] = nlohmann::ordered_json::parse(config_to_json(cfg));
    j["dtype"] = std::string(dtype_name(mp.dtype()));
    auto& list = j["tensors"] = nlohmann::ordered_json::array();
    std::size_t off = align_up(kPreamble + guess);
    for (const auto& [name, t] : tensors) {
      nlohmann::ordered_json e;
      e["name"] = name;
      e["shape"] = t->shape();
      e["dtype"] = std::string(dtype_name(t->dtype()));
      e["offset"] = off;
      list.push_back(std::move(e));
      off = align_up(off + t->nbytes());
    }
    header = j.dump();
    if (header.size() == guess) break;
    guess = header.size();
  }
  if (header.size() != guess) throw Error("checkpoint header layout did not converge");

  std::vector<unsigned char> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header.size());
  put_le<std::uint32_t>(out, crc(reinterpret_cast<const unsigned char*>(header.data()),
                                 header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& entry : tensors) {
    out.resize(align_up(out.size()), 0);
    append_payload(out, *entry.second);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < kPreamble) throw LoadError("checkpoint truncated: no preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw LoadError("not a checkpoint: bad magic");
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw LoadError("checkpoint version " + std::to_string(version) +
                    ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto hlen = get_le<std::uint64_t>(bytes.data() + 8);
  const auto hcrc = get_le<std::uint32_t>(bytes.data() + 16);
  if (hlen > bytes.size() - kPreamble) throw LoadError("checkpoint truncated: header");
  const unsigned char* hp = bytes.data() + kPreamble;
  if (crc(hp, hlen) != hcrc) throw LoadError("checkpoint header checksum mismatch");

  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hp, hp + hlen);
    ck.config = config_from_json(header.at("config").dump());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint header: ") + e.what());
  }

  DType dtype;
  try {
    dtype = parse_dtype(header.at("dtype").get<std::string>());
  } catch (const std::exception& e) {
    throw LoadError(std::string("checkpoint header: ") + e.what());
  }
  ck.params = init_params(ck.config, 0, dtype);
  const auto& list = header.at("tensors");
  std::size_t i = 0;
  const std::size_t payload_start = align_up(kPreamble + hlen);
  ck.params.visit([&](const std::string& name, Tensor& t) {
    if (i >= list.size()) throw LoadError("checkpoint is missing tensor '" + name + "'");
    const auto& e = list[i++];
    std::string stored;
    Shape shape;
    std::size_t offset = 0;
    try {
      stored = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
      if (parse_dtype(e.at("dtype").get<std::string>()) != dtype) {
        throw LoadError("tensor '" + stored + "' has a mixed element type");
      }
    } catch (const nlohmann::json::exception& ex) {
      throw LoadError("checkpoint entry for '" + name + "': " + ex.what());
    }
    if (stored != name) {
      throw LoadError("checkpoint tensor '" + stored + "' where '" + name +
                      "' was expected");
    }
    if (shape != t.shape()) {
      throw LoadError("tensor '" + name + "' stored as " + shape_str(shape) +
                      " but config needs " + shape_str(t.shape()));
    }
    if (offset % kAlign != 0 || offset < payload_start) {
      throw LoadError("tensor '" + name + "' has a bad offset");
    }
    if (offset > bytes.size() || t.nbytes() > bytes.size() - offset) {
      throw LoadError("checkpoint truncated inside tensor '" + name + "'");
    }
    read_payload(bytes.data() + offset, t);
  });
  if (i != list.size()) throw LoadError("checkpoint has extra tensors");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  try {
    check_params(ck.params, expected);
  } catch (const ShapeError& e) {
    throw LoadError(std::string("checkpoint does not fit config: ") + e.what());
  }
  return ck;
}

}  // namespace xvit
