#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "semgan/io/hash.hpp"
#include "semgan/nets.hpp"

namespace semgan::checkpoint {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kMagic[8] = {'S', 'E', 'M', 'G', 'A', 'N', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

/// SHA-256 over parameter shapes and float32 values; independent of the
/// trainable flag and provenance.
inline std::string parameter_hash(const nets::NetworkHandle<float>& h) {
  io::Sha256 sha;
  sha.update(nets::to_string(h.arch.kind));
  for (const auto& p : h.params) {
    const Shape s = p.shape();
    const std::int32_t dims[4] = {s.n, s.c, s.h, s.w};
    sha.update(dims, sizeof dims);
    sha.update(p.data(), p.size() * sizeof(float));
  }
  return sha.hex();
}

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw CheckpointError("checkpoint truncated");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace detail

/// Binary layout: magic, u32 version, u64 header length, JSON header, then
/// raw little-endian float32 parameter data in declaration order.
inline std::string serialize(const nets::NetworkHandle<float>& h, const nlohmann::json& extra = {}) {
  nlohmann::json header;
  header["kind"] = nets::to_string(h.arch.kind);
  header["arch"] = h.arch;
  header["trainable"] = h.trainable;
  header["provenance"] = h.provenance;
  header["parameter_hash"] = parameter_hash(h);
  const auto specs = nets::param_specs(h.arch);
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < h.params.size(); ++i) {
    const Shape s = h.params[i].shape();
    params.push_back({{"name", i < specs.size() ? specs[i].name : ""}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  header["params"] = params;
  if (!extra.is_null()) header["extra"] = extra;
  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& p : h.params) out.append(reinterpret_cast<const char*>(p.data()), p.size() * sizeof(float));
  return out;
}

struct Loaded {
  nets::NetworkHandle<float> handle;
  nlohmann::json header;
};

inline Loaded deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint file");
  }
  std::size_t pos = sizeof kMagic;
  const auto version = detail::get<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw CheckpointError("checkpoint truncated");
  Loaded out;
  out.header = nlohmann::json::parse(bytes.substr(pos, len));
  pos += len;
  auto& h = out.handle;
  h.arch = out.header.at("arch").get<nets::ArchConfig>();
  h.trainable = out.header.at("trainable").get<bool>();
  h.provenance = out.header.at("provenance").get<nets::Provenance>();
  for (const auto& spec : nets::param_specs(h.arch)) {
    Tensor<float> t(spec.shape);
    const std::size_t n = t.size() * sizeof(float);
    if (pos + n > bytes.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(t.data(), bytes.data() + pos, n);
    pos += n;
    h.params.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes in checkpoint");
  if (parameter_hash(h) != out.header.at("parameter_hash").get<std::string>()) {
    throw CheckpointError("checkpoint parameter hash mismatch");
  }
  return out;
}

inline void save(const std::filesystem::path& path, const nets::NetworkHandle<float>& h,
                 const nlohmann::json& extra = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io::write_file(path, serialize(h, extra));
}

inline Loaded load_full(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("no checkpoint at " + path.string());
  return deserialize(io::read_file(path));
}

inline nets::NetworkHandle<float> load(const std::filesystem::path& path) { return load_full(path).handle; }

/// Loads and requires the stored architecture to equal `expected`.
inline nets::NetworkHandle<float> load(const std::filesystem::path& path, const nets::ArchConfig& expected) {
  auto h = load(path);
  if (!(h.arch == expected)) {
    throw CheckpointError("checkpoint architecture mismatch: stored " + nlohmann::json(h.arch).dump() +
                          ", expected " + nlohmann::json(expected).dump());
  }
  return h;
}

}  // namespace semgan::checkpoint
