#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>

#include "mam/model.hpp"

namespace mam {

enum class CkptError { BadMagic, VersionMismatch, Truncated, ShapeMismatch, IoError };

inline const char* ckpt_error_name(CkptError e) {
  switch (e) {
    case CkptError::BadMagic: return "bad_magic";
    case CkptError::VersionMismatch: return "version_mismatch";
    case CkptError::Truncated: return "truncated";
    case CkptError::ShapeMismatch: return "shape_mismatch";
    default: return "io_error";
  }
}

struct CheckpointError : std::runtime_error {
  CkptError code;
  CheckpointError(CkptError c, const std::string& msg)
      : std::runtime_error(std::string("checkpoint: ") + ckpt_error_name(c) + ": " + msg),
        code(c) {}
};

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'A', 'M', 'C', 'K', 'P', 'T', '\n'};
constexpr uint32_t kCkptVersion = 1;
constexpr uint8_t kDtypeF64 = 0, kDtypeF32 = 1;

inline void put_u16(std::ostream& o, uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  o.write(b, 2);
}

inline void put_u32(std::ostream& o, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  o.write(b, 4);
}

inline void put_f64(std::ostream& o, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  o.write(b, 8);
}

inline void need(std::istream& in, char* dst, size_t count, const char* what) {
  in.read(dst, static_cast<std::streamsize>(count));
  if (in.gcount() != static_cast<std::streamsize>(count))
    throw CheckpointError(CkptError::Truncated, std::string("file ends inside ") + what);
}

inline uint16_t get_u16(std::istream& in, const char* what) {
  char b[2];
  need(in, b, 2, what);
  return static_cast<uint16_t>(static_cast<uint8_t>(b[0]) |
                               (static_cast<uint16_t>(static_cast<uint8_t>(b[1])) << 8));
}

inline uint32_t get_u32(std::istream& in, const char* what) {
  char b[4];
  need(in, b, 4, what);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  return v;
}

inline double get_f64(std::istream& in, const char* what) {
  char b[8];
  need(in, b, 8, what);
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string config_text(const ModelConfig& c) {
  std::string s;
  s += std::string("kind = ") + model_kind_name(c.kind) + "\n";
  s += "d_model = " + std::to_string(c.d_model) + "\n";
  s += "n_state = " + std::to_string(c.n_state) + "\n";
  s += "dt_rank = " + std::to_string(c.dt_rank) + "\n";
  s += "conv_width = " + std::to_string(c.conv_width) + "\n";
  s += "n_blocks = " + std::to_string(c.n_blocks) + "\n";
  s += "n_heads = " + std::to_string(c.n_heads) + "\n";
  s += "n_agents = " + std::to_string(c.n_agents) + "\n";
  s += "obs_dim = " + std::to_string(c.obs_dim) + "\n";
  s += "n_actions = " + std::to_string(c.n_actions) + "\n";
  s += std::string("add_agent_id = ") + (c.add_agent_id ? "true" : "false") + "\n";
  s += std::string("discretization = ") + (c.disc == Discretization::Zoh ? "zoh" : "euler") + "\n";
  return s;
}

inline ModelConfig config_from_text(const std::string& text) {
  ModelConfig c;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r");
      const size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    try {
      if (key == "kind") c.kind = model_kind_from_name(val);
      else if (key == "d_model") c.d_model = std::stoi(val);
      else if (key == "n_state") c.n_state = std::stoi(val);
      else if (key == "dt_rank") c.dt_rank = std::stoi(val);
      else if (key == "conv_width") c.conv_width = std::stoi(val);
      else if (key == "n_blocks") c.n_blocks = std::stoi(val);
      else if (key == "n_heads") c.n_heads = std::stoi(val);
      else if (key == "n_agents") c.n_agents = std::stoi(val);
      else if (key == "obs_dim") c.obs_dim = std::stoi(val);
      else if (key == "n_actions") c.n_actions = std::stoi(val);
      else if (key == "add_agent_id") c.add_agent_id = val == "true";
      else if (key == "discretization") c.disc = discretization_from_name(val);
      else throw std::invalid_argument("unknown field " + key);
    } catch (const std::exception& e) {
      throw CheckpointError(CkptError::ShapeMismatch,
                            "config snapshot field '" + key + "': " + e.what());
    }
  }
  return c;
}

}  // namespace detail

inline void save_checkpoint(const Policy& policy, const std::string& path) {
  Policy copy = policy;  // parameter enumeration needs mutable access
  ParamIndex ix = index_params(copy);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CkptError::IoError, "cannot open '" + path + "' for writing");
  out.write(detail::kCkptMagic, 8);
  detail::put_u32(out, detail::kCkptVersion);
  const std::string cfg = detail::config_text(policy.cfg);
  detail::put_u32(out, static_cast<uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put_u32(out, static_cast<uint32_t>(ix.names.size()));
  for (size_t i = 0; i < ix.names.size(); ++i) {
    const Tensor& t = *ix.tensors[i];
    detail::put_u16(out, static_cast<uint16_t>(ix.names[i].size()));
    out.write(ix.names[i].data(), static_cast<std::streamsize>(ix.names[i].size()));
    out.put(static_cast<char>(detail::kDtypeF64));
    out.put(static_cast<char>(t.shape.size()));
    for (int d : t.shape) detail::put_u32(out, static_cast<uint32_t>(d));
    for (long long k = 0; k < t.numel(); ++k) detail::put_f64(out, t[k]);
  }
  if (!out) throw CheckpointError(CkptError::IoError, "write failed for '" + path + "'");
}

struct LoadedCheckpoint {
  ModelConfig cfg;
  Policy policy;
};

// Rebuilds a policy from the stored config snapshot (or the caller's config
// when given) and fills its parameters by name; the first array whose shape
// disagrees with the target model is named in the error.
inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        const ModelConfig* want = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CkptError::IoError, "cannot open '" + path + "'");
  char magic[8];
  detail::need(in, magic, 8, "magic");
  if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw CheckpointError(CkptError::BadMagic, "'" + path + "' is not a checkpoint");
  const uint32_t version = detail::get_u32(in, "version");
  if (version != detail::kCkptVersion)
    throw CheckpointError(CkptError::VersionMismatch,
                          "format version " + std::to_string(version) + ", expected " +
                              std::to_string(detail::kCkptVersion));
  const uint32_t cfg_len = detail::get_u32(in, "config length");
  std::string cfg_text(cfg_len, '\0');
  detail::need(in, cfg_text.data(), cfg_len, "config snapshot");

  LoadedCheckpoint out;
  out.cfg = detail::config_from_text(cfg_text);
  out.policy = init_policy(want ? *want : out.cfg, 0);
  ParamIndex ix = index_params(out.policy);

  const uint32_t count = detail::get_u32(in, "array count");
  std::vector<bool> seen(ix.names.size(), false);
  for (uint32_t a = 0; a < count; ++a) {
    const uint16_t name_len = detail::get_u16(in, "array name length");
    std::string name(name_len, '\0');
    detail::need(in, name.data(), name_len, "array name");
    char tag_c, ndim_c;
    detail::need(in, &tag_c, 1, "dtype tag");
    detail::need(in, &ndim_c, 1, "rank");
    const uint8_t tag = static_cast<uint8_t>(tag_c);
    if (tag != detail::kDtypeF64 && tag != detail::kDtypeF32)
      throw CheckpointError(CkptError::ShapeMismatch,
                            "array '" + name + "' has unknown dtype tag");
    Shape shape(static_cast<size_t>(ndim_c));
    long long numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(detail::get_u32(in, "array shape"));
      numel *= d;
    }
    auto it = std::find(ix.names.begin(), ix.names.end(), name);
    if (it == ix.names.end())
      throw CheckpointError(CkptError::ShapeMismatch,
                            "array '" + name + "' does not exist in the target model");
    const size_t idx = static_cast<size_t>(it - ix.names.begin());
    Tensor& dst = *ix.tensors[idx];
    if (dst.shape != shape)
      throw CheckpointError(CkptError::ShapeMismatch,
                            "array '" + name + "' has mismatched shape for the target config");
    for (long long k = 0; k < numel; ++k) {
      if (tag == detail::kDtypeF64) {
        dst[k] = detail::get_f64(in, "array data");
      } else {
        char b[4];
        detail::need(in, b, 4, "array data");
        uint32_t bits = 0;
        for (int i = 0; i < 4; ++i)
          bits |= static_cast<uint32_t>(static_cast<uint8_t>(b[i])) << (8 * i);
        float f;
        std::memcpy(&f, &bits, 4);
        dst[k] = f;
      }
    }
    seen[idx] = true;
  }
  for (size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw CheckpointError(CkptError::ShapeMismatch,
                            "array '" + ix.names[i] + "' is missing from the checkpoint");
  return out;
}

}  // namespace mam
