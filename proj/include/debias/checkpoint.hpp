#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/model.hpp"
#include "debias/vocab.hpp"

namespace debias {

// Binary checkpoint: magic, version, config, vocabulary, provenance strings,
// then every tensor in for_each_tensor order as raw little-endian doubles.
// Round-trips bit-exactly on the platforms this project targets.
namespace ckpt {

constexpr std::uint32_t kMagic = 0x4D4C4244;  // "DBLM"
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline std::string get_str(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

}  // namespace ckpt

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const Vocabulary& vocab,
                            const std::vector<std::string>& provenance = {}) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  ckpt::put_u32(out, ckpt::kMagic);
  ckpt::put_u32(out, ckpt::kVersion);
  const ModelConfig& c = params.config;
  ckpt::put_u32(out, static_cast<std::uint32_t>(c.n_layers));
  ckpt::put_u32(out, static_cast<std::uint32_t>(c.d_model));
  ckpt::put_u32(out, static_cast<std::uint32_t>(c.n_heads));
  ckpt::put_u32(out, static_cast<std::uint32_t>(c.d_ff));
  ckpt::put_u32(out, static_cast<std::uint32_t>(c.vocab_size));
  ckpt::put_u32(out, static_cast<std::uint32_t>(c.max_seq_len));
  ckpt::put_u64(out, c.seed);

  ckpt::put_u32(out, static_cast<std::uint32_t>(vocab.tokens.size()));
  for (const auto& t : vocab.tokens) ckpt::put_str(out, t);
  ckpt::put_u32(out, static_cast<std::uint32_t>(vocab.bos));
  ckpt::put_u32(out, static_cast<std::uint32_t>(vocab.eos));
  ckpt::put_u32(out, static_cast<std::uint32_t>(vocab.unk));
  ckpt::put_u32(out, static_cast<std::uint32_t>(vocab.none));

  ckpt::put_u32(out, static_cast<std::uint32_t>(provenance.size()));
  for (const auto& s : provenance) ckpt::put_str(out, s);

  for_each_tensor(const_cast<ModelParams&>(params), [&out](int, const char* name,
                                                           const auto& tensor) {
    ckpt::put_str(out, name);
    ckpt::put_u32(out, static_cast<std::uint32_t>(tensor.rows()));
    ckpt::put_u32(out, static_cast<std::uint32_t>(tensor.cols()));
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(tensor.size())));
  });
  if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

struct Checkpoint {
  ModelParams params;
  Vocabulary vocab;
  std::vector<std::string> provenance;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  if (ckpt::get_u32(in) != ckpt::kMagic) throw std::runtime_error("bad checkpoint magic: " + path);
  if (ckpt::get_u32(in) != ckpt::kVersion) throw std::runtime_error("bad checkpoint version: " + path);

  ModelConfig c;
  c.n_layers = static_cast<int>(ckpt::get_u32(in));
  c.d_model = static_cast<int>(ckpt::get_u32(in));
  c.n_heads = static_cast<int>(ckpt::get_u32(in));
  c.d_ff = static_cast<int>(ckpt::get_u32(in));
  c.vocab_size = static_cast<int>(ckpt::get_u32(in));
  c.max_seq_len = static_cast<int>(ckpt::get_u32(in));
  c.seed = ckpt::get_u64(in);

  Checkpoint out{ModelParams::zeros(c), {}, {}};

  const std::uint32_t ntok = ckpt::get_u32(in);
  for (std::uint32_t i = 0; i < ntok; ++i) {
    std::string t = ckpt::get_str(in);
    out.vocab.id_of.emplace(t, static_cast<int>(out.vocab.tokens.size()));
    out.vocab.tokens.push_back(std::move(t));
  }
  out.vocab.bos = static_cast<int>(ckpt::get_u32(in));
  out.vocab.eos = static_cast<int>(ckpt::get_u32(in));
  out.vocab.unk = static_cast<int>(ckpt::get_u32(in));
  out.vocab.none = static_cast<int>(ckpt::get_u32(in));

  const std::uint32_t nprov = ckpt::get_u32(in);
  for (std::uint32_t i = 0; i < nprov; ++i) out.provenance.push_back(ckpt::get_str(in));

  for_each_tensor(out.params, [&in, &path](int, const char* name, auto& tensor) {
    const std::string stored = ckpt::get_str(in);
    if (stored != name) throw std::runtime_error("checkpoint tensor order mismatch: " + path);
    const auto rows = static_cast<Eigen::Index>(ckpt::get_u32(in));
    const auto cols = static_cast<Eigen::Index>(ckpt::get_u32(in));
    if (rows != tensor.rows() || cols != tensor.cols()) {
      throw std::runtime_error("checkpoint tensor shape mismatch: " + path);
    }
    in.read(reinterpret_cast<char*>(tensor.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(tensor.size())));
  });
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return out;
}

}  // namespace debias
