// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian, values IEEE-754 binary64):
//
//   magic   "CONFPOCK"            8 bytes
//   version u32                   currently 1
//   config  u64 x5, u64 seed      vocab, d_model, n_layers, n_heads, max_seq, init_seed
//   count   u64                   number of tensors
//   tensor  u32 name_len, name bytes, u32 rank, u64 dims[rank], f64 data[prod(dims)]
//
// Tensors are written in name order, so equal models produce equal bytes.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "confpo/model.hpp"

namespace confpo {

inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'N', 'F', 'P', 'O', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ValidationError("checkpoint " + path + ": truncated");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  validate_params(model.config, model.params);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  const ModelConfig& c = model.config;
  for (std::uint64_t v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq}) detail::write_pod(os, v);
  detail::write_pod<std::uint64_t>(os, c.init_seed);
  detail::write_pod<std::uint64_t>(os, model.params.size());
  for (const auto& [name, t] : model.params) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw ValidationError("checkpoint: write failed for " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("checkpoint: cannot open " + p);
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw ValidationError("checkpoint " + p + ": bad magic");
  }
  const auto version = detail::read_pod<std::uint32_t>(is, p);
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint " + p + ": unsupported version " + std::to_string(version));
  }
  Model m;
  m.config.vocab_size = detail::read_pod<std::uint64_t>(is, p);
  m.config.d_model = detail::read_pod<std::uint64_t>(is, p);
  m.config.n_layers = detail::read_pod<std::uint64_t>(is, p);
  m.config.n_heads = detail::read_pod<std::uint64_t>(is, p);
  m.config.max_seq = detail::read_pod<std::uint64_t>(is, p);
  m.config.init_seed = detail::read_pod<std::uint64_t>(is, p);
  m.config.validate();
  const auto count = detail::read_pod<std::uint64_t>(is, p);
  if (count > 4096) throw ValidationError("checkpoint " + p + ": implausible tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::read_pod<std::uint32_t>(is, p);
    if (len > 1024) throw ValidationError("checkpoint " + p + ": implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ValidationError("checkpoint " + p + ": truncated");
    const auto rank = detail::read_pod<std::uint32_t>(is, p);
    if (rank > 8) throw ValidationError("checkpoint " + p + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_pod<std::uint64_t>(is, p);
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw ValidationError("checkpoint " + p + ": truncated data for '" + name + "'");
    }
    m.params.emplace(std::move(name), std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ValidationError("checkpoint " + p + ": trailing bytes");
  validate_params(m.config, m.params);
  return m;
}

}  // namespace confpo
