// Copyright 2026 The blockspec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>

#include "blockspec/model.hpp"
#include "json.hpp"

namespace blockspec {

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'X', 'D', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 24)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Model& model) {
  os.write(kCheckpointMagic.data(), 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put_string(os, nlohmann::json(model.config).dump());
  std::uint32_t count = 0;
  model.frozen.for_each([&](const std::string&, const Matrix&) { ++count; });
  model.draft.for_each([&](const std::string&, const Matrix&) { ++count; });
  detail::put<std::uint32_t>(os, count);
  auto write_tensor = [&](const std::string& name, const Matrix& m) {
    detail::put_string(os, name);
    detail::put<std::uint8_t>(os, 2);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols));
    os.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * 8));
  };
  model.frozen.for_each(write_tensor);
  model.draft.for_each(write_tensor);
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

/// Every tensor the config implies must be present exactly once with the
/// expected shape.
inline Model load_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic.data(), 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Model model;
  model.config = nlohmann::json::parse(detail::get_string(is)).get<ModelConfig>();
  model.config.validate();
  model.frozen = init_frozen(model.config, 0);
  model.draft = init_random_draft(model.config, 0);

  std::map<std::string, Matrix*> slots;
  model.frozen.for_each([&](const std::string& n, Matrix& m) { slots[n] = &m; });
  model.draft.for_each([&](const std::string& n, Matrix& m) { slots[n] = &m; });
  const auto count = detail::get<std::uint32_t>(is);
  if (count != slots.size()) throw std::runtime_error("checkpoint: expected " + std::to_string(slots.size()) + " tensors");
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = detail::get_string(is);
    auto it = slots.find(name);
    if (it == slots.end()) throw std::runtime_error("checkpoint: unknown or repeated tensor '" + name + "'");
    const auto rank = detail::get<std::uint8_t>(is);
    std::size_t dims[2] = {1, 1};
    if (rank < 1 || rank > 2) throw std::runtime_error("checkpoint: tensor '" + name + "' has unsupported rank");
    for (std::uint8_t r = 0; r < rank; ++r) dims[2 - rank + r] = detail::get<std::uint32_t>(is);
    Matrix& m = *it->second;
    if (dims[0] != m.rows || dims[1] != m.cols) throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    if (!is.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * 8))) {
      throw std::runtime_error("checkpoint: truncated file");
    }
    require_finite(m, "checkpoint");
    slots.erase(it);
  }
  return model;
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_checkpoint(os, model);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace blockspec
