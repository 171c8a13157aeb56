// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "laser/config.hpp"

namespace laser {

/// Checkpoint layout (all integers little-endian):
///
///   offset 0   8 bytes  magic "LASERCKP"
///   offset 8   u32      format version
///   offset 12  u64      header length H in bytes
///   offset 20  H bytes  UTF-8 JSON header
///   then       payload  tensors back to back, row-major, little-endian
///
/// The header holds "dtype", "model", "attention", "step" and "tensors", a
/// list of {"name", "shape": [rows, cols], "offset", "bytes"} with offsets
/// relative to the start of the payload.
inline constexpr std::array<char, 8> kCheckpointMagic = {'L', 'A', 'S', 'E', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
U to_little(U x) {
  if constexpr (std::endian::native == std::endian::big) {
    U r = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) r = U((r << 8) | ((x >> (8 * i)) & 0xFF));
    return r;
  }
  return x;
}

template <typename U>
void put_int(std::ostream& os, U x) {
  x = to_little(x);
  os.write(reinterpret_cast<const char*>(&x), sizeof x);
}

template <typename U>
U get_int(std::istream& is) {
  U x{};
  is.read(reinterpret_cast<char*>(&x), sizeof x);
  if (!is) throw CheckpointError("checkpoint is truncated");
  return to_little(x);
}

template <Real T>
using BitsOf = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

template <Real T>
struct Checkpoint {
  ModelParams<T> params;
  std::size_t step = 0;
};

template <Real T>
void save_checkpoint(const std::string& path, const ModelParams<T>& params, std::size_t step = 0) {
  Json tensors = Json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params.entries()) {
    const std::size_t bytes = t.size() * sizeof(T);
    tensors.push_back(Json{{"name", name}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  const Json header{{"dtype", std::string(dtype_name(dtype_of<T>()))},
                    {"model", to_json(params.config())},
                    {"attention", to_json(params.config().attention)},
                    {"step", step},
                    {"tensors", tensors}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint '" + path + "' for writing");
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_int<std::uint32_t>(os, kCheckpointVersion);
  detail::put_int<std::uint64_t>(os, text.size());
  os.write(text.data(), std::streamsize(text.size()));
  for (const auto& e : params.entries())
    for (T v : e.second.data()) detail::put_int(os, std::bit_cast<detail::BitsOf<T>>(v));
  if (!os) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

/// Reads a checkpoint written with either dtype and converts it to T.
template <Real T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint '" + path + "'");
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = detail::get_int<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto hlen = detail::get_int<std::uint64_t>(is);
  if (hlen > (std::uint64_t(1) << 30)) throw CheckpointError("checkpoint header length is implausible");
  std::string text(hlen, '\0');
  is.read(text.data(), std::streamsize(hlen));
  if (!is) throw CheckpointError("checkpoint truncated in header");

  Json header;
  ModelConfig cfg;
  DType dtype;
  try {
    header = Json::parse(text);
    cfg = parse_model_config(header.at("model"), header.at("attention"));
    dtype = parse_dtype(header.at("dtype").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint header is malformed: ") + e.what());
  }
  const std::size_t width = dtype == DType::f32 ? 4 : 8;

  Checkpoint<T> ck{ModelParams<T>(cfg), header.value("step", std::size_t(0))};
  const Json& tensors = header.at("tensors");
  if (tensors.size() != ck.params.entries().size())
    throw CheckpointError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, config needs " +
                          std::to_string(ck.params.entries().size()));
  std::size_t expect_offset = 0;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    auto& [name, t] = ck.params.entries()[k];
    const Json& d = tensors[k];
    if (d.at("name").get<std::string>() != name || d.at("shape")[0].get<std::size_t>() != t.rows() ||
        d.at("shape")[1].get<std::size_t>() != t.cols() || d.at("offset").get<std::size_t>() != expect_offset ||
        d.at("bytes").get<std::size_t>() != t.size() * width)
      throw CheckpointError("checkpoint tensor " + std::to_string(k) + " does not match parameter '" + name + "'");
    expect_offset += t.size() * width;
    for (auto& v : t.data()) {
      if (width == 4) v = T(std::bit_cast<float>(detail::get_int<std::uint32_t>(is)));
      else v = T(std::bit_cast<double>(detail::get_int<std::uint64_t>(is)));
    }
    if (!t.all_finite()) throw CheckpointError("checkpoint tensor '" + name + "' holds non-finite values");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

/// Throws CheckpointError unless the checkpoint's architecture equals `want`.
/// Init-only settings are ignored.
inline void require_compatible(const ModelConfig& have, const ModelConfig& want) {
  auto arch = [](const ModelConfig& c) {
    Json m = to_json(c);
    Json a = to_json(c.attention);
    m.erase("init_std");
    a.erase("lambda_init");
    m["attention"] = a;
    return m;
  };
  if (arch(have) != arch(want)) {
    throw CheckpointError("checkpoint architecture " + arch(have).dump() + " does not match the requested " +
                          arch(want).dump());
  }
}

}  // namespace laser
