// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hybridkit/config.hpp"

namespace hybridkit {

// File layout: 8-byte magic "HYPENET1", u64 little-endian header length,
// UTF-8 JSON header, then the little-endian tensor payload. Header offsets
// are relative to the payload start.
inline constexpr char kCheckpointMagic[9] = "HYPENET1";

struct TensorEntry {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct CheckpointHeader {
  Json header;
  ModelConfig config;
  Json meta = Json::object();
  std::vector<TensorEntry> tensors;
  std::uint64_t payload_bytes = 0;
};

template <class T>
struct Checkpoint {
  Model<T> model;
  Json meta = Json::object();
};

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <class U>
void append_le(std::string& out, const U* data, std::size_t n) {
  const std::size_t at = out.size();
  out.resize(at + n * sizeof(U));
  std::memcpy(out.data() + at, data, n * sizeof(U));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < n; ++i) std::reverse(out.data() + at + i * sizeof(U), out.data() + at + (i + 1) * sizeof(U));
}

template <class U>
void read_le(const char* src, U* dst, std::size_t n) {
  std::memcpy(dst, src, n * sizeof(U));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < n; ++i) {
      auto* b = reinterpret_cast<char*>(dst + i);
      std::reverse(b, b + sizeof(U));
    }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

/// Serialized checkpoint bytes.
template <class T>
std::string checkpoint_bytes(const Model<T>& m, const Json& meta = Json::object()) {
  std::string payload;
  Json index = Json::array();
  for (const auto& [name, v] : m.named_parameters()) {
    const std::uint64_t off = payload.size();
    detail::append_le(payload, v.value().data(), v.size());
    index.push_back(Json{{"name", name},
                         {"dtype", dtype_name<T>()},
                         {"shape", v.shape()},
                         {"offset", off},
                         {"length", payload.size() - off}});
  }
  const Json header{{"format", "HYPENET1"}, {"config", model_config_to_json(m.config())}, {"meta", meta},
                    {"tensors", index}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64_le(out, h.size());
  out += h;
  out += payload;
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& m, const Json& meta = Json::object()) {
  const std::string bytes = checkpoint_bytes(m, meta);
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path);
  }
  std::filesystem::rename(tmp, path);
}

/// Validates framing and the tensor index; returns the parsed header.
inline CheckpointHeader parse_checkpoint_header(const std::string& bytes, std::size_t* payload_start = nullptr) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw FormatError("not a checkpoint: bad magic");
  const std::uint64_t hlen = detail::get_u64_le(reinterpret_cast<const unsigned char*>(bytes.data() + 8));
  if (hlen > bytes.size() - 16)
    throw FormatError("corrupt checkpoint: header_len " + std::to_string(hlen) + " exceeds the file size " +
                      std::to_string(bytes.size()));
  CheckpointHeader ch;
  try {
    ch.header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  ch.payload_bytes = bytes.size() - 16 - hlen;
  if (payload_start) *payload_start = 16 + hlen;
  try {
    const Json& h = ch.header;
    if (!h.is_object() || h.value("format", "") != "HYPENET1") throw FormatError("checkpoint header lacks format tag");
    ch.config = model_config_from_json(h.at("config"), "config");
    if (h.contains("meta")) ch.meta = h.at("meta");
    std::uint64_t expect = 0;
    for (const auto& t : h.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.length = t.at("length").get<std::uint64_t>();
      const std::size_t width = e.dtype == "f32" ? 4 : e.dtype == "f64" ? 8 : 0;
      if (!width) throw FormatError("tensor " + e.name + ": unknown dtype " + e.dtype);
      if (e.offset != expect) throw FormatError("tensor " + e.name + ": offsets are not contiguous and ascending");
      if (e.length != shape_numel(e.shape) * width) throw FormatError("tensor " + e.name + ": length does not match shape");
      expect += e.length;
      ch.tensors.push_back(std::move(e));
    }
    if (expect != ch.payload_bytes)
      throw FormatError("payload is " + std::to_string(ch.payload_bytes) + " bytes but the index covers " +
                        std::to_string(expect));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  return ch;
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  return parse_checkpoint_header(detail::read_file(path));
}

/// Loads into precision T; stored tensors of the other width are converted.
template <class T>
Checkpoint<T> checkpoint_from_bytes(const std::string& bytes) {
  std::size_t start = 0;
  const CheckpointHeader ch = parse_checkpoint_header(bytes, &start);
  Rng rng(0);
  Model<T> m = Model<T>::random(ch.config, rng);
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : ch.tensors) by_name[e.name] = &e;
  const auto named = m.named_parameters();
  if (by_name.size() != named.size() || ch.tensors.size() != named.size())
    throw FormatError("checkpoint holds " + std::to_string(ch.tensors.size()) + " tensors, the model needs " +
                      std::to_string(named.size()));
  for (const auto& [name, v] : named) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor " + name);
    const TensorEntry& e = *it->second;
    if (e.shape != v.shape())
      throw FormatError("tensor " + name + ": stored shape " + shape_str(e.shape) + ", model expects " +
                        shape_str(v.shape()));
    Var<T> var = v;
    T* dst = var.mutable_value().data();
    const char* src = bytes.data() + start + e.offset;
    if (e.dtype == dtype_name<T>()) {
      detail::read_le(src, dst, v.size());
    } else if (e.dtype == "f32") {
      std::vector<float> tmp(v.size());
      detail::read_le(src, tmp.data(), tmp.size());
      for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<T>(tmp[i]);
    } else {
      std::vector<double> tmp(v.size());
      detail::read_le(src, tmp.data(), tmp.size());
      for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<T>(tmp[i]);
    }
  }
  return {std::move(m), ch.meta};
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return checkpoint_from_bytes<T>(detail::read_file(path));
}

}  // namespace hybridkit
