#pragma once

// Weight container:
//   8 bytes   magic "IETPWGT\0"
//   u64 LE    header length in bytes
//   header    UTF-8 JSON {"format", "version", "index", "model", "tensors":[{name, shape}], "meta"}
//   payload   every tensor's values as little-endian IEEE-754 doubles, in header order

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ietp/model.hpp"

namespace ietp {

inline constexpr std::array<char, 8> kWeightMagic{'I', 'E', 'T', 'P', 'W', 'G', 'T', '\0'};
inline constexpr int kWeightFormatVersion = 1;

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (std::size_t i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), 8);
  if (!in) throw DataError("weight file truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_weights(std::ostream& out, const BaseLearner& learner,
                          const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header{{"format", "ietp-weights"},
                        {"version", kWeightFormatVersion},
                        {"index", learner.index()},
                        {"model", learner.config().to_json()},
                        {"meta", meta}};
  header["tensors"] = nlohmann::json::array();
  for (const Parameter& p : learner.parameters()) {
    header["tensors"].push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  const std::string text = header.dump();
  out.write(kWeightMagic.data(), kWeightMagic.size());
  detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter& p : learner.parameters())
    for (double v : p.value.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
}

struct LoadedWeights {
  BaseLearner learner;
  nlohmann::json meta;
};

inline LoadedWeights read_weights(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kWeightMagic) throw DataError("not an ietp weight file");
  const std::uint64_t len = detail::get_u64(in);
  if (len > (1ULL << 30)) throw DataError("weight header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("weight header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("weight header: ") + e.what());
  }
  if (!header.contains("version")) throw DataError("weight header lacks a version");
  if (header["version"].get<int>() != kWeightFormatVersion) {
    throw DataError("unsupported weight format version " + header["version"].dump());
  }
  const ModelConfig cfg = ModelConfig::from_json(header.at("model"));
  std::vector<Parameter> params;
  for (const auto& t : header.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    Tensor value(shape);
    for (double& v : value.values()) v = std::bit_cast<double>(detail::get_u64(in));
    params.emplace_back(t.at("name").get<std::string>(), std::move(value));
  }
  LoadedWeights out{BaseLearner::from_parameters(cfg, header.at("index").get<std::size_t>(), std::move(params)),
                    header.value("meta", nlohmann::json::object())};
  return out;
}

inline void save_weights(const std::string& path, const BaseLearner& learner,
                         const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_weights(out, learner, meta);
  if (!out) throw DataError("write failed for " + path);
}

inline LoadedWeights load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open weight file " + path);
  return read_weights(in);
}

}  // namespace ietp
