#include "angie/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "angie/errors.hpp"

namespace angie::nn {

namespace {

constexpr char kMagic[] = "ANGIECKPT";

std::uint32_t ToLittle(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

}  // namespace

void SaveCheckpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["kind"] = ckpt.kind;
  manifest["config_digest"] = ckpt.config_digest;
  manifest["config"] = ckpt.config;
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.params.entries()) {
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", t.shape()},
                                   {"offset", offset},
                                   {"trainable", ckpt.params.IsTrainable(name)}});
    offset += t.numel();
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write checkpoint " + path);
  out << kMagic << "\n" << text.size() << "\n" << text;
  for (const auto& [name, t] : ckpt.params.entries()) {
    for (double v : t.data()) {
      const auto f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      bits = ToLittle(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  if (!out) throw ValidationError("short write to checkpoint " + path);
}

Checkpoint LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  std::string magic, len_line;
  std::getline(in, magic);
  std::getline(in, len_line);
  if (magic != kMagic) throw ValidationError(path + " is not a checkpoint file");
  std::size_t len = 0;
  try {
    len = std::stoul(len_line);
  } catch (const std::exception&) {
    throw ValidationError(path + ": corrupt manifest length");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError(path + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": invalid manifest: " + e.what());
  }
  if (manifest.value("format_version", -1) != kCheckpointFormatVersion) {
    throw ValidationError(path + ": unsupported checkpoint format version");
  }
  Checkpoint ckpt;
  ckpt.kind = manifest.at("kind").get<std::string>();
  ckpt.config_digest = manifest.at("config_digest").get<std::string>();
  ckpt.config = manifest.at("config");
  ckpt.meta = manifest.at("meta");
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    Tensor& t = ckpt.params.Add(name, shape, entry.at("trainable").get<bool>());
    for (double& v : t.mutable_data()) {
      std::uint32_t bits;
      in.read(reinterpret_cast<char*>(&bits), sizeof bits);
      if (!in) throw ValidationError(path + ": truncated tensor payload at " + name);
      bits = ToLittle(bits);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      v = f;
    }
  }
  return ckpt;
}

void RoundToFloat32(ParameterSet& params) {
  for (auto& [name, t] : params.entries()) {
    for (double& v : t.mutable_data()) v = static_cast<float>(v);
  }
}

}  // namespace angie::nn
