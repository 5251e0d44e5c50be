#pragma once

#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "lrsa/errors.hpp"
#include "lrsa/model.hpp"

// Checkpoint format: magic "LRSA", u32 version, u64 header length, JSON
// header (model config + tensor directory with shapes), then raw
// little-endian tensor payloads in directory order.

namespace lrsa::checkpoint {

using json = nlohmann::ordered_json;

template <typename T>
void save(std::ostream& os, model::ModelParams<T>& m) {
  json header;
  header["config"] = {{"vocab", m.cfg.vocab},       {"d_model", m.cfg.d_model},
                      {"heads", m.cfg.heads},       {"kv_heads", m.cfg.kv_heads},
                      {"head_dim", m.cfg.head_dim}, {"layers", m.cfg.layers},
                      {"mlp_ratio", m.cfg.mlp_ratio}, {"rope_base", m.cfg.rope_base},
                      {"norm_eps", m.cfg.norm_eps}};
  header["scalar_bytes"] = sizeof(T);
  json dir = json::array();
  for (auto& [name, t] : m.named_parameters())
    dir.push_back({{"name", name}, {"shape", t->shape}});
  header["tensors"] = dir;
  const std::string hs = header.dump();

  os.write("LRSA", 4);
  const std::uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t hlen = hs.size();
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (auto& [name, t] : m.named_parameters())
    os.write(reinterpret_cast<const char*>(t->ptr()),
             static_cast<std::streamsize>(t->numel() * sizeof(T)));
}

template <typename T>
model::ModelParams<T> load(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, "LRSA", 4) != 0) throw ConfigError("checkpoint: bad magic");
  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1)
    throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
  std::uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  json header = json::parse(hs);
  if (header.at("scalar_bytes").get<std::size_t>() != sizeof(T))
    throw ConfigError("checkpoint: scalar width does not match this build");

  model::ModelConfig cfg;
  const auto& c = header.at("config");
  cfg.vocab = c.at("vocab").get<i64>();
  cfg.d_model = c.at("d_model").get<i64>();
  cfg.heads = c.at("heads").get<i64>();
  cfg.kv_heads = c.at("kv_heads").get<i64>();
  cfg.head_dim = c.at("head_dim").get<i64>();
  cfg.layers = c.at("layers").get<i64>();
  cfg.mlp_ratio = c.at("mlp_ratio").get<i64>();
  cfg.rope_base = c.at("rope_base").get<double>();
  cfg.norm_eps = c.at("norm_eps").get<double>();

  Rng scratch(0);
  model::ModelParams<T> m = model::ModelParams<T>::init(cfg, scratch);
  auto named = m.named_parameters();
  const auto& dir = header.at("tensors");
  if (dir.size() != named.size()) throw ConfigError("checkpoint: tensor directory mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = dir.at(i);
    if (entry.at("name").get<std::string>() != named[i].first)
      throw ConfigError("checkpoint: tensor order mismatch at " + named[i].first);
    Shape shape = entry.at("shape").get<Shape>();
    if (shape != named[i].second->shape)
      throw ConfigError("checkpoint: shape mismatch for " + named[i].first);
    is.read(reinterpret_cast<char*>(named[i].second->ptr()),
            static_cast<std::streamsize>(named[i].second->numel() * sizeof(T)));
  }
  if (!is) throw ConfigError("checkpoint: truncated stream");
  return m;
}

}  // namespace lrsa::checkpoint
