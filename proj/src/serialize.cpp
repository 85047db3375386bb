#include "sv/serialize.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sv::ser {

namespace {
constexpr char kMagic[8] = {'S', 'V', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const std::vector<NamedTensor>& tensors) {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& nt : tensors) {
    header["tensors"].push_back({{"name", nt.name}, {"shape", nt.t.shape()}});
  }
  const std::string hs = header.dump();

  // Write to a temp file then rename, so a crash never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(kMagic, sizeof(kMagic));
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), (std::streamsize)hs.size());
    for (const auto& nt : tensors)
      f.write(reinterpret_cast<const char*>(nt.t.data()),
              (std::streamsize)(nt.t.numel() * sizeof(float)));
    if (!f) throw std::runtime_error("short write on " + tmp);
  }
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  f.read(hs.data(), (std::streamsize)hlen);
  if (!f) throw std::runtime_error("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  Checkpoint ck;
  ck.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()), (std::streamsize)(t.numel() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated checkpoint blob '" + name + "' in " + path);
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
  uint64_t h = seed;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ull;
  return h;
}

std::string config_hash(const nlohmann::json& config) {
  // dump() on an object emits keys in sorted order (nlohmann stores sorted).
  const std::string s = config.dump();
  const uint64_t h = fnv1a(s.data(), s.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

std::vector<NamedTensor> registry_tensors(const nn::ParamRegistry& reg) {
  std::vector<NamedTensor> out;
  for (const auto& it : reg.items()) out.push_back({it.name, it.var.value()});
  return out;
}

void load_into_registry(const Checkpoint& ck, nn::ParamRegistry& reg, bool strict) {
  for (auto& it : reg.items()) {
    auto found = ck.tensors.find(it.name);
    if (found == ck.tensors.end()) {
      if (strict) throw std::runtime_error("checkpoint missing parameter " + it.name);
      continue;
    }
    if (found->second.shape() != it.var.value().shape())
      throw std::runtime_error("checkpoint shape mismatch for " + it.name + ": " +
                               found->second.shape_str() + " vs " + it.var.value().shape_str());
    std::copy(found->second.data(), found->second.data() + found->second.numel(),
              it.var.node()->value.data());
  }
}

void check_config_hash(const Checkpoint& ck, const std::string& expected, bool force) {
  const std::string got = ck.meta.value("config_hash", "");
  if (got != expected && !force)
    throw std::runtime_error("config hash mismatch: checkpoint has '" + got + "', expected '" +
                             expected + "' (use --force to override)");
}

}  // namespace sv::ser
