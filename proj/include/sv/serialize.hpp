#pragma once

// Checkpoint container: a magic string, a JSON header (metadata + tensor
// directory), then raw float32 blobs in directory order. Loaders verify the
// embedded config hash unless told not to.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sv/nn.hpp"
#include "sv/tensor.hpp"

namespace sv::ser {

struct NamedTensor {
  std::string name;
  Tensor t;
};

struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const std::vector<NamedTensor>& tensors);
Checkpoint load_checkpoint(const std::string& path);

uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 1469598103934665603ull);

// Hash of the canonical (sorted-key, no-whitespace) JSON dump, hex-encoded.
std::string config_hash(const nlohmann::json& config);

std::vector<NamedTensor> registry_tensors(const nn::ParamRegistry& reg);

// Copies checkpoint tensors into registry parameters by name. In strict mode
// every registry parameter must be present with a matching shape.
void load_into_registry(const Checkpoint& ck, nn::ParamRegistry& reg, bool strict = true);

// Throws unless ck.meta["config_hash"] equals `expected` (or force is set).
void check_config_hash(const Checkpoint& ck, const std::string& expected, bool force);

}  // namespace sv::ser
