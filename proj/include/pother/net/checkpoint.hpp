#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace pother::net {

/// Single-file checkpoint: 8-byte magic, little-endian u64 header length, JSON header, then the
/// libtorch archive of the module parameters and buffers. The JSON header is the compatibility
/// contract; the blob layout follows the libtorch version in use.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, torch::nn::Module& module);

nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

/// Loads parameters into an already-constructed module and returns the header.
nlohmann::json load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module);

}  // namespace pother::net
