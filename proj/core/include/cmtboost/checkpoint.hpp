#pragma once

#include <string>

#include "cmtboost/model.hpp"

namespace cmtboost {

// Checkpoint layout (all integers little-endian):
//   magic "CBRB" | u32 version=1 | u32 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
//               u8 rank, u32 dims[rank], raw little-endian data
//   trailer: u32 byte length, UTF-8 config echo text

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const BoostedHybridModel<T>& model, const std::string& path,
                     const std::string& config_echo = "");

/// Validates the whole file before touching the model; a format error never
/// leaves partial state. With a non-empty prefix only matching tensor names
/// are applied (the transfer-learning interface). Unknown selected names are
/// errors on a strict load, skipped otherwise.
template <typename T>
void load_checkpoint(BoostedHybridModel<T>& model, const std::string& path,
                     const std::string& prefix = "", bool strict = true);

/// Config echo stored in the trailer, without loading tensors into a model.
std::string read_checkpoint_config_echo(const std::string& path);

}  // namespace cmtboost
