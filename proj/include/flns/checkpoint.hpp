#pragma once

#include <cstdint>
#include <string>

#include "flns/model.hpp"

namespace flns {

// Layout: "FLNSMODL", u32 version, u32-length-prefixed config JSON,
// tokenizer table (u32 count; per entry u8 special flag + length-prefixed
// text), then every parameter tensor as row-major little-endian f32 in
// Weights::visit order.
inline constexpr std::uint32_t kModelFormatVersion = 2;

void save_model(const TransformerModel& model, const std::string& path);
TransformerModel load_model(const std::string& path);

std::vector<char> serialize_model(const TransformerModel& model);
TransformerModel deserialize_model(std::vector<char> bytes);

}  // namespace flns
