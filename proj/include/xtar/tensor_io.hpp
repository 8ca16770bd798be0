// Copyright 2026 The xtar Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "xtar/tensor.hpp"

namespace xtar {

// XTDS tensor files: "XTDS", u16 version, u8 dtype, u8 rank, rank x u32
// extents, then row-major values. All little-endian.
enum class StoredType : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

inline constexpr std::uint16_t kXtdsVersion = 1;

void write_xtds(std::ostream& os, const Tensor& t, StoredType type = StoredType::kFloat64);
Tensor read_xtds(std::istream& is);

void save_xtds(const std::filesystem::path& path, const Tensor& t,
               StoredType type = StoredType::kFloat64);
Tensor load_xtds(const std::filesystem::path& path);

// Little-endian primitives shared with the checkpoint format.
namespace le {
void put_u8(std::ostream& os, std::uint8_t v);
void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
void put_f64(std::ostream& os, double v);
void put_f32(std::ostream& os, float v);
// Readers throw kCorrupt on short reads.
std::uint8_t get_u8(std::istream& is);
std::uint16_t get_u16(std::istream& is);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
double get_f64(std::istream& is);
float get_f32(std::istream& is);
}  // namespace le

}  // namespace xtar
