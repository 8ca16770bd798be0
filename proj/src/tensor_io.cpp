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

#include "xtar/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "xtar/error.hpp"

namespace xtar {
namespace le {
namespace {

template <class U>
void put(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b{};
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

template <class U>
U get(std::istream& is) {
  std::array<unsigned char, sizeof(U)> b{};
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  if (is.gcount() != static_cast<std::streamsize>(b.size()))
    fail(ErrorCode::kCorrupt, "unexpected end of data");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void put_u8(std::ostream& os, std::uint8_t v) { put(os, v); }
void put_u16(std::ostream& os, std::uint16_t v) { put(os, v); }
void put_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void put_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void put_f64(std::ostream& os, double v) { put(os, std::bit_cast<std::uint64_t>(v)); }
void put_f32(std::ostream& os, float v) { put(os, std::bit_cast<std::uint32_t>(v)); }
std::uint8_t get_u8(std::istream& is) { return get<std::uint8_t>(is); }
std::uint16_t get_u16(std::istream& is) { return get<std::uint16_t>(is); }
std::uint32_t get_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t get_u64(std::istream& is) { return get<std::uint64_t>(is); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get<std::uint64_t>(is)); }
float get_f32(std::istream& is) { return std::bit_cast<float>(get<std::uint32_t>(is)); }

}  // namespace le

void write_xtds(std::ostream& os, const Tensor& t, StoredType type) {
  require(t.rank() > 0 && t.rank() < 256, ErrorCode::kShapeMismatch, "XTDS rank out of range");
  os.write("XTDS", 4);
  le::put_u16(os, kXtdsVersion);
  le::put_u8(os, static_cast<std::uint8_t>(type));
  le::put_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) le::put_u32(os, static_cast<std::uint32_t>(e));
  for (double v : t.data()) {
    if (type == StoredType::kFloat64)
      le::put_f64(os, v);
    else
      le::put_f32(os, static_cast<float>(v));
  }
}

Tensor read_xtds(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  require(is.gcount() == 4 && std::memcmp(magic, "XTDS", 4) == 0, ErrorCode::kCorrupt,
          "bad XTDS magic");
  const auto version = le::get_u16(is);
  require(version == kXtdsVersion, ErrorCode::kVersionMismatch,
          "unsupported XTDS version " + std::to_string(version));
  const auto dtype = le::get_u8(is);
  require(dtype <= 1, ErrorCode::kCorrupt, "unknown XTDS dtype " + std::to_string(dtype));
  const auto rank = le::get_u8(is);
  require(rank > 0, ErrorCode::kCorrupt, "XTDS rank 0");
  Shape shape(rank);
  for (auto& e : shape) {
    e = le::get_u32(is);
    require(e > 0, ErrorCode::kCorrupt, "XTDS zero extent");
  }
  std::vector<double> values(shape_size(shape));
  for (auto& v : values)
    v = dtype == 0 ? le::get_f64(is) : static_cast<double>(le::get_f32(is));
  return Tensor(std::move(shape), std::move(values));
}

void save_xtds(const std::filesystem::path& path, const Tensor& t, StoredType type) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + path.string());
  write_xtds(os, t, type);
  require(static_cast<bool>(os), ErrorCode::kIo, "write failed for " + path.string());
}

Tensor load_xtds(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot open " + path.string());
  try {
    return read_xtds(is);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace xtar
