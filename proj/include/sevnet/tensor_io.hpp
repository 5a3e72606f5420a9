// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>

#include "sevnet/tensor.hpp"

namespace sevnet {

// Tensor dump layout (all little-endian):
//   "SEVT"            4-byte magic
//   uint32 rank       1..5
//   int64  extent[rank]
//   float64 value[product of extents]

void write_tensor_dump(std::ostream& os, const Tensor& t);
Tensor read_tensor_dump(std::istream& is);

void save_tensor_dump(const std::string& path, const Tensor& t);
Tensor load_tensor_dump(const std::string& path);

}  // namespace sevnet
