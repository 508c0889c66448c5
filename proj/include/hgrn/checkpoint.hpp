// SPDX-License-Identifier: Apache-2.0
//
// Flat binary tensor archive.
//
//   magic "HGT1" | version u32 | count u32
//   per tensor: name_len u32 | name bytes (UTF-8) | rank u32 | dims u64[rank] | fp64[numel]
//
// All integers and doubles are little-endian regardless of host order.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "hgrn/tensor.hpp"

namespace hgrn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_tensors(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_tensors(std::istream& in);

void save_tensors(const std::string& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::string& path);

}  // namespace hgrn
