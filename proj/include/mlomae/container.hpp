#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "mlomae/types.hpp"

namespace mlomae {

// Binary tensor container shared by checkpoints and dataset bundles.
//
//   "MLOM"                        4 bytes
//   version                       u32 LE
//   tensor count                  u32 LE
//   per tensor, in key order:
//     name length                 u32 LE
//     name bytes
//     rank                        u32 LE (always 2 here)
//     dims                        u32 LE each
//     values                      f64 LE, row-major
inline constexpr std::uint32_t kContainerVersion = 1;

void write_container(std::ostream& os, const TensorMap& tensors);
TensorMap read_container(std::istream& is);

void save_container(const std::string& path, const TensorMap& tensors);
TensorMap load_container(const std::string& path);

}  // namespace mlomae
