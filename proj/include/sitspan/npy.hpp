#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sitspan/tensor.hpp"

namespace sitspan::npy {

// Minimal NPY v1.0 codec (little-endian C-order arrays only). The header is
// parsed and emitted bit-exactly: magic "\x93NUMPY", version 1.0, uint16
// header length, python-literal dict {'descr','fortran_order','shape'} padded
// with spaces to a 64-byte boundary and terminated by '\n'.

struct RawArray {
  Shape shape;
  std::string descr;       // e.g. "<f4"
  std::vector<char> data;  // raw little-endian payload
};

RawArray load(const std::filesystem::path& path);
void save(const std::filesystem::path& path, const RawArray& arr);

template <typename T>
const char* descr_of();

template <typename T>
Tensor<T> load_as(const std::filesystem::path& path);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

}  // namespace sitspan::npy
