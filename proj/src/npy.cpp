#include "sitspan/npy.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace sitspan::npy {

namespace {

constexpr char kMagic[6] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

int64_t descr_item_size(const std::string& descr) {
  if (descr.size() < 3) fail(ErrorCode::FormatError, "bad descr '" + descr + "'");
  int n = std::atoi(descr.c_str() + 2);
  if (n <= 0) fail(ErrorCode::FormatError, "bad descr '" + descr + "'");
  return n;
}

// Parses the tiny python-literal header dict. Only the three mandated keys
// are accepted.
void parse_header(const std::string& header, RawArray& out) {
  auto find_key = [&](const std::string& key) -> size_t {
    size_t p = header.find("'" + key + "'");
    if (p == std::string::npos)
      fail(ErrorCode::FormatError, "npy header missing key '" + key + "'");
    p = header.find(':', p);
    if (p == std::string::npos)
      fail(ErrorCode::FormatError, "npy header malformed at key '" + key + "'");
    return p + 1;
  };

  size_t p = find_key("descr");
  size_t q0 = header.find('\'', p);
  size_t q1 = header.find('\'', q0 + 1);
  if (q0 == std::string::npos || q1 == std::string::npos)
    fail(ErrorCode::FormatError, "npy descr not quoted");
  out.descr = header.substr(q0 + 1, q1 - q0 - 1);

  p = find_key("fortran_order");
  while (p < header.size() && header[p] == ' ') ++p;
  if (header.compare(p, 5, "False") != 0)
    fail(ErrorCode::FormatError, "only C-order npy arrays are supported");

  p = find_key("shape");
  size_t t0 = header.find('(', p);
  size_t t1 = header.find(')', t0);
  if (t0 == std::string::npos || t1 == std::string::npos)
    fail(ErrorCode::FormatError, "npy shape tuple malformed");
  std::string tup = header.substr(t0 + 1, t1 - t0 - 1);
  out.shape.clear();
  std::stringstream ss(tup);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    size_t a = tok.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    out.shape.push_back(std::stoll(tok.substr(a)));
  }
}

}  // namespace

RawArray load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::IndexError, "cannot open " + path.string());
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, kMagic, 6) != 0)
    fail(ErrorCode::FormatError, "not an NPY file: " + path.string());
  unsigned char ver[2];
  f.read(reinterpret_cast<char*>(ver), 2);
  if (!f || ver[0] != 1 || ver[1] != 0)
    fail(ErrorCode::FormatError, "unsupported NPY version in " + path.string());
  unsigned char lenb[2];
  f.read(reinterpret_cast<char*>(lenb), 2);
  if (!f) fail(ErrorCode::FormatError, "truncated NPY header in " + path.string());
  size_t hlen = size_t(lenb[0]) | (size_t(lenb[1]) << 8);
  std::string header(hlen, '\0');
  f.read(header.data(), std::streamsize(hlen));
  if (!f) fail(ErrorCode::FormatError, "truncated NPY header in " + path.string());

  RawArray arr;
  parse_header(header, arr);
  int64_t bytes = shape_numel(arr.shape) * descr_item_size(arr.descr);
  arr.data.resize(size_t(bytes));
  f.read(arr.data.data(), bytes);
  if (!f) fail(ErrorCode::FormatError, "truncated NPY payload in " + path.string());
  return arr;
}

void save(const std::filesystem::path& path, const RawArray& arr) {
  std::ostringstream hs;
  hs << "{'descr': '" << arr.descr << "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < arr.shape.size(); ++i) hs << arr.shape[i] << ", ";
  hs << "), }";
  std::string header = hs.str();
  size_t base = 6 + 2 + 2;
  size_t total = base + header.size() + 1;
  size_t pad = (64 - total % 64) % 64;
  header.append(pad, ' ');
  header.push_back('\n');

  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::IndexError, "cannot write " + path.string());
  f.write(kMagic, 6);
  unsigned char ver[2] = {1, 0};
  f.write(reinterpret_cast<char*>(ver), 2);
  unsigned char lenb[2] = {static_cast<unsigned char>(header.size() & 0xff),
                           static_cast<unsigned char>(header.size() >> 8)};
  f.write(reinterpret_cast<char*>(lenb), 2);
  f.write(header.data(), std::streamsize(header.size()));
  f.write(arr.data.data(), std::streamsize(arr.data.size()));
  if (!f) fail(ErrorCode::IndexError, "short write to " + path.string());
}

template <>
const char* descr_of<float>() {
  return "<f4";
}
template <>
const char* descr_of<double>() {
  return "<f8";
}
template <>
const char* descr_of<int32_t>() {
  return "<i4";
}
template <>
const char* descr_of<int64_t>() {
  return "<i8";
}

namespace {

template <typename T, typename S>
Tensor<T> convert_payload(const RawArray& arr) {
  Tensor<T> t{arr.shape};
  const S* src = reinterpret_cast<const S*>(arr.data.data());
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(src[i]);
  return t;
}

}  // namespace

template <typename T>
Tensor<T> load_as(const std::filesystem::path& path) {
  RawArray arr = load(path);
  if (arr.descr == descr_of<T>()) {
    Tensor<T> t{arr.shape};
    std::memcpy(t.data(), arr.data.data(), arr.data.size());
    return t;
  }
  if (arr.descr == "<f4") return convert_payload<T, float>(arr);
  if (arr.descr == "<f8") return convert_payload<T, double>(arr);
  if (arr.descr == "<i4") return convert_payload<T, int32_t>(arr);
  if (arr.descr == "<i8") return convert_payload<T, int64_t>(arr);
  fail(ErrorCode::FormatError,
       "unsupported dtype '" + arr.descr + "' in " + path.string());
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  RawArray arr;
  arr.shape = t.shape();
  arr.descr = descr_of<T>();
  arr.data.resize(size_t(t.numel()) * sizeof(T));
  std::memcpy(arr.data.data(), t.data(), arr.data.size());
  save(path, arr);
}

template Tensor<float> load_as<float>(const std::filesystem::path&);
template Tensor<double> load_as<double>(const std::filesystem::path&);
template Tensor<int32_t> load_as<int32_t>(const std::filesystem::path&);
template Tensor<int64_t> load_as<int64_t>(const std::filesystem::path&);
template void save_tensor<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor<double>(const std::filesystem::path&, const Tensor<double>&);
template void save_tensor<int32_t>(const std::filesystem::path&, const Tensor<int32_t>&);
template void save_tensor<int64_t>(const std::filesystem::path&, const Tensor<int64_t>&);

}  // namespace sitspan::npy
