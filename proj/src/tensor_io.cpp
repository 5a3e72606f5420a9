// SPDX-License-Identifier: Apache-2.0
#include "sevnet/tensor_io.hpp"

#include <fstream>
#include <iterator>
#include <stdexcept>

#include "sevnet/byte_io.hpp"

namespace sevnet {

namespace {
constexpr char kMagic[4] = {'S', 'E', 'V', 'T'};
}

void write_tensor_dump(std::ostream& os, const Tensor& t) {
  std::vector<std::uint8_t> buf(kMagic, kMagic + 4);
  bytes::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) bytes::put_u64(buf, static_cast<std::uint64_t>(e));
  for (double v : t.data()) bytes::put_f64(buf, v);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("tensor dump: write failed");
}

Tensor read_tensor_dump(std::istream& is) {
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
  bytes::Reader r(buf.data(), buf.size());
  try {
    if (r.raw(4) != std::string(kMagic, 4))
      throw std::runtime_error("tensor dump: bad magic");
    const auto rank = r.u32();
    if (rank < 1 || rank > 5)
      throw std::runtime_error("tensor dump: rank " + std::to_string(rank) +
                               " out of range");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::int64_t>(r.u64());
    std::vector<double> data(static_cast<std::size_t>(numel(shape)));
    for (auto& v : data) v = r.f64();
    if (r.remaining() != 0)
      throw std::runtime_error("tensor dump: trailing bytes");
    return Tensor::from_data(std::move(shape), std::move(data));
  } catch (const bytes::TruncatedInput& e) {
    throw std::runtime_error(std::string("tensor dump: truncated (") + e.what() + ")");
  }
}

void save_tensor_dump(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor_dump(os, t);
}

Tensor load_tensor_dump(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor_dump(is);
}

}  // namespace sevnet
