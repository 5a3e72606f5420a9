// SPDX-License-Identifier: Apache-2.0
#include "sevnet/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <vector>

#include "sevnet/byte_io.hpp"
#include "sevnet/config.hpp"
#include "sevnet/trainer.hpp"

namespace sevnet {

const char* to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::io: return "checkpoint io error";
    case CheckpointErrorKind::truncated: return "checkpoint truncated";
    case CheckpointErrorKind::bad_magic: return "not a checkpoint";
    case CheckpointErrorKind::version_mismatch: return "checkpoint version mismatch";
    case CheckpointErrorKind::checksum_mismatch: return "checkpoint checksum mismatch";
    case CheckpointErrorKind::malformed: return "checkpoint malformed";
  }
  return "checkpoint error";
}

namespace {

constexpr char kMagic[8] = {'S', 'E', 'V', 'C', 'K', 'P', 'T', '\0'};

struct Record {
  Shape shape;
  std::vector<double> values;
};

struct Contents {
  std::string config_text;
  std::vector<std::pair<std::string, Record>> records;
};

void put_record(std::vector<std::uint8_t>& out, const std::string& name, const Shape& shape,
                std::span<const double> values) {
  bytes::put_string(out, name);
  bytes::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) bytes::put_u64(out, static_cast<std::uint64_t>(e));
  for (double v : values) bytes::put_f64(out, v);
}

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

Contents read_contents(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path);
  const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kMagic)
    throw CheckpointError(CheckpointErrorKind::truncated, path + " is shorter than the header");
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(CheckpointErrorKind::bad_magic, path);

  bytes::Reader head(buf.data() + sizeof kMagic, buf.size() - sizeof kMagic);
  std::uint32_t version = 0;
  std::uint64_t payload_size = 0;
  try {
    version = head.u32();
    if (version != kCheckpointVersion)
      throw CheckpointError(CheckpointErrorKind::version_mismatch,
                            path + " has version " + std::to_string(version) +
                                ", expected " + std::to_string(kCheckpointVersion));
    payload_size = head.u64();
  } catch (const bytes::TruncatedInput&) {
    throw CheckpointError(CheckpointErrorKind::truncated, path + " ends inside the header");
  }
  const std::size_t offset = sizeof kMagic + 12;
  if (buf.size() - offset < payload_size || buf.size() - offset - payload_size < 4)
    throw CheckpointError(CheckpointErrorKind::truncated,
                          path + " holds " + std::to_string(buf.size()) + " bytes, header declares " +
                              std::to_string(offset + payload_size + 4));
  if (buf.size() != offset + payload_size + 4)
    throw CheckpointError(CheckpointErrorKind::malformed, path + " has trailing bytes");

  const std::uint8_t* payload = buf.data() + offset;
  bytes::Reader tail(payload + payload_size, 4);
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc_of(payload, payload_size);
  if (stored != actual)
    throw CheckpointError(CheckpointErrorKind::checksum_mismatch, path);

  Contents c;
  try {
    bytes::Reader r(payload, payload_size);
    c.config_text = r.string();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = r.string();
      Record rec;
      const std::uint32_t rank = r.u32();
      if (rank > 5)
        throw CheckpointError(CheckpointErrorKind::malformed, "record " + name + " has rank " +
                                                                  std::to_string(rank));
      std::uint64_t n = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        const auto e = r.u64();
        rec.shape.push_back(static_cast<std::int64_t>(e));
        n *= e;
      }
      if (n * 8 > r.remaining())
        throw CheckpointError(CheckpointErrorKind::malformed, "record " + name + " overruns payload");
      rec.values.resize(n);
      for (auto& v : rec.values) v = r.f64();
      c.records.emplace_back(std::move(name), std::move(rec));
    }
    if (r.remaining() != 0)
      throw CheckpointError(CheckpointErrorKind::malformed, "unused payload bytes");
  } catch (const bytes::TruncatedInput& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, e.what());
  }
  return c;
}

const Record& expect_record(const Contents& c, std::size_t& cursor, const std::string& name,
                            std::size_t count) {
  if (cursor >= c.records.size())
    throw CheckpointError(CheckpointErrorKind::malformed, "missing record " + name);
  const auto& [stored, rec] = c.records[cursor++];
  if (stored != name)
    throw CheckpointError(CheckpointErrorKind::malformed,
                          "expected record " + name + ", found " + stored);
  if (rec.values.size() != count)
    throw CheckpointError(CheckpointErrorKind::malformed,
                          "record " + name + " holds " + std::to_string(rec.values.size()) +
                              " values, model expects " + std::to_string(count));
  return rec;
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path, const Sgd* optimizer) {
  std::vector<std::uint8_t> payload;
  bytes::put_string(payload, network_config_doc(model.config()).to_text());
  const auto params = model.parameters();
  const auto buffers = model.buffers();
  std::uint32_t count = static_cast<std::uint32_t>(params.size() + buffers.size());
  if (optimizer) {
    if (optimizer->params().size() != params.size())
      throw std::invalid_argument("save_checkpoint: optimizer does not match model");
    count += static_cast<std::uint32_t>(params.size());
  }
  bytes::put_u32(payload, count);
  for (const auto& p : params) put_record(payload, p.name, p.tensor.shape(), p.tensor.data());
  for (const auto& b : buffers)
    put_record(payload, b.name, {static_cast<std::int64_t>(b.values->size())}, *b.values);
  if (optimizer)
    for (std::size_t i = 0; i < params.size(); ++i)
      put_record(payload, params[i].name + ".velocity", params[i].tensor.shape(),
                 optimizer->velocity()[i]);

  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
  bytes::put_u32(out, kCheckpointVersion);
  bytes::put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  bytes::put_u32(out, crc_of(payload.data(), payload.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrorKind::io, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError(CheckpointErrorKind::io, "write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  const Contents c = read_contents(path);
  NetworkConfig config;
  try {
    config = network_config_from_doc(KeyValueDoc::parse(c.config_text, path));
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("config block: ") + e.what());
  }
  Model model = Model::uninitialized(config);
  std::size_t cursor = 0;
  for (auto& p : model.parameters()) {
    const auto& rec = expect_record(c, cursor, p.name, static_cast<std::size_t>(p.tensor.numel()));
    if (rec.shape != p.tensor.shape())
      throw CheckpointError(CheckpointErrorKind::malformed, "record " + p.name + " has shape " +
                                                                to_string(rec.shape));
    std::copy(rec.values.begin(), rec.values.end(), p.tensor.mutable_data().begin());
  }
  for (auto& b : model.buffers()) {
    const auto& rec = expect_record(c, cursor, b.name, b.values->size());
    *b.values = rec.values;
  }
  return model;
}

void load_optimizer_state(const std::string& path, Sgd& optimizer) {
  const Contents c = read_contents(path);
  std::map<std::string, const Record*> by_name;
  for (const auto& [name, rec] : c.records) by_name[name] = &rec;
  const auto& params = optimizer.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = params[i].name + ".velocity";
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw CheckpointError(CheckpointErrorKind::malformed, "missing record " + name);
    if (it->second->values.size() != optimizer.velocity()[i].size())
      throw CheckpointError(CheckpointErrorKind::malformed, "record " + name + " has wrong size");
    optimizer.velocity()[i] = it->second->values;
  }
}

}  // namespace sevnet
