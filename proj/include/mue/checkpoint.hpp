#pragma once

// Binary checkpoints. Layout, all integers little-endian:
//
//   "MUE1"                         4-byte magic
//   u32 version                    currently 1
//   u32 tensor count
//   per tensor: u32 name length, UTF-8 name, u32 rows, u32 cols
//   f64 payload                    every tensor's values in manifest order
//   u64 checksum                   sum of payload bytes mod 2^64
//
// Tensors appear in the fixed parameter visiting order, so saving the same
// parameters always produces the same bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mue/data.hpp"
#include "mue/model.hpp"

namespace mue {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagicError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct BadVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct ChecksumError : CheckpointError {
  using CheckpointError::CheckpointError;
};
/// Malformed or truncated structure.
struct CheckpointFormatError : CheckpointError {
  using CheckpointError::CheckpointError;
};
/// Tensor names or shapes disagree with the expected model configuration.
struct CheckpointShapeError : CheckpointError {
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'U', 'E', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw CheckpointFormatError(std::string("checkpoint truncated while reading ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelParams& params) {
  std::string header(kCheckpointMagic, 4);
  detail::put_u32(header, kCheckpointVersion);
  std::uint32_t count = 0;
  zip_visit([&count](const std::string&, const Tensor2D&) { ++count; }, params.weights);
  detail::put_u32(header, count);
  std::string payload;
  zip_visit(
      [&](const std::string& name, const Tensor2D& t) {
        detail::put_u32(header, static_cast<std::uint32_t>(name.size()));
        header += name;
        detail::put_u32(header, static_cast<std::uint32_t>(t.rows()));
        detail::put_u32(header, static_cast<std::uint32_t>(t.cols()));
        for (double v : t.values()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
      },
      params.weights);
  std::uint64_t checksum = 0;
  for (char c : payload) checksum += static_cast<unsigned char>(c);
  std::string out = std::move(header);
  out += payload;
  detail::put_u64(out, checksum);
  return out;
}

/// Parses checkpoint bytes and checks them against the expected configuration.
inline ModelParams parse_checkpoint(const std::string& bytes, const ModelConfig& cfg) {
  cfg.validate();
  detail::ByteReader in(bytes);
  if (in.remaining() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw BadMagicError("checkpoint: bad magic (expected MUE1)");
  }
  in.text(4, "magic");
  const auto version = in.uint(4, "version");
  if (version != kCheckpointVersion) {
    throw BadVersionError("checkpoint: unsupported format version " + std::to_string(version));
  }
  struct Entry {
    std::string name;
    std::size_t rows, cols;
  };
  const auto count = in.uint(4, "tensor count");
  std::vector<Entry> manifest;
  std::size_t payload_values = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = in.uint(4, "tensor name length");
    Entry e{in.text(len, "tensor name"), 0, 0};
    e.rows = in.uint(4, "tensor rows");
    e.cols = in.uint(4, "tensor cols");
    if (e.cols != 0 && e.rows > in.remaining() / 8 / e.cols) {
      throw CheckpointFormatError("checkpoint: tensor '" + e.name + "' is larger than the file");
    }
    payload_values += e.rows * e.cols;
    manifest.push_back(std::move(e));
  }
  if (in.remaining() != payload_values * 8 + 8) {
    throw CheckpointFormatError("checkpoint: expected " + std::to_string(payload_values * 8 + 8) +
                                " bytes of payload and checksum, found " + std::to_string(in.remaining()));
  }
  const std::size_t payload_start = in.pos();
  std::uint64_t checksum = 0;
  for (std::size_t i = payload_start; i < payload_start + payload_values * 8; ++i) {
    checksum += static_cast<unsigned char>(bytes[i]);
  }
  in.text(payload_values * 8, "payload");
  if (in.uint(8, "checksum") != checksum) throw ChecksumError("checkpoint: checksum mismatch");

  ModelParams params{cfg, zero_weights(cfg)};
  std::size_t index = 0;
  zip_visit(
      [&](const std::string& name, Tensor2D& t) {
        if (index >= manifest.size()) throw CheckpointShapeError("checkpoint: tensor '" + name + "' is missing");
        const Entry& e = manifest[index++];
        if (e.name != name) {
          throw CheckpointShapeError("checkpoint: expected tensor '" + name + "', found '" + e.name + "'");
        }
        if (e.rows != t.rows() || e.cols != t.cols()) {
          throw CheckpointShapeError("checkpoint: tensor '" + name + "' has shape (" + std::to_string(e.rows) + "x" +
                                     std::to_string(e.cols) + "), expected " + t.shape_str());
        }
      },
      params.weights);
  if (index != manifest.size()) {
    throw CheckpointShapeError("checkpoint: unexpected extra tensor '" + manifest[index].name + "'");
  }

  detail::ByteReader values(bytes);
  values.text(payload_start, "header");
  zip_visit(
      [&values](const std::string&, Tensor2D& t) {
        for (double& v : t.values()) v = std::bit_cast<double>(values.uint(8, "payload"));
      },
      params.weights);
  return params;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  const std::string bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ModelParams load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  return parse_checkpoint(read_file_bytes(path), cfg);
}

}  // namespace mue
