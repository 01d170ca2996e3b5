#pragma once

// Binary parameter checkpoints: a versioned header, a JSON metadata blob,
// named float32 tensors, and a trailing FNV-1a 64 checksum of everything
// before it.

#include "recon3d/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

inline constexpr char kCheckpointMagic[8] = {'R', '3', 'D', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

namespace detail {

class ByteWriter {
 public:
  template <class V>
  void pod(const V& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& buf, std::size_t end, std::string path) : buf_(buf), end_(end), path_(std::move(path)) {}
  template <class V>
  V pod() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw std::runtime_error("checkpoint " + path_ + ": truncated");
  }
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

}  // namespace detail

struct Checkpoint {
  std::string tag;  // e.g. "teacher-v1", "model-v1"
  nlohmann::json meta;
  std::vector<std::pair<std::string, Mat<float>>> tensors;
  std::uint64_t checksum = 0;

  const Mat<float>& tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
      if (n == name) return m;
    }
    throw std::runtime_error("checkpoint: missing tensor " + name);
  }
};

template <class T>
Checkpoint make_checkpoint(std::string tag, nlohmann::json meta, const ParamSet<T>& params) {
  Checkpoint ck;
  ck.tag = std::move(tag);
  ck.meta = std::move(meta);
  for (const auto& p : params.all()) ck.tensors.emplace_back(p.name, p.value.template cast<float>());
  return ck;
}

// Returns the content checksum.
inline std::uint64_t save_checkpoint(const std::string& path, Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.pod(kCheckpointVersion);
  w.str(ck.tag);
  w.str(ck.meta.dump());
  w.pod(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, m] : ck.tensors) {
    w.str(name);
    w.pod(static_cast<std::uint32_t>(m.rows()));
    w.pod(static_cast<std::uint32_t>(m.cols()));
    w.bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()));
  }
  ck.checksum = fnv1a64(w.buffer().data(), w.buffer().size());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  f.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  f.write(reinterpret_cast<const char*>(&ck.checksum), sizeof(ck.checksum));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path);
  return ck.checksum;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kCheckpointMagic) + sizeof(std::uint64_t)) throw std::runtime_error("checkpoint " + path + ": too short");
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  if (fnv1a64(buf.data(), body) != stored) throw std::runtime_error("checkpoint " + path + ": checksum mismatch");
  detail::ByteReader r(buf, body, path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw std::runtime_error("checkpoint " + path + ": bad magic");
  if (r.pod<std::uint32_t>() != kCheckpointVersion) throw std::runtime_error("checkpoint " + path + ": unsupported version");
  Checkpoint ck;
  ck.tag = r.str();
  ck.meta = nlohmann::json::parse(r.str());
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const auto rows = r.pod<std::uint32_t>();
    const auto cols = r.pod<std::uint32_t>();
    Mat<float> m(rows, cols);
    r.bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()));
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  ck.checksum = stored;
  return ck;
}

template <class T>
void load_params(const Checkpoint& ck, ParamSet<T>& params) {
  for (auto& p : params.all()) {
    const Mat<float>& m = ck.tensor(p.name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    }
    p.value = m.template cast<T>();
  }
}

}  // namespace recon3d
