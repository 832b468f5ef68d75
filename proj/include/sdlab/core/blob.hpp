#pragma once

#include <sdlab/core/types.hpp>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

/// Raised when a checkpoint fails structural validation on load.
struct BlobError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Single-file container: magic, format version, JSON manifest, then raw
/// little-endian scalar payloads. The manifest is authoritative: readers
/// validate everything against it before touching the payload.
class BlobWriter {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  void add(const std::string& name, const float* data, std::size_t count) {
    add_raw(name, "f32", reinterpret_cast<const char*>(data), count, sizeof(float));
  }
  void add(const std::string& name, const double* data, std::size_t count) {
    add_raw(name, "f64", reinterpret_cast<const char*>(data), count, sizeof(double));
  }
  template <class S>
  void add(const std::string& name, const VecX<S>& v) {
    add(name, v.data(), std::size_t(v.size()));
  }

  void write(const std::string& path, ojson manifest) const {
    manifest["format_version"] = kFormatVersion;
    manifest["tensors"] = table_;
    const std::string m = manifest.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw BlobError("cannot open for writing: " + path);
    out.write("SDLB", 4);
    write_u64(out, kFormatVersion);
    write_u64(out, m.size());
    out.write(m.data(), std::streamsize(m.size()));
    out.write(payload_.data(), std::streamsize(payload_.size()));
    if (!out) throw BlobError("write failed: " + path);
  }

 private:
  static void write_u64(std::ostream& out, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = char((v >> (8 * i)) & 0xff);
    out.write(buf, 8);
  }

  void add_raw(const std::string& name, const char* dtype, const char* bytes, std::size_t count,
               std::size_t elem) {
    ojson row;
    row["name"] = name;
    row["dtype"] = dtype;
    row["count"] = count;
    row["offset"] = payload_.size();
    table_.push_back(row);
    payload_.insert(payload_.end(), bytes, bytes + count * elem);
  }

  std::vector<ojson> table_;
  std::string payload_;
};

class BlobReader {
 public:
  explicit BlobReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw BlobError("cannot open: " + path);
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SDLB", 4) != 0)
      throw BlobError("bad magic (not a checkpoint file): " + path);
    const std::uint64_t version = read_u64(in);
    if (version != BlobWriter::kFormatVersion)
      throw BlobError("unsupported format version " + std::to_string(version));
    const std::uint64_t mlen = read_u64(in);
    std::string m(mlen, '\0');
    in.read(m.data(), std::streamsize(mlen));
    if (!in) throw BlobError("truncated manifest: " + path);
    try {
      manifest_ = json::parse(m);
    } catch (const json::exception& e) {
      throw BlobError(std::string("manifest is not valid JSON: ") + e.what());
    }
    payload_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (!manifest_.contains("tensors")) throw BlobError("manifest missing tensor table");
  }

  const json& manifest() const { return manifest_; }

  template <class S>
  VecX<S> tensor(const std::string& name) const {
    for (const auto& row : manifest_["tensors"]) {
      if (row["name"] != name) continue;
      const std::string dtype = row["dtype"];
      const std::size_t count = row["count"];
      const std::size_t offset = row["offset"];
      const std::size_t elem = dtype == "f32" ? 4 : 8;
      if (offset + count * elem > payload_.size())
        throw BlobError("tensor '" + name + "' extends past end of payload");
      const Index n = Index(count);
      VecX<S> out(n);
      if (dtype == "f32") {
        const float* src = reinterpret_cast<const float*>(payload_.data() + offset);
        for (std::size_t i = 0; i < count; ++i) out[Index(i)] = S(src[i]);
      } else if (dtype == "f64") {
        const double* src = reinterpret_cast<const double*>(payload_.data() + offset);
        for (std::size_t i = 0; i < count; ++i) out[Index(i)] = S(src[i]);
      } else {
        throw BlobError("tensor '" + name + "' has unknown dtype " + dtype);
      }
      return out;
    }
    throw BlobError("tensor not found: " + name);
  }

  bool has_tensor(const std::string& name) const {
    for (const auto& row : manifest_["tensors"])
      if (row["name"] == name) return true;
    return false;
  }

 private:
  static std::uint64_t read_u64(std::istream& in) {
    char buf[8];
    in.read(buf, 8);
    if (!in) throw BlobError("truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf[i])) << (8 * i);
    return v;
  }

  json manifest_;
  std::string payload_;
};

}  // namespace sdlab
