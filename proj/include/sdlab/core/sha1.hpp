#pragma once

#include <cstdint>
#include <string>

namespace sdlab {

/// SHA-1 digest as lowercase hex.
std::string sha1_hex(const std::string& bytes);

/// Git-style blob hash: sha1("blob <len>\0" + content).
std::string git_blob_hash(const std::string& content);

/// Hash of a file's content in git blob form; throws on IO error.
std::string git_blob_hash_file(const std::string& path);

}  // namespace sdlab
