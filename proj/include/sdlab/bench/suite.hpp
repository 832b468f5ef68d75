#pragma once

#include <sdlab/core/blob.hpp>
#include <sdlab/scenes/dataset.hpp>
#include <sdlab/scenes/scene.hpp>
#include <sdlab/scenes/tasks.hpp>

#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab::bench {

using scenes::EditType;

/// One editing scenario. The wire fields mirror the generated-benchmark
/// schema (path / source_prompt / target_prompt / type); the toy-only fields
/// tie an entry back to a concrete scene so it can be re-rendered on demand.
struct BenchEntry {
  std::string path;
  std::string source_prompt;
  std::string target_prompt;
  EditType type = EditType::texturing;
  std::string instruction;  // reserved; carried through but never consumed

  std::optional<scenes::PromptCode> source_code;
  std::optional<scenes::PromptCode> target_code;
  std::optional<scenes::SceneSpec> spec;

  ojson extra = ojson::object();  // unknown fields, preserved opaquely

  std::string id() const { return path + "#" + scenes::edit_type_name(type); }

  bool operator==(const BenchEntry& o) const {
    return path == o.path && source_prompt == o.source_prompt &&
           target_prompt == o.target_prompt && type == o.type &&
           instruction == o.instruction && source_code == o.source_code &&
           target_code == o.target_code &&
           ((!spec && !o.spec) ||
            (spec && o.spec && scenes::spec_to_json(*spec) == scenes::spec_to_json(*o.spec))) &&
           extra == o.extra;
  }
};

struct BenchSuite {
  static constexpr int kSchemaVersion = 1;
  std::string name = "suite";
  int schema_version = kSchemaVersion;
  std::vector<BenchEntry> entries;

  bool operator==(const BenchSuite&) const = default;
};

/// Parse error that names the offending entry and field.
struct BenchParseError : std::runtime_error {
  int entry_index = -1;
  std::string field;

  BenchParseError(int index, std::string field_, const std::string& what)
      : std::runtime_error("entry " + std::to_string(index) + ": " + what),
        entry_index(index),
        field(std::move(field_)) {}
};

namespace detail {

inline const char* kKnownFields[] = {"path",        "source_prompt", "target_prompt", "type",
                                     "instruction", "source_code",   "target_code",   "spec"};

inline bool is_known_field(const std::string& key) {
  for (const char* k : kKnownFields)
    if (key == k) return true;
  return false;
}

inline std::string require_string(const ojson& obj, const char* field, int index) {
  if (!obj.contains(field)) throw BenchParseError(index, field, "missing field '" + std::string(field) + "'");
  if (!obj.at(field).is_string())
    throw BenchParseError(index, field, "field '" + std::string(field) + "' must be a string");
  std::string v = obj.at(field).get<std::string>();
  if (v.empty()) throw BenchParseError(index, field, "field '" + std::string(field) + "' is empty");
  return v;
}

/// Splits text into top-level JSON objects, tolerating separators (commas,
/// whitespace, trailing commas) between them — the generated replies come as
/// concatenated objects rather than a bracketed array.
inline std::vector<std::string> split_top_level_objects(const std::string& text) {
  std::vector<std::string> out;
  int depth = 0;
  bool in_string = false, escaped = false;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (in_string) {
      if (escaped)
        escaped = false;
      else if (ch == '\\')
        escaped = true;
      else if (ch == '"')
        in_string = false;
      continue;
    }
    if (ch == '"') {
      in_string = true;
    } else if (ch == '{') {
      if (depth == 0) start = i;
      ++depth;
    } else if (ch == '}') {
      --depth;
      if (depth < 0) throw BenchParseError(int(out.size()), "", "unbalanced '}' in input");
      if (depth == 0) out.push_back(text.substr(start, i - start + 1));
    }
  }
  if (depth != 0 || in_string)
    throw BenchParseError(int(out.size()), "", "unterminated JSON object in input");
  return out;
}

}  // namespace detail

inline ojson entry_to_json(const BenchEntry& e) {
  ojson j;
  j["path"] = e.path;
  j["source_prompt"] = e.source_prompt;
  j["target_prompt"] = e.target_prompt;
  j["type"] = scenes::edit_type_name(e.type);
  if (!e.instruction.empty()) j["instruction"] = e.instruction;
  if (e.source_code) j["source_code"] = e.source_code->value;
  if (e.target_code) j["target_code"] = e.target_code->value;
  if (e.spec) j["spec"] = scenes::spec_to_json(*e.spec);
  for (const auto& [k, v] : e.extra.items()) j[k] = v;
  return j;
}

inline BenchEntry entry_from_json(const ojson& obj, int index) {
  if (!obj.is_object()) throw BenchParseError(index, "", "entry is not a JSON object");
  BenchEntry e;
  e.path = detail::require_string(obj, "path", index);
  e.source_prompt = detail::require_string(obj, "source_prompt", index);
  e.target_prompt = detail::require_string(obj, "target_prompt", index);
  const std::string type_s = detail::require_string(obj, "type", index);
  try {
    e.type = scenes::edit_type_from_name(type_s);
  } catch (const std::invalid_argument&) {
    throw BenchParseError(index, "type", "invalid type '" + type_s + "'");
  }
  if (obj.contains("instruction")) e.instruction = obj.at("instruction").get<std::string>();
  try {
    if (obj.contains("source_code"))
      e.source_code = scenes::PromptCode{obj.at("source_code").get<int>()};
    if (obj.contains("target_code"))
      e.target_code = scenes::PromptCode{obj.at("target_code").get<int>()};
    if (obj.contains("spec")) e.spec = scenes::spec_from_json(obj.at("spec"));
  } catch (const BenchParseError&) {
    throw;
  } catch (const std::exception& ex) {
    throw BenchParseError(index, "spec", std::string("bad toy field: ") + ex.what());
  }
  for (const auto& [k, v] : obj.items())
    if (!detail::is_known_field(k)) e.extra[k] = v;
  return e;
}

/// Accepts a JSON array of entries or bare concatenated objects.
inline std::vector<BenchEntry> parse_entries(const std::string& text) {
  std::vector<BenchEntry> out;
  std::string trimmed = text;
  const std::size_t first = trimmed.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return out;
  if (trimmed[first] == '[') {
    ojson arr;
    try {
      arr = ojson::parse(trimmed);
    } catch (const std::exception& ex) {
      throw BenchParseError(0, "", std::string("invalid JSON array: ") + ex.what());
    }
    if (!arr.is_array()) throw BenchParseError(0, "", "top-level JSON value is not an array");
    for (std::size_t i = 0; i < arr.size(); ++i)
      out.push_back(entry_from_json(arr[i], int(i)));
    return out;
  }
  const std::vector<std::string> chunks = detail::split_top_level_objects(trimmed);
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    ojson obj;
    try {
      obj = ojson::parse(chunks[i]);
    } catch (const std::exception& ex) {
      throw BenchParseError(int(i), "", std::string("invalid JSON object: ") + ex.what());
    }
    out.push_back(entry_from_json(obj, int(i)));
  }
  return out;
}

inline ojson suite_to_json(const BenchSuite& s) {
  ojson j;
  j["name"] = s.name;
  j["schema_version"] = s.schema_version;
  ojson arr = ojson::array();
  for (const auto& e : s.entries) arr.push_back(entry_to_json(e));
  j["entries"] = std::move(arr);
  return j;
}

inline BenchSuite suite_from_json(const ojson& j) {
  BenchSuite s;
  s.name = j.value("name", "suite");
  s.schema_version = j.value("schema_version", BenchSuite::kSchemaVersion);
  if (s.schema_version != BenchSuite::kSchemaVersion)
    throw std::runtime_error("unsupported suite schema version " +
                             std::to_string(s.schema_version));
  const auto& arr = j.at("entries");
  for (std::size_t i = 0; i < arr.size(); ++i)
    s.entries.push_back(entry_from_json(arr[i], int(i)));
  return s;
}

inline std::string serialize_suite(const BenchSuite& s) { return suite_to_json(s).dump(2) + "\n"; }

inline void save_suite(const std::string& path, const BenchSuite& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write suite: " + path);
  out << serialize_suite(s);
}

inline BenchSuite load_suite(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read suite: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  ojson j;
  try {
    j = ojson::parse(ss.str());
  } catch (const std::exception& ex) {
    throw std::runtime_error("suite file is not valid JSON: " + std::string(ex.what()));
  }
  if (j.is_array()) {
    BenchSuite s;
    s.name = path;
    for (std::size_t i = 0; i < j.size(); ++i)
      s.entries.push_back(entry_from_json(j[i], int(i)));
    return s;
  }
  return suite_from_json(j);
}

/// Three entries (one per edit type) for every held-out scene.
inline BenchSuite build_toy_noe(const std::vector<scenes::SceneRow>& bench_rows,
                                const std::string& name = "toy-noe") {
  BenchSuite s;
  s.name = name;
  for (const auto& row : bench_rows) {
    for (const scenes::EditTask& task : scenes::make_edit_tasks(row.spec)) {
      BenchEntry e;
      e.path = row.file;
      e.source_prompt = scenes::describe(task.src_spec);
      e.target_prompt = scenes::describe(task.tgt_spec);
      e.type = task.type;
      e.source_code = task.src_code;
      e.target_code = task.tgt_code;
      e.spec = row.spec;
      s.entries.push_back(std::move(e));
    }
  }
  return s;
}

}  // namespace sdlab::bench
