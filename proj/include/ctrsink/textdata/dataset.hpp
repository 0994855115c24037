#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrsink/errors.hpp"

namespace ctrsink {

struct BehaviorRecord {
  std::string text;
  std::size_t time_index = 0;  // 1 = oldest
  bool operator==(const BehaviorRecord&) const = default;
};

struct Sample {
  std::string user_id;
  std::vector<BehaviorRecord> behaviors;  // ascending time_index
  std::string target_text;
  int label = 0;
  bool operator==(const Sample&) const = default;
};

inline nlohmann::ordered_json to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["user_id"] = s.user_id;
  auto& arr = j["behaviors"] = nlohmann::ordered_json::array();
  for (const auto& b : s.behaviors) arr.push_back({{"text", b.text}, {"time_index", b.time_index}});
  j["target"] = s.target_text;
  j["label"] = s.label;
  return j;
}

namespace detail {

template <class J>
const J& field(const J& obj, const char* name, std::size_t line) {
  auto it = obj.find(name);
  if (it == obj.end()) throw SchemaError(line, std::string("missing field '") + name + "'");
  return *it;
}

}  // namespace detail

// Parses one dataset line; `line` is the 1-based line number for errors.
inline Sample parse_sample(const std::string& text, std::size_t line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line, e.what());
  }
  if (!j.is_object()) throw ParseError(line, "record is not an object");
  Sample s;
  const auto& uid = detail::field(j, "user_id", line);
  const auto& beh = detail::field(j, "behaviors", line);
  const auto& tgt = detail::field(j, "target", line);
  const auto& lab = detail::field(j, "label", line);
  if (!uid.is_string()) throw SchemaError(line, "user_id must be a string");
  if (!beh.is_array()) throw SchemaError(line, "behaviors must be an array");
  if (!tgt.is_string()) throw SchemaError(line, "target must be a string");
  if (!lab.is_number_integer() || (lab.get<int>() != 0 && lab.get<int>() != 1))
    throw SchemaError(line, "label must be 0 or 1");
  s.user_id = uid.get<std::string>();
  s.target_text = tgt.get<std::string>();
  s.label = lab.get<int>();
  for (const auto& b : beh) {
    if (!b.is_object()) throw SchemaError(line, "behavior must be an object");
    const auto& t = detail::field(b, "text", line);
    const auto& ti = detail::field(b, "time_index", line);
    if (!t.is_string()) throw SchemaError(line, "behavior text must be a string");
    if (!ti.is_number_unsigned() || ti.get<std::size_t>() == 0)
      throw SchemaError(line, "time_index must be a positive integer");
    s.behaviors.push_back({t.get<std::string>(), ti.get<std::size_t>()});
  }
  for (std::size_t i = 1; i < s.behaviors.size(); ++i)
    if (s.behaviors[i].time_index <= s.behaviors[i - 1].time_index)
      throw SchemaError(line, "behaviors must be strictly ascending in time_index");
  return s;
}

inline std::vector<Sample> read_dataset(std::istream& in) {
  std::vector<Sample> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_sample(text, line));
  }
  return out;
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  return read_dataset(in);
}

inline void write_dataset(std::ostream& out, const std::vector<Sample>& samples) {
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset " + path.string());
  write_dataset(out, samples);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace ctrsink
