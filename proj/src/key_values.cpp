// SPDX-License-Identifier: Apache-2.0
#include "fopa/key_values.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "fopa/error.hpp"
#include "fopa/scene.hpp"

namespace fopa {

void KeyValues::set(const std::string &key, const std::string &value) {
  for (auto &[k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

void KeyValues::set(const std::string &key, double value) {
  set(key, format_double(value));
}

void KeyValues::set(const std::string &key, long long value) {
  set(key, std::to_string(value));
}

void KeyValues::set(const std::string &key, bool value) {
  set(key, std::string(value ? "true" : "false"));
}

bool KeyValues::has(const std::string &key) const {
  for (const auto &[k, v] : entries_) {
    if (k == key) return true;
  }
  return false;
}

const std::string &KeyValues::get(const std::string &key) const {
  for (const auto &[k, v] : entries_) {
    if (k == key) return v;
  }
  throw DataError("missing key '" + key + "'");
}

double KeyValues::get_double(const std::string &key) const {
  const std::string &v = get(key);
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError("key '" + key + "' is not a number: " + v);
  }
  return out;
}

long long KeyValues::get_int(const std::string &key) const {
  const std::string &v = get(key);
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError("key '" + key + "' is not an integer: " + v);
  }
  return out;
}

bool KeyValues::get_bool(const std::string &key) const {
  const std::string &v = get(key);
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw DataError("key '" + key + "' is not a boolean: " + v);
}

std::string KeyValues::str() const {
  std::string out;
  for (const auto &[k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

KeyValues KeyValues::parse(const std::string &text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw DataError("line " + std::to_string(line_no) + " is not key=value");
    }
    kv.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::read(const std::filesystem::path &path) {
  return parse(read_text_file(path));
}

void KeyValues::write(const std::filesystem::path &path) const {
  write_text_file(path, str());
}

std::string read_text_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace fopa
