// SPDX-License-Identifier: Apache-2.0
#ifndef FOPA_KEY_VALUES_HPP
#define FOPA_KEY_VALUES_HPP

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace fopa {

/// Ordered key=value text, one pair per line; '#' starts a comment line.
class KeyValues {
 public:
  void set(const std::string &key, const std::string &value);
  void set(const std::string &key, double value);
  void set(const std::string &key, long long value);
  void set(const std::string &key, int value) { set(key, static_cast<long long>(value)); }
  void set(const std::string &key, bool value);

  bool has(const std::string &key) const;
  const std::string &get(const std::string &key) const;
  double get_double(const std::string &key) const;
  long long get_int(const std::string &key) const;
  bool get_bool(const std::string &key) const;

  const std::vector<std::pair<std::string, std::string>> &entries() const {
    return entries_;
  }

  std::string str() const;
  static KeyValues parse(const std::string &text);
  static KeyValues read(const std::filesystem::path &path);
  void write(const std::filesystem::path &path) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

std::string read_text_file(const std::filesystem::path &path);
void write_text_file(const std::filesystem::path &path, const std::string &text);

}  // namespace fopa

#endif  // FOPA_KEY_VALUES_HPP
