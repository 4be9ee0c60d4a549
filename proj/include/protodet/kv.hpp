#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace protodet {

/// Flat `key = value` text with `#` comments. Keys are unique.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);

  std::string format() const;

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  // Typed getters mark the key as consumed and throw ConfigError on bad values.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  long long get_int64(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;
  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback) const;

  /// Throws ConfigError naming every key no getter has read.
  void reject_unknown() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

std::string join_ints(const std::vector<int>& values);
std::string join_doubles(const std::vector<double>& values);
std::string format_double(double v);

}  // namespace protodet
