#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tacbrac/error.hpp"

namespace tacbrac {

/// Flat `key=value` configuration. Blank lines and `#` comments are ignored.
class KeyValue {
 public:
  KeyValue() = default;

  static KeyValue parse(std::istream& in) {
    KeyValue kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("expected key=value", lineno);
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ParseError("empty key", lineno);
      kv.values_[key] = trim(line.substr(eq + 1));
    }
    return kv;
  }

  static KeyValue load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    return parse(in);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key) const { return to_double(key, get(key)); }

  double get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  long get_int_or(const std::string& key, long fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = get(key);
    std::size_t pos = 0;
    long out = 0;
    try {
      out = std::stol(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' is not an integer: '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("key '" + key + "' is not an integer: '" + v + "'");
    return out;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, double value) { values_[key] = format_double(value); }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Writes keys in the given order, then any remaining keys alphabetically.
  void write(std::ostream& out, const std::vector<std::string>& order = {}) const {
    std::map<std::string, bool> done;
    for (const auto& k : order) {
      auto it = values_.find(k);
      if (it == values_.end()) continue;
      out << k << '=' << it->second << '\n';
      done[k] = true;
    }
    for (const auto& [k, v] : values_) {
      if (!done.count(k)) out << k << '=' << v << '\n';
    }
  }

  static std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static double to_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' is not a number: '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("key '" + key + "' is not a number: '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace tacbrac
