// SPDX-License-Identifier: Apache-2.0
//
// Plain-text configuration: `key = value` lines under `[section]` headers.
// Keys are addressed as "section.key"; command-line flags use the same
// names (`--section.key value`).
#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "incubator/error.hpp"

namespace incubator {

class ConfigMap {
 public:
  using Map = std::map<std::string, std::string>;

  static ConfigMap parse(std::istream& in, const std::string& origin = "config") {
    ConfigMap cfg;
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find_first_of("#;");
      std::string_view text = trim(std::string_view(line).substr(0, hash));
      if (text.empty()) continue;
      if (text.front() == '[') {
        if (text.back() != ']' || text.size() < 3) {
          throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
        }
        section = std::string(trim(text.substr(1, text.size() - 2)));
        continue;
      }
      const auto eq = text.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key(trim(text.substr(0, eq)));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      cfg.set(section.empty() ? key : section + "." + key, std::string(trim(text.substr(eq + 1))));
    }
    return cfg;
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    return parse(in, path);
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void erase(const std::string& key) { values_.erase(key); }

  /// Later values win.
  void merge(const ConfigMap& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  std::string get(const std::string& key, const std::string& fallback = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const std::string s = get(key);
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + s + "'");
    return v;
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const std::string s = get(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string s = get(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + s + "'");
  }

  const Map& values() const { return values_; }

  /// Serializes back into sectioned text; parse(to_text()) reproduces the map.
  std::string to_text() const {
    std::map<std::string, Map> sections;
    for (const auto& [k, v] : values_) {
      const auto dot = k.rfind('.');
      if (dot == std::string::npos) {
        sections[""][k] = v;
      } else {
        sections[k.substr(0, dot)][k.substr(dot + 1)] = v;
      }
    }
    std::ostringstream os;
    for (const auto& [name, kv] : sections) {
      if (!name.empty()) os << "[" << name << "]\n";
      for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
      os << "\n";
    }
    return os.str();
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

  Map values_;
};

}  // namespace incubator
