#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ridgelab {

/// Flat `key = value` configuration. Lines starting with '#' are comments.
/// Values keep their textual form; typed getters parse on access.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::istream& in) {
    KeyValueConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string s = trim(line);
      if (s.empty() || s[0] == '#') continue;
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(s.substr(0, eq));
      const std::string val = trim(s.substr(eq + 1));
      if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = val;
    }
    return cfg;
  }

  static KeyValueConfig parse_string(const std::string& text) {
    std::istringstream ss(text);
    return parse(ss);
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    return parse(in);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    const auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }

  double get_double(const std::string& key, double dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' is not a number: " + it->second);
    }
  }

  long get_long(const std::string& key, long dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      return std::stol(it->second);
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' is not an integer: " + it->second);
    }
  }

  int get_int(const std::string& key, int dflt) const { return static_cast<int>(get_long(key, dflt)); }

  bool get_bool(const std::string& key, bool dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::runtime_error("config: key '" + key + "' is not a bool: " + it->second);
  }

  /// Inline point list, e.g. [[-3,0],[3,0]].
  std::vector<std::vector<double>> get_points(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::runtime_error("config: missing key '" + key + "'");
    try {
      const auto j = nlohmann::json::parse(it->second);
      return j.get<std::vector<std::vector<double>>>();
    } catch (const std::exception& e) {
      throw std::runtime_error("config: key '" + key + "' is not a point list: " + e.what());
    }
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Sorted, normalized text form; what run directories archive.
  std::string serialize() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
  }

  /// Rejects keys outside the known registry (catches typos in overrides).
  void validate_keys(const std::vector<std::string>& known) const {
    for (const auto& [k, _] : values_) {
      if (std::find(known.begin(), known.end(), k) == known.end())
        throw std::runtime_error("config: unknown key '" + k + "'");
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace ridgelab
