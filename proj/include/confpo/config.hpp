// SPDX-License-Identifier: Apache-2.0
//
// Layered command settings: built-in defaults, then a key=value config file
// (or the config snapshot of a run manifest), then CONFPO_<KEY> environment
// variables, then command-line flags.

#pragma once

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "confpo/error.hpp"

namespace confpo {

struct SettingKey {
  std::string name;
  std::string default_value;
  std::string help;
  bool is_flag = false;  ///< Boolean switch ("true"/"false").
};

using SettingSchema = std::vector<SettingKey>;

inline std::string env_name(const std::string& key) {
  std::string s = "CONFPO_";
  for (char c : key) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

inline std::string flag_name(const std::string& key) {
  std::string s = key;
  for (char& c : s) c = c == '_' ? '-' : c;
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Resolved values for one command; every schema key is present.
class Settings {
 public:
  Settings() = default;
  explicit Settings(const SettingSchema& schema) {
    for (const auto& k : schema) {
      values_[k.name] = k.default_value;
      order_.push_back(k.name);
    }
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) {
    if (!has(key)) throw ValidationError("unknown config key '" + key + "' (valid keys: " + valid_keys() + ")");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("setting '" + key + "' is not defined for this command");
    return it->second;
  }

  double num(const std::string& key) const {
    const std::string& v = str(key);
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (v.empty() || used != v.size()) throw ValidationError("setting '" + key + "': '" + v + "' is not a number");
    return d;
  }

  std::optional<double> opt_num(const std::string& key) const {
    if (str(key).empty()) return std::nullopt;
    return num(key);
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& v = str(key);
    std::size_t used = 0;
    std::uint64_t x = 0;
    try {
      x = std::stoull(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (v.empty() || used != v.size() || v.front() == '-') {
      throw ValidationError("setting '" + key + "': '" + v + "' is not a non-negative integer");
    }
    return x;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0" || v.empty()) return false;
    throw ValidationError("setting '" + key + "': '" + v + "' is not a boolean");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<double> num_list(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& item : list(key)) {
      std::size_t used = 0;
      double d = 0.0;
      try {
        d = std::stod(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != item.size()) throw ValidationError("setting '" + key + "': '" + item + "' is not a number");
      out.push_back(d);
    }
    return out;
  }

  /// Snapshot in schema order.
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& k : order_) j[k] = values_.at(k);
    return j;
  }

  std::string valid_keys() const {
    std::string s;
    for (const auto& k : order_) s += (s.empty() ? "" : ", ") + k;
    return s;
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

/// Applies a key=value file, or the "config" object of a JSON run manifest.
inline void apply_config_file(Settings& s, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open config file '" + path.string() + "'");
  std::stringstream buf;
  buf << is.rdbuf();
  const std::string text = buf.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
    if (!j.contains("config") || !j["config"].is_object()) throw ValidationError(path.string() + ": no config snapshot");
    for (const auto& [k, v] : j["config"].items()) s.set(k, v.is_string() ? v.get<std::string>() : v.dump());
    return;
  }
  std::stringstream lines(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": expected key=value");
    }
    try {
      s.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_environment(Settings& s, const SettingSchema& schema) {
  for (const auto& k : schema) {
    if (const char* v = std::getenv(env_name(k.name).c_str())) s.set(k.name, v);
  }
}

}  // namespace confpo
