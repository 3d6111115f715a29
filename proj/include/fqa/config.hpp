// Run configuration: a key = value text file with flag overrides.
//
//   # comment
//   collisions.agent_radius = 0.08
//   train.max_epochs = 100
//
// Commands bind each key to a typed field. Binding records the resolved value,
// so `to_text()` after binding reproduces the run exactly.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace fqa {

class RunConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string format_value(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace detail

class RunConfig {
 public:
  static RunConfig parse(const std::string& text, const std::string& origin = "<config>") {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw RunConfigError(origin + ":" + std::to_string(no) + ": expected 'key = value'");
      }
      const std::string key = detail::trim(line.substr(0, eq));
      if (key.empty()) throw RunConfigError(origin + ":" + std::to_string(no) + ": empty key");
      cfg.values_[key] = detail::trim(line.substr(eq + 1));
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RunConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  /// Flag overrides win over file values.
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  /// Parses `key=value` override strings.
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw RunConfigError("override '" + kv + "' is not of the form key=value");
    set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  /// Reads `key` into `field` if present, then records the resolved value.
  template <class T>
  void bind(const std::string& key, T& field) {
    bound_.insert(key);
    if (auto it = values_.find(key); it != values_.end()) field = parse_as<T>(key, it->second);
    values_[key] = render(field);
  }

  /// Fails on keys that no command bound.
  void reject_unknown() const {
    for (const auto& [k, v] : values_)
      if (!bound_.count(k)) throw RunConfigError("unknown config key '" + k + "'");
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RunConfigError("cannot write config file '" + path + "'");
    out << to_text();
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  template <class T>
  static T parse_as(const std::string& key, const std::string& s) {
    auto fail = [&](const char* what) -> RunConfigError {
      return RunConfigError(key + ": expected " + what + ", got '" + s + "'");
    };
    if constexpr (std::is_same_v<T, std::string>) {
      return s;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
      throw fail("true or false");
    } else if constexpr (std::is_floating_point_v<T>) {
      T v{};
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size()) throw fail("a number");
      return v;
    } else if constexpr (std::is_integral_v<T>) {
      T v{};
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size()) {
        throw fail(std::is_unsigned_v<T> ? "a non-negative integer" : "an integer");
      }
      return v;
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      std::vector<int> out;
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) out.push_back(parse_as<int>(key, item));
      }
      return out;
    }
  }

  template <class T>
  static std::string render(const T& v) {
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
      return detail::format_value(v);
    } else if constexpr (std::is_integral_v<T>) {
      return std::to_string(v);
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      std::string out;
      for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
      return out;
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> bound_;
};

}  // namespace fqa
