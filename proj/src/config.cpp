#include "moca/config.h"

#include <charconv>
#include <fstream>
#include <sstream>

#include "moca/common.h"

namespace moca {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse(const std::string& text, const std::string& source) {
  Config cfg;
  cfg.source_ = source;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError(source, line, "expected key=value");
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ParseError(source, line, "empty key");
    if (cfg.entries_.count(key)) throw ParseError(source, line, "duplicate key '" + key + "'");
    cfg.entries_[key] = Entry{trim(s.substr(eq + 1)), line};
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) { entries_[key] = Entry{value, 0}; }

const Config::Entry* Config::find(const std::string& key) {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void Config::bad_value(const std::string& key, const Entry& e, const char* expected) const {
  const std::string msg = "value '" + e.value + "' for '" + key + "' is not " + expected;
  if (e.line == 0) throw ParameterError(msg);
  throw ParseError(source_, e.line, msg);
}

double Config::real(const std::string& key, double fallback) {
  double v = fallback;
  if (const Entry* e = find(key)) {
    const char* first = e->value.data();
    const char* last = first + e->value.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) bad_value(key, *e, "a number");
  }
  resolved_[key] = format_double(v);
  return v;
}

std::uint64_t Config::u64(const std::string& key, std::uint64_t fallback) {
  std::uint64_t v = fallback;
  if (const Entry* e = find(key)) {
    const char* first = e->value.data();
    const char* last = first + e->value.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) bad_value(key, *e, "a nonnegative integer");
  }
  resolved_[key] = std::to_string(v);
  return v;
}

std::size_t Config::count(const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(u64(key, fallback));
}

bool Config::flag(const std::string& key, bool fallback) {
  bool v = fallback;
  if (const Entry* e = find(key)) {
    if (e->value == "true" || e->value == "1") v = true;
    else if (e->value == "false" || e->value == "0") v = false;
    else bad_value(key, *e, "a boolean");
  }
  resolved_[key] = v ? "true" : "false";
  return v;
}

std::string Config::text(const std::string& key, const std::string& fallback) {
  std::string v = fallback;
  if (const Entry* e = find(key)) v = e->value;
  resolved_[key] = v;
  return v;
}

void Config::reject_unknown() const {
  for (const auto& [key, e] : entries_)
    if (!resolved_.count(key)) {
      if (e.line == 0) throw ParameterError("unknown config key '" + key + "'");
      throw ParseError(source_, e.line, "unknown config key '" + key + "'");
    }
}

std::string Config::resolved() const {
  std::string out;
  for (const auto& [key, value] : resolved_) out += key + "=" + value + "\n";
  return out;
}

}  // namespace moca
