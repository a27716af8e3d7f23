#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace moca {

/// Flat key=value settings with dotted section prefixes (optim.lr=5e-4).
/// Blank lines and lines starting with '#' are ignored. Every getter records
/// the value it resolved, so resolved() lists defaults too.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& source = "<config>");
  static Config load(const std::filesystem::path& path);

  /// Command-line style override; replaces any parsed value.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  double real(const std::string& key, double fallback);
  std::size_t count(const std::string& key, std::size_t fallback);
  std::uint64_t u64(const std::string& key, std::uint64_t fallback);
  bool flag(const std::string& key, bool fallback);
  std::string text(const std::string& key, const std::string& fallback);

  /// Throws ParseError naming the first key no getter asked for.
  void reject_unknown() const;

  /// Sorted "key=value" lines for every key that was read.
  std::string resolved() const;

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;  // 0 for overrides
  };
  const Entry* find(const std::string& key);
  [[noreturn]] void bad_value(const std::string& key, const Entry& e, const char* expected) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
  std::map<std::string, std::string> resolved_;
};

}  // namespace moca
