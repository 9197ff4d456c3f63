#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bincf {

/// Ordered flat `key=value` document. `#` starts a comment line.
class KvFile {
 public:
  void set(std::string key, std::string value);
  void set(std::string key, double value);
  void set(std::string key, std::uint64_t value);

  [[nodiscard]] std::optional<std::string> get(std::string_view key) const;
  /// Throws DataError when absent or malformed.
  [[nodiscard]] std::string require(std::string_view key) const;
  [[nodiscard]] std::uint64_t require_uint(std::string_view key) const;
  [[nodiscard]] double require_double(std::string_view key) const;

  [[nodiscard]] const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  [[nodiscard]] std::string str() const;
  void write(const std::filesystem::path& path) const;
  static KvFile parse(std::string_view text);
  static KvFile read(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Shortest round-trippable decimal form.
std::string format_double(double value);

}  // namespace bincf
