#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace pbl {

/// Line-oriented `key = value` documents with `[section]` headers and `#`
/// comments. Sections may repeat. Every error message carries the source
/// name and line number.
class ConfigDocument {
 public:
  struct Entry {
    std::string key;
    std::string value;
    int line = 0;
  };

  struct Section {
    std::string name;  ///< empty for the leading, unnamed section
    int line = 0;
    std::vector<Entry> entries;
    std::string source;

    const Entry* find(std::string_view key) const;
    std::vector<const Entry*> find_all(std::string_view key) const;
    bool has(std::string_view key) const { return find(key) != nullptr; }

    /// Throws ConfigError naming the first key outside `allowed` or any key
    /// given twice unless it is listed in `repeatable`.
    void require_known(std::initializer_list<std::string_view> allowed,
                       std::initializer_list<std::string_view> repeatable = {}) const;

    std::string get_string(std::string_view key) const;
    std::string get_string(std::string_view key, std::string_view fallback) const;
    double get_double(std::string_view key) const;
    double get_double(std::string_view key, double fallback) const;
    int get_int(std::string_view key) const;
    int get_int(std::string_view key, int fallback) const;
    std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
    bool get_bool(std::string_view key, bool fallback) const;
    std::vector<double> get_doubles(std::string_view key) const;
    Eigen::Vector3d get_vec3(std::string_view key) const;
    Eigen::Vector3d get_vec3(std::string_view key, const Eigen::Vector3d& fallback) const;

    /// ConfigError "<source>:<line>: <message>" for an entry of this section.
    [[noreturn]] void fail(const Entry& entry, const std::string& message) const;
    [[noreturn]] void fail(const std::string& message) const;
  };

  static ConfigDocument parse(std::string_view text, std::string source = "<config>");
  static ConfigDocument load(const std::string& path);

  const std::string& source() const { return source_; }
  const Section& root() const { return sections_.front(); }
  const std::vector<Section>& sections() const { return sections_; }
  std::vector<const Section*> sections_named(std::string_view name) const;
  const Section* section(std::string_view name) const;

  /// Throws ConfigError on a section name outside `allowed`.
  void require_sections(std::initializer_list<std::string_view> allowed) const;

 private:
  std::string source_;
  std::vector<Section> sections_;
};

/// Numeric parsing helpers shared by the text formats.
double parse_double(std::string_view text);
std::vector<double> parse_doubles(std::string_view text);
std::string format_double(double value);  ///< %.17g

}  // namespace pbl
