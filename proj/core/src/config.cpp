#include "pbl/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pbl/error.hpp"

namespace pbl {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_double_exact(std::string_view text, double& out) {
  const std::string s(trim(text));
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && errno != ERANGE;
}

}  // namespace

double parse_double(std::string_view text) {
  double v = 0.0;
  if (!parse_double_exact(text, v))
    throw ConfigError("not a number: '" + std::string(trim(text)) + "'");
  return v;
}

std::vector<double> parse_doubles(std::string_view text) {
  std::vector<double> out;
  std::string s(text);
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(parse_double(tok));
  return out;
}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

// --- Section ----------------------------------------------------------------------------

const ConfigDocument::Entry* ConfigDocument::Section::find(std::string_view key) const {
  for (const auto& e : entries)
    if (e.key == key) return &e;
  return nullptr;
}

std::vector<const ConfigDocument::Entry*> ConfigDocument::Section::find_all(
    std::string_view key) const {
  std::vector<const Entry*> out;
  for (const auto& e : entries)
    if (e.key == key) out.push_back(&e);
  return out;
}

void ConfigDocument::Section::fail(const Entry& entry, const std::string& message) const {
  throw ConfigError(source + ":" + std::to_string(entry.line) + ": " + message);
}

void ConfigDocument::Section::fail(const std::string& message) const {
  throw ConfigError(source + ":" + std::to_string(line) + ": " +
                    (name.empty() ? std::string() : "[" + name + "] ") + message);
}

void ConfigDocument::Section::require_known(
    std::initializer_list<std::string_view> allowed,
    std::initializer_list<std::string_view> repeatable) const {
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    if (std::find(allowed.begin(), allowed.end(), e.key) == allowed.end())
      fail(e, "unknown key '" + e.key + "'" + (name.empty() ? "" : " in [" + name + "]"));
    if (std::find(repeatable.begin(), repeatable.end(), e.key) != repeatable.end()) continue;
    for (std::size_t m = 0; m < k; ++m)
      if (entries[m].key == e.key) fail(e, "duplicate key '" + e.key + "'");
  }
}

std::string ConfigDocument::Section::get_string(std::string_view key) const {
  const Entry* e = find(key);
  if (!e) fail("missing key '" + std::string(key) + "'");
  return e->value;
}

std::string ConfigDocument::Section::get_string(std::string_view key,
                                                std::string_view fallback) const {
  const Entry* e = find(key);
  return e ? e->value : std::string(fallback);
}

double ConfigDocument::Section::get_double(std::string_view key) const {
  const Entry* e = find(key);
  if (!e) fail("missing key '" + std::string(key) + "'");
  double v = 0.0;
  if (!parse_double_exact(e->value, v) || !std::isfinite(v))
    fail(*e, "'" + e->key + "' expects a finite number, got '" + e->value + "'");
  return v;
}

double ConfigDocument::Section::get_double(std::string_view key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

int ConfigDocument::Section::get_int(std::string_view key) const {
  const Entry* e = find(key);
  if (!e) fail("missing key '" + std::string(key) + "'");
  int v = 0;
  const auto* b = e->value.data();
  const auto* end = b + e->value.size();
  const auto r = std::from_chars(b, end, v);
  if (r.ec != std::errc() || r.ptr != end)
    fail(*e, "'" + e->key + "' expects an integer, got '" + e->value + "'");
  return v;
}

int ConfigDocument::Section::get_int(std::string_view key, int fallback) const {
  return has(key) ? get_int(key) : fallback;
}

std::uint64_t ConfigDocument::Section::get_u64(std::string_view key, std::uint64_t fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  std::uint64_t v = 0;
  const auto* b = e->value.data();
  const auto* end = b + e->value.size();
  const auto r = std::from_chars(b, end, v);
  if (r.ec != std::errc() || r.ptr != end)
    fail(*e, "'" + e->key + "' expects a non-negative integer, got '" + e->value + "'");
  return v;
}

bool ConfigDocument::Section::get_bool(std::string_view key, bool fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1" || e->value == "yes" || e->value == "on") return true;
  if (e->value == "false" || e->value == "0" || e->value == "no" || e->value == "off") return false;
  fail(*e, "'" + e->key + "' expects true or false, got '" + e->value + "'");
}

std::vector<double> ConfigDocument::Section::get_doubles(std::string_view key) const {
  const Entry* e = find(key);
  if (!e) fail("missing key '" + std::string(key) + "'");
  try {
    return parse_doubles(e->value);
  } catch (const ConfigError& err) {
    fail(*e, "'" + e->key + "': " + err.what());
  }
}

Eigen::Vector3d ConfigDocument::Section::get_vec3(std::string_view key) const {
  const auto v = get_doubles(key);
  if (v.size() != 3) fail(*find(key), "'" + std::string(key) + "' expects 3 numbers");
  return {v[0], v[1], v[2]};
}

Eigen::Vector3d ConfigDocument::Section::get_vec3(std::string_view key,
                                                  const Eigen::Vector3d& fallback) const {
  return has(key) ? get_vec3(key) : fallback;
}

// --- Document -------------------------------------------------------------------------------

ConfigDocument ConfigDocument::parse(std::string_view text, std::string source) {
  ConfigDocument doc;
  doc.source_ = source;
  doc.sections_.push_back(Section{"", 1, {}, source});
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    auto line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      const auto name = trim(line.substr(1, line.size() - 2));
      if (name.empty()) throw ConfigError(where + "empty section name");
      doc.sections_.push_back(Section{std::string(name), line_no, {}, source});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    doc.sections_.back().entries.push_back(Entry{std::string(key), std::string(value), line_no});
  }
  return doc;
}

ConfigDocument ConfigDocument::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

std::vector<const ConfigDocument::Section*> ConfigDocument::sections_named(
    std::string_view name) const {
  std::vector<const Section*> out;
  for (const auto& s : sections_)
    if (s.name == name) out.push_back(&s);
  return out;
}

const ConfigDocument::Section* ConfigDocument::section(std::string_view name) const {
  const auto all = sections_named(name);
  if (all.size() > 1)
    all[1]->fail("section [" + std::string(name) + "] may appear only once");
  return all.empty() ? nullptr : all.front();
}

void ConfigDocument::require_sections(std::initializer_list<std::string_view> allowed) const {
  for (const auto& s : sections_) {
    if (s.name.empty()) continue;
    if (std::find(allowed.begin(), allowed.end(), s.name) == allowed.end())
      throw ConfigError(source_ + ":" + std::to_string(s.line) + ": unknown section [" + s.name + "]");
  }
}

}  // namespace pbl
