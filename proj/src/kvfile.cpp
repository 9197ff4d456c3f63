#include "bincf/kvfile.hpp"

#include "bincf/common.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace bincf {

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, end);
}

void KvFile::set(std::string key, std::string value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(std::move(key), std::move(value));
}

void KvFile::set(std::string key, double value) { set(std::move(key), format_double(value)); }

void KvFile::set(std::string key, std::uint64_t value) { set(std::move(key), std::to_string(value)); }

std::optional<std::string> KvFile::get(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string KvFile::require(std::string_view key) const {
  auto v = get(key);
  if (!v) throw DataError("missing key '" + std::string(key) + "'");
  return *v;
}

std::uint64_t KvFile::require_uint(std::string_view key) const {
  const std::string v = require(key);
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw DataError("key '" + std::string(key) + "' is not an unsigned integer: " + v);
  }
  return out;
}

double KvFile::require_double(std::string_view key) const {
  const std::string v = require(key);
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw DataError("key '" + std::string(key) + "' is not a number: " + v);
  }
  return out;
}

std::string KvFile::str() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

void KvFile::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << str();
  if (!os) throw DataError("write failed: " + path.string());
}

KvFile KvFile::parse(std::string_view text) {
  KvFile kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string_view::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw DataError("line " + std::to_string(line_no) + ": expected key=value");
    }
    auto trim = [](std::string_view s) {
      const auto b = s.find_first_not_of(" \t");
      if (b == std::string_view::npos) return std::string_view{};
      const auto e = s.find_last_not_of(" \t");
      return s.substr(b, e - b + 1);
    };
    kv.set(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }
  return kv;
}

KvFile KvFile::read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

}  // namespace bincf
