#pragma once

// Deterministic CSV text: shortest round-trip decimal for doubles, so a
// value written and parsed back is bit-identical.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lcswitch {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class CsvBuilder {
 public:
  explicit CsvBuilder(std::span<const std::string_view> header) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) text_ += ',';
      text_ += header[i];
    }
    text_ += '\n';
  }
  CsvBuilder(std::initializer_list<std::string_view> header)
      : CsvBuilder(std::span<const std::string_view>(header.begin(), header.size())) {}

  CsvBuilder& cell(double v) { return raw(format_double(v)); }
  CsvBuilder& cell(std::uint64_t v) { return raw(std::to_string(v)); }
  CsvBuilder& cell(std::int64_t v) { return raw(std::to_string(v)); }
  CsvBuilder& cell(int v) { return raw(std::to_string(v)); }
  CsvBuilder& cell(std::string_view s) { return raw(std::string(s)); }
  CsvBuilder& cell(const char* s) { return raw(std::string(s)); }
  CsvBuilder& end_row() {
    text_ += '\n';
    fresh_ = true;
    return *this;
  }
  const std::string& str() const noexcept { return text_; }

 private:
  CsvBuilder& raw(const std::string& s) {
    if (!fresh_) text_ += ',';
    text_ += s;
    fresh_ = false;
    return *this;
  }
  std::string text_;
  bool fresh_ = true;
};

/// Splits one CSV line on commas (no quoting; the library never writes any).
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

}  // namespace lcswitch
