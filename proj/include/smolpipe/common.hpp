#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smolpipe {

// Thrown for unreadable/malformed inputs (files, manifests, datasets). CLI exit 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when a geometry or configuration invariant is violated. CLI exit 3.
class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when a rendered sequence cannot fit the model context. CLI exit 4.
class ContextOverflowError : public std::runtime_error {
 public:
  ContextOverflowError(const std::string& msg, std::string sample_id = "")
      : std::runtime_error(msg), sample_id(std::move(sample_id)) {}
  std::string sample_id;
};

// Flat key=value config files. Lines starting with '#' and blank lines are
// skipped. Parse errors report the 1-based line number.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::filesystem::path& path);
  static KeyValueFile parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;

  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, std::int64_t value);
  void set_double(const std::string& key, double value);
  void write(const std::filesystem::path& path) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return order_; }

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
  std::vector<std::pair<std::string, std::string>> order_;
};

// RFC 4180 field quoting: fields containing commas, quotes or newlines are
// wrapped in double quotes with embedded quotes doubled.
std::string csv_escape(const std::string& field);
void write_csv_row(std::ostream& os, const std::vector<std::string>& fields);

// Worker cap for batch-parallel sections: SMOLPIPE_THREADS if set, else 1.
std::size_t worker_count();

// Git describe string baked in at configure time.
std::string build_id();

std::string format_double(double v);

}  // namespace smolpipe
