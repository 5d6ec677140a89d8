#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace duet {

class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/dimension violations in tensor ops.
class ShapeError : public Error {
  using Error::Error;
};

// Invalid configuration values (dims, scales, stage setups, CLI flags).
class ConfigError : public Error {
  using Error::Error;
};

// Non-finite values where finite math is required.
class NumericError : public Error {
  using Error::Error;
};

// API contract violations (non-scalar backward, maps without fusion, ...).
class ContractError : public Error {
  using Error::Error;
};

class IoError : public Error {
  using Error::Error;
};

// Carries the position of the offending input: a byte offset for prompt
// text, a line number for JSONL corpora. The message says which.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, std::size_t position)
      : Error(msg), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

// Deterministic RNG. mt19937_64 output is standardized; the distribution
// mappings here are hand-rolled so streams are identical across stdlibs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi)
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi <= lo) throw ConfigError("uniform_int: empty range");
    return lo + static_cast<int64_t>(next_u64() %
                                     static_cast<uint64_t>(hi - lo));
  }

  // N(0, 1) via Box-Muller; second draw cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline uint64_t fnv1a64(const void* bytes, std::size_t n,
                        uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::string out((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return out;
}

// Write-to-temp plus rename, so readers never observe partial files.
inline void atomic_write_file(const std::filesystem::path& path,
                              std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + tmp.string() + " -> " +
                        path.string() + ": " + ec.message());
}

}  // namespace duet
