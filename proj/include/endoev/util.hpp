#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace endoev {

// Thrown for malformed input files; message names the offending field/line.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);

std::vector<std::string_view> split_ws(std::string_view line);
std::vector<std::string> split_char(std::string_view text, char sep);
std::string_view trim(std::string_view s);

// FNV-1a 64-bit over raw bytes; used for manifest digests and derived seeds.
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t fnv1a64_file(const std::string& path);
std::string digest_hex(std::uint64_t digest);

// Mixes extra words into a seed; synth uses this to derive per-video /
// per-source generators so parallel generation stays order-independent.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                       std::uint64_t c = 0);

std::optional<long long> parse_int(std::string_view token);
std::optional<double> parse_double(std::string_view token);

std::string format_double(double value, int precision);

}  // namespace endoev
