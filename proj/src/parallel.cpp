#include "endoev/parallel.hpp"

#include <cstdlib>

#include "endoev/util.hpp"

namespace endoev {

std::size_t resolve_workers(std::size_t requested) {
  if (requested >= 1) return requested;
  if (const char* env = std::getenv("ENDOEV_WORKERS")) {
    if (auto n = parse_int(env); n && *n >= 1) {
      return static_cast<std::size_t>(*n);
    }
  }
  std::size_t hw = std::thread::hardware_concurrency();
  return hw >= 1 ? hw : 1;
}

}  // namespace endoev
