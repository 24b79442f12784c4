#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ssd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <class T, class... Ts>
void cat_into(std::ostringstream& os, const T& v, const Ts&... rest) {
  os << v;
  cat_into(os, rest...);
}
}  // namespace detail

template <class... Ts>
std::string cat(const Ts&... parts) {
  std::ostringstream os;
  detail::cat_into(os, parts...);
  return os.str();
}

template <class... Ts>
[[noreturn]] void fail(const Ts&... parts) {
  throw Error(cat(parts...));
}

}  // namespace ssd

#define SSD_CHECK(cond, ...)       \
  do {                             \
    if (!(cond)) {                 \
      ::ssd::fail(__VA_ARGS__);    \
    }                              \
  } while (0)
