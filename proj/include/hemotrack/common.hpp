#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hemo {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_parts(std::ostringstream& os, T&& first, Rest&&... rest) {
    os << std::forward<T>(first);
    format_parts(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Parts>
[[noreturn]] void fail(Parts&&... parts) {
    std::ostringstream os;
    detail::format_parts(os, std::forward<Parts>(parts)...);
    throw Error(os.str());
}

}  // namespace hemo

#define HEMO_CHECK(cond, ...)            \
    do {                                 \
        if (!(cond)) {                   \
            ::hemo::fail(__VA_ARGS__);   \
        }                                \
    } while (0)
