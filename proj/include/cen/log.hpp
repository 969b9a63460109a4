#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace cen::log {

using Sink = std::function<void(std::string_view level, std::string_view message)>;

namespace detail {
struct State {
    std::mutex mutex;
    Sink sink = [](std::string_view level, std::string_view message) {
        std::clog << "[" << level << "] " << message << '\n';
    };
};
inline State& state() {
    static State s;
    return s;
}
}  // namespace detail

/// Installs a new sink and returns the previous one.
inline Sink set_sink(Sink sink) {
    auto& s = detail::state();
    std::lock_guard lock(s.mutex);
    std::swap(s.sink, sink);
    return sink;
}

inline void write(std::string_view level, std::string_view message) {
    auto& s = detail::state();
    std::lock_guard lock(s.mutex);
    if (s.sink) s.sink(level, message);
}

inline void info(std::string_view message) { write("info", message); }
inline void warn(std::string_view message) { write("warn", message); }

}  // namespace cen::log
