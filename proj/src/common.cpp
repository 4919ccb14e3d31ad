#include "insight/common.hpp"

#include <atomic>
#include <iostream>

namespace insight {

namespace {
std::atomic<bool> g_warnings_enabled{true};
std::atomic<std::size_t> g_warning_count{0};
} // namespace

void log_warning(const std::string& message) {
    ++g_warning_count;
    if (g_warnings_enabled) {
        std::cerr << "[warn] " << message << '\n';
    }
}

void set_warnings_enabled(bool enabled) { g_warnings_enabled = enabled; }

std::size_t warning_count() { return g_warning_count; }

} // namespace insight
