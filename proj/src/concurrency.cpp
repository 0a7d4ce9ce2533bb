#include "p3d/concurrency.hpp"

#include <cstdlib>
#include <string>
#include <thread>

namespace p3d {

static int resolve_thread_count() {
    if (const char* env = std::getenv("P3D_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) return n;
        } catch (...) {
            // fall through to the default
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

int thread_count() {
    static const int n = resolve_thread_count();
    return n;
}

}  // namespace p3d
