#include <cstdlib>
#include <string_view>

#include "confmoe/kernels.hpp"

namespace confmoe::kernels {

namespace {

const KernelTable& select_table() {
    if (const char* forced = std::getenv("CONFMOE_SIMD")) {
        if (std::string_view(forced) == "scalar") return scalar_table();
    }
    if (const KernelTable* t = avx2_table()) return *t;
    if (const KernelTable* t = neon_table()) return *t;
    return scalar_table();
}

}  // namespace

const KernelTable& active() {
    static const KernelTable& table = select_table();
    return table;
}

}  // namespace confmoe::kernels
