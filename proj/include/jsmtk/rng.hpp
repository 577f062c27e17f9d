#pragma once

#include <cstdint>
#include <initializer_list>

namespace jsmtk {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Independent stream seed for a (parent, key...) path, so per-subject and per-step
// generators do not depend on the order they are created in.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t s = splitmix64(parent);
    for (auto k : keys) s = splitmix64(s ^ splitmix64(k + 0x632BE59BD9B4E019ull));
    return s;
}

} // namespace jsmtk
