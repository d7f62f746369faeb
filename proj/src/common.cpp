#include "encofa/common.hpp"

#include <charconv>
#include <cmath>

namespace encofa {

std::string_view to_string(NoiseType type) {
    switch (type) {
    case NoiseType::clean: return "CLEAN";
    case NoiseType::closed: return "CLOSED_NOISY";
    case NoiseType::open: return "OPEN_NOISY";
    }
    return "UNKNOWN";
}

NoiseType parse_noise_type(std::string_view text) {
    if (text == "CLEAN") return NoiseType::clean;
    if (text == "CLOSED_NOISY") return NoiseType::closed;
    if (text == "OPEN_NOISY") return NoiseType::open;
    throw DataError("unknown noise type '" + std::string(text) + "'");
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, Stream stream,
                          std::initializer_list<std::uint64_t> parts) noexcept {
    std::uint64_t h = splitmix64(seed ^ 0x5bd1e9955bd1e995ULL);
    h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
    for (auto p : parts) h = splitmix64(h ^ p);
    return h;
}

double hash_uniform(std::uint64_t key) noexcept {
    return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
}

Vector l2_normalized(const Vector& v) {
    const double n = v.norm();
    if (n > 0.0 && std::isfinite(n)) return v / n;
    Vector e = Vector::Zero(v.size());
    if (e.size() > 0) e(0) = 1.0;
    return e;
}

std::string format_double(double value) {
    char buf[64];
    const auto result = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, result.ptr);
}

}  // namespace encofa
