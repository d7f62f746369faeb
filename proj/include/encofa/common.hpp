#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace encofa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Exit-code categories used by the CLI: config 2, data 3, runtime 4.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error("invalid config key '" + key + "': " + what), key_(std::move(key)) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

enum class NoiseType : int { clean = 0, closed = 1, open = 2 };

std::string_view to_string(NoiseType type);
NoiseType parse_noise_type(std::string_view text);

// Independent random sub-streams. Every consumer of randomness derives its
// own generator from (run seed, purpose, ...) so that adding a draw in one
// place never shifts another.
enum class Stream : std::uint64_t {
    blobs = 1,
    split,
    noise,
    probe,
    init,
    data_order,
    augmentation,
    dynamic_labels,
    feature_swap,
    gmm,
    projection,
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, Stream stream,
                          std::initializer_list<std::uint64_t> parts = {}) noexcept;

// Uniform in [0,1) as a pure function of a 64-bit key.
double hash_uniform(std::uint64_t key) noexcept;

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    // Uniform in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }
    bool bernoulli(double p) { return uniform() < p; }
    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

// Shortest text that reads back to the same double.
std::string format_double(double value);

// L2 normalization with the fallback used everywhere in the pipeline: a zero
// vector maps to the first basis vector.
Vector l2_normalized(const Vector& v);

}  // namespace encofa
