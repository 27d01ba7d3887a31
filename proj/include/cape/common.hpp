#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cape {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when tensor/matrix extents do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// Raised on malformed files (scene JSON, blobs, checkpoints).
struct ParseError : Error {
    using Error::Error;
};

// Raised on invalid experiment or scene configuration.
struct ConfigError : Error {
    using Error::Error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x517cc1b727220a95ULL));
}

/// Deterministic RNG: std::mt19937_64 engine with hand-rolled uniform/normal
/// draws so results do not depend on the standard library's distribution
/// implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; consumes exactly two draws per call.
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform index in [0, n). Rejection-free modulo is fine at desk scale.
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw Error("uniform_index: n must be positive");
        return static_cast<std::size_t>(next_u64() % n);
    }

    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw ParseError("Rng::load_state: malformed engine state");
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace cape
