#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cbpo {

// Error taxonomy. The CLI maps InputError/ConfigError to exit code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct EstimationError : Error {
    using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent child seed from a parent seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) {
    return splitmix64(splitmix64(parent) ^ (tag * 0xd1b54a32d192ed03ULL));
}

/// Seeded generator with platform-independent distributions.
///
/// std::mt19937_64 output is fully specified by the standard; the std::
/// distributions are not, so every draw we need is derived here by hand.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Rejection sampling avoids modulo bias.
    std::size_t below(std::size_t n) {
        if (n == 0) throw InputError("Rng::below: empty range");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return static_cast<std::size_t>(v % bound);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double exponential(double rate = 1.0) { return -std::log1p(-uniform()) / rate; }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Inverse-CDF draw from a normalized probability vector.
    std::size_t categorical(const std::vector<double>& probs) {
        const double u = uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        // Rounding left a sliver of mass; return the last non-zero entry.
        for (std::size_t i = probs.size(); i-- > 0;) {
            if (probs[i] > 0.0) return i;
        }
        throw InputError("Rng::categorical: all-zero distribution");
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

/// Dense row-major real matrix. Used for policy logits and their gradients.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    /// this += scale * other, elementwise in storage order.
    void add_scaled(const Matrix& other, double scale) {
        if (!same_shape(other)) throw InputError("Matrix::add_scaled: shape mismatch");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += scale * other.data[i];
    }

    bool operator==(const Matrix&) const = default;
};

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline double mean(std::span<const double> xs) {
    if (xs.empty()) throw InputError("mean of empty list");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

/// 64-bit FNV-1a, used for config and parameter fingerprints.
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace cbpo
