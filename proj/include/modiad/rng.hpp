#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "modiad/error.hpp"

namespace modiad {

// splitmix64 step; used only for key derivation, never as a sampling stream.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic random stream. The engine is mt19937_64, whose output sequence
// is fixed by the standard; all distributions are implemented here on top of
// raw 64-bit draws so results are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw InvalidInputError("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller; one value per call, no cached state.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Gamma(shape, 1) via Marsaglia-Tsang, with the power boost for shape < 1.
    double gamma(double shape) {
        if (shape <= 0.0) throw InvalidInputError("Rng::gamma: shape must be positive");
        if (shape < 1.0) {
            const double u = uniform();
            return gamma(shape + 1.0) * std::pow(u > 0 ? u : 0x1.0p-53, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Symmetric Dirichlet(alpha) over n categories.
    std::vector<double> dirichlet(double alpha, std::size_t n) {
        std::vector<double> g(n);
        double sum = 0.0;
        for (auto& v : g) {
            v = gamma(alpha);
            sum += v;
        }
        if (sum <= 0.0) {  // vanishingly unlikely; fall back to uniform
            for (auto& v : g) v = 1.0 / static_cast<double>(n);
            return g;
        }
        for (auto& v : g) v /= sum;
        return g;
    }

    // Partial Fisher-Yates: the first `take` entries of a shuffled [0, n).
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t take) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        if (take > n) take = n;
        for (std::size_t i = 0; i < take; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(take);
        return idx;
    }

private:
    std::mt19937_64 engine_;
};

// Named sub-stream derivation. Every consumer of randomness gets its own
// stream keyed by (master, tag, a, b); streams never alias unless the full
// key matches. Tags are small constants listed in StreamTag.
enum class StreamTag : std::uint64_t {
    assignment = 1,
    model_init = 2,
    client_round = 3,   // a = client, b = round
    defect = 4,         // a = class
    eval_set = 5,       // a = class, b = 0 validation / 1 test
    adapter_init = 6,   // a = round, b = class
    train = 7,          // a = round, b = client * 2^32 + class
    generator = 8,      // a = class
    instance = 9,       // a = instance index (scheduling benchmarks)
    baseline = 10,      // a = round
    pool_size = 11,     // a = client, b = class
};

inline std::uint64_t derive_seed(std::uint64_t master, StreamTag tag, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
    std::uint64_t s = splitmix64(master ^ 0x243f6a8885a308d3ULL);
    s = splitmix64(s ^ static_cast<std::uint64_t>(tag));
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    return s;
}

inline Rng substream(std::uint64_t master, StreamTag tag, std::uint64_t a = 0,
                     std::uint64_t b = 0) {
    return Rng(derive_seed(master, tag, a, b));
}

}  // namespace modiad
