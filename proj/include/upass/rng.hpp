#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace upass {

/// Reproducible pseudorandom source.
///
/// The raw stream is std::mt19937_64, which the C++ standard pins bit for
/// bit. Everything derived from it is computed here rather than through
/// <random> distributions (whose algorithms are implementation-defined):
///   uniform()   = (next() >> 11) * 2^-53, in [0, 1)
///   below(n)    = rejection sampling on next() against the largest multiple of n
///   normal()    = Box-Muller on two uniforms, returning the cosine branch only
///   shuffle()   = Fisher-Yates from the back, swapping i with below(i + 1)
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t below(std::uint64_t n);
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(values[i - 1], values[j]);
        }
    }

    /// Derives an independent child seed for a named sub-stream.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

private:
    std::mt19937_64 engine_;
};

}  // namespace upass
