#pragma once

#include <cstdint>
#include <string>

namespace gridnet {

/// Deterministic 64-bit RNG (splitmix64). Every stochastic routine in the
/// project draws from this generator so outputs never depend on the standard
/// library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();

    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);

    /// Uniform integer in [lo, hi], both inclusive.
    int uniform_int(int lo, int hi);

    /// Standard normal via Box-Muller.
    double normal();

    /// Derive an independent stream seed (e.g. one per sample index).
    static uint64_t derive(uint64_t seed, uint64_t index);

private:
    uint64_t state_;
};

std::string read_file(const std::string& path);

/// Write via temp file + rename so the target is either complete or absent.
void write_file_atomic(const std::string& path, const std::string& content);

/// Shortest decimal form that parses back to exactly the same double.
std::string format_double(double x);

}  // namespace gridnet
