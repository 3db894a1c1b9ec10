#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace vmixer {

using Shape = std::vector<int64_t>;

// Raised for malformed inputs: bad files, mismatched shapes, invalid configs.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a computation goes numerically wrong (NaN loss, failed check).
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Row-major strides, innermost (last) axis contiguous.
std::vector<int64_t> row_major_strides(const Shape& shape);

// Deterministic RNG with fixed value transforms, so a seed pins every
// downstream draw regardless of standard-library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(gen_() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Box-Muller; each call consumes two uniforms.
    double normal(double mean = 0.0, double stddev = 1.0);

    // Normal rejected outside mean +/- 2*stddev.
    double trunc_normal(double mean, double stddev);

private:
    std::mt19937_64 gen_;
};

// Worker count for ops that split independent output tiles. Controlled by
// the VMIXER_THREADS environment variable; defaults to 1 (fully serial).
int thread_count();

// Runs fn(begin, end) over [0, n) split into contiguous chunks. Chunks have
// disjoint outputs by contract, so results are identical at any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

// FNV-1a, used for payload checksums and config hashes.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 14695981039346656037ull);

} // namespace vmixer
