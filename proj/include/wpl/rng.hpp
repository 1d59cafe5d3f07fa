#pragma once

#include <cmath>
#include <cstdint>

namespace wpl {

// Counter-based stream: the k-th draw of a (seed, stream) pair is a pure
// function of (seed, stream, k), so sequences replay exactly on any platform
// and independent streams never share state.
class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    RngStream(uint64_t seed, uint64_t stream)
        : seed_(seed), stream_(stream), counter_(0), spare_valid_(false) {
        key_ = mix64(seed_ + 0x9E3779B97F4A7C15ULL) ^ mix64(stream_ * 0xBF58476D1CE4E5B9ULL + 0x94D049BB133111EBULL);
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }
    uint64_t counter() const { return counter_; }

    uint64_t next_u64() {
        uint64_t v = mix64(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL);
        return v;
    }

    // [0, 1) with 53 random bits
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // N(0, 1) via Box-Muller; second value of each pair is cached
    double normal() {
        if (spare_valid_) {
            spare_valid_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        spare_valid_ = true;
        return r * std::cos(a);
    }

    // uniform integer in [0, n), n >= 1; rejection-free scaling is fine here
    uint32_t below(uint32_t n) {
        return uint32_t((unsigned __int128)next_u64() * n >> 64);
    }

    // Child stream with an id derived from the parent's (stream, counter);
    // advances the parent so successive splits differ.
    RngStream split() {
        uint64_t child = mix64(stream_ ^ mix64(next_u64() + 0xD1B54A32D192ED03ULL));
        return RngStream(seed_, child);
    }

private:
    static uint64_t mix64(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_;
    uint64_t key_;
    double spare_ = 0.0;
    bool spare_valid_;
};

} // namespace wpl
