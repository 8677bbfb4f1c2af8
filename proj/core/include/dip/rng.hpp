#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dip {

// xoshiro256++ with explicit distributions. std::mt19937 + std::*_distribution
// are implementation-defined, which would break checkpoint replay across
// standard libraries; everything here is pinned bit-for-bit.
class Rng {
public:
    Rng() : state_{1, 2, 3, 4} {}
    static Rng seeded(uint64_t seed);

    uint64_t next_u64();

    // uniform double in [0, 1), 53-bit resolution
    double uniform();

    // standard normal via Box-Muller (cosine branch only, two uniforms per draw)
    double normal();

    // unbiased integer in [0, n)
    uint64_t below(uint64_t n);

    void fill_normal(std::vector<double>& out);

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    std::array<uint64_t, 4> state_;
};

// Named streams derived from one root seed. Streams are created on demand
// (deterministically from the name) and their states persist in checkpoints,
// so any stream can be replayed in isolation.
class StreamSet {
public:
    StreamSet() : root_(0) {}
    explicit StreamSet(uint64_t root_seed) : root_(root_seed) {}

    Rng& stream(const std::string& name);
    uint64_t root_seed() const { return root_; }

    // checkpoint support
    std::vector<std::pair<std::string, std::array<uint64_t, 4>>> snapshot() const;
    void restore(const std::vector<std::pair<std::string, std::array<uint64_t, 4>>>& states);

private:
    uint64_t root_;
    std::map<std::string, Rng> streams_;
};

uint64_t fnv1a64(const std::string& s);
uint64_t splitmix64(uint64_t& x);

}  // namespace dip
