#include "dip/rng.hpp"

#include <cmath>

namespace dip {

uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Rng Rng::seeded(uint64_t seed) {
    Rng r;
    uint64_t x = seed;
    for (auto& s : r.state_) s = splitmix64(x);
    // xoshiro must not start from the all-zero state
    if (r.state_[0] == 0 && r.state_[1] == 0 && r.state_[2] == 0 && r.state_[3] == 0)
        r.state_[0] = 0x9e3779b97f4a7c15ull;
    return r;
}

static inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    // u1 in (0, 1] so the log is finite
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

uint64_t Rng::below(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
        r = next_u64();
    } while (r >= limit);
    return r % n;
}

void Rng::fill_normal(std::vector<double>& out) {
    for (auto& v : out) v = normal();
}

Rng& StreamSet::stream(const std::string& name) {
    auto it = streams_.find(name);
    if (it != streams_.end()) return it->second;
    uint64_t seed = root_ ^ fnv1a64(name);
    auto [pos, _] = streams_.emplace(name, Rng::seeded(seed));
    return pos->second;
}

std::vector<std::pair<std::string, std::array<uint64_t, 4>>> StreamSet::snapshot() const {
    std::vector<std::pair<std::string, std::array<uint64_t, 4>>> out;
    out.reserve(streams_.size());
    for (const auto& [name, rng] : streams_) out.emplace_back(name, rng.state());
    return out;
}

void StreamSet::restore(const std::vector<std::pair<std::string, std::array<uint64_t, 4>>>& states) {
    for (const auto& [name, st] : states) stream(name).set_state(st);
}

}  // namespace dip
