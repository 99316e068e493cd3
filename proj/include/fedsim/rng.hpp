#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedsim {

// Every random decision in the simulator flows through a named stream derived
// from the run seed, so results do not depend on scheduling or call order.
// Stream derivation contract (relied on by the tests' reference loops):
//   client selection at round t : derive(seed, {kSelectTag, t})
//   client k's work at round t  : derive(seed, {kClientTag, t, k})
//   parameter init, layer i     : derive(seed, {kInitTag, i})
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(mix_(seed)) {}

    static constexpr std::uint64_t kSelectTag = 0x73656c6563740000ULL;  // "select"
    static constexpr std::uint64_t kClientTag = 0x636c69656e740000ULL;  // "client"
    static constexpr std::uint64_t kInitTag = 0x696e697400000000ULL;    // "init"
    static constexpr std::uint64_t kStreamTag = 0x73747265616d0000ULL;  // "stream"
    static constexpr std::uint64_t kRenderTag = 0x72656e6465720000ULL;  // "render"
    static constexpr std::uint64_t kDataTag = 0x6461746100000000ULL;    // "data"

    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
        std::uint64_t h = mix_(seed);
        for (std::uint64_t p : path) h = mix_(h ^ mix_(p));
        return Rng(h);
    }

    std::uint64_t next_u64() { return gen_(); }

    // inclusive bounds
    std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
        return std::uniform_int_distribution<std::uint64_t>(lo, hi)(gen_);
    }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }

    double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen_); }

    double gamma(double shape) {
        return std::gamma_distribution<double>(shape, 1.0)(gen_);
    }

    // Symmetric Dirichlet via normalized gamma draws.
    std::vector<double> dirichlet(double alpha, std::size_t n) {
        std::vector<double> p(n);
        double sum = 0.0;
        for (auto& v : p) {
            v = gamma(alpha);
            sum += v;
        }
        if (sum <= 0.0) {  // pathological underflow: fall back to uniform
            for (auto& v : p) v = 1.0 / static_cast<double>(n);
            return p;
        }
        for (auto& v : p) v /= sum;
        return p;
    }

    // Fisher-Yates permutation of 0..n-1. Kept explicit (not std::shuffle) so the
    // draw sequence is pinned by this file alone.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i, n - 1));
            std::swap(idx[i], idx[j]);
        }
        return idx;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    // splitmix64 finalizer
    static std::uint64_t mix_(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 gen_;
};

}  // namespace fedsim
