#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace occdir {

// Library-wide error type. `code` carries a stable machine-readable name
// (e.g. "ShapeMismatch", "UnknownSourceLabel") that tests match against.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& msg)
        : std::runtime_error(code + ": " + msg), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

private:
    std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& msg) {
    throw Error(code, msg);
}

inline void check(bool cond, const std::string& code, const std::string& msg) {
    if (!cond) fail(code, msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. xoshiro256** seeded via splitmix64. All stochastic code
// in the project draws from this so results are identical across platforms
// and compilers (std:: distributions are implementation-defined).
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
    float uniform_f() { return float(uniform()); }

    // standard normal via Box-Muller; two uniforms per draw, no cached spare
    // (keeps the generator state trivially serializable)
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }
    float normal_f() { return float(normal()); }

    bool bernoulli(double p) { return uniform() < p; }

    // inclusive range
    int uniform_int(int lo, int hi) {
        int n = hi - lo + 1;
        int k = int(uniform() * double(n));
        if (k >= n) k = n - 1;
        return lo + k;
    }

    // independent deterministic substream
    Rng fork(uint64_t stream) const {
        uint64_t x = s_[0] ^ (stream * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
        return Rng(splitmix64(x));
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> s_{};
};

// ---------------------------------------------------------------------------
// Little-endian binary IO helpers for the OCCG/OCCL/OCCW/TXTF formats.
// ---------------------------------------------------------------------------

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, uint32_t(v & 0xffffffffULL));
    put_u32(os, uint32_t(v >> 32));
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline uint32_t get_u32(std::istream& is, const std::string& err_code) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        fail(err_code, "truncated while reading u32");
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
           (uint32_t(b[3]) << 24);
}

inline uint64_t get_u64(std::istream& is, const std::string& err_code) {
    uint64_t lo = get_u32(is, err_code);
    uint64_t hi = get_u32(is, err_code);
    return lo | (hi << 32);
}

inline float get_f32(std::istream& is, const std::string& err_code) {
    uint32_t bits = get_u32(is, err_code);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace occdir
