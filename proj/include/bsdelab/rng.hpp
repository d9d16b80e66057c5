#pragma once

// Counter-based Gaussian noise. Every normal variate is a pure function of
// (seed, path, mode, step, component), so trajectories do not depend on the
// order in which paths or steps are generated.

#include <algorithm>
#include <array>
#include <cstddef>
#include <vector>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include <boost/random/normal_distribution.hpp>

namespace bsdelab {

/// Philox4x32-10 block function (Salmon et al., Random123).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * ctr[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += W0;
        key[1] += W1;
    }
    return ctr;
}

/// Four standard normals for a pair of steps: z[0], z[1] are component 0 of the
/// even and odd step, z[2], z[3] component 1.
struct NormalQuad {
    std::array<double, 4> z;
};

/// Domain tags separate independent uses of the same seed.
enum class NoiseDomain : std::uint32_t { forward = 0, auxiliary = 1 };

/// 64-bit word source over consecutive Philox blocks of one counter prefix;
/// satisfies UniformRandomBitGenerator so Boost's ziggurat normal can draw from it.
class PhiloxWords {
public:
    using result_type = std::uint64_t;
    PhiloxWords(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) : ctr_(ctr), key_(key) {}
    /// Continue a stream whose first `blocks` outputs were computed elsewhere.
    PhiloxWords(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key, const std::uint64_t* pre,
                std::uint32_t blocks)
        : ctr_(ctr), key_(key), block_(blocks), pre_(pre), pre_left_(2 * blocks) {}
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }
    result_type operator()() {
        if (pre_left_) return --pre_left_, *pre_++;
        if (used_ == 2) refill();
        return buf_[used_++];
    }

private:
    void refill() {
        auto c = ctr_;
        c[3] ^= block_++ << 24;
        const auto w = philox4x32(c, key_);
        buf_[0] = (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
        buf_[1] = (static_cast<std::uint64_t>(w[2]) << 32) | w[3];
        used_ = 0;
    }
    std::array<std::uint32_t, 4> ctr_;
    std::array<std::uint32_t, 2> key_;
    std::uint32_t block_ = 0;
    std::array<std::uint64_t, 2> buf_{};
    int used_ = 2;
    const std::uint64_t* pre_ = nullptr;
    std::uint32_t pre_left_ = 0;
};

namespace detail {
/// Philox4x32-10 on `count` counters that differ only in word 2, structure of
/// arrays so the rounds vectorize. Writes two 64-bit words per counter.
inline void philox_lanes(std::array<std::uint32_t, 4> base, std::uint32_t first, std::size_t count,
                         std::array<std::uint32_t, 2> key, std::uint32_t block, std::uint64_t* out) {
    constexpr std::size_t W = 16;
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (std::size_t s = 0; s < count; s += W) {
        const std::size_t m = std::min(W, count - s);
        alignas(64) std::uint32_t c0[W], c1[W], c2[W], c3[W];
        for (std::size_t i = 0; i < W; ++i) {
            c0[i] = base[0], c1[i] = base[1], c2[i] = first + static_cast<std::uint32_t>(s + i);
            c3[i] = base[3] ^ (block << 24);
        }
        std::uint32_t k0 = key[0], k1 = key[1];
        for (int round = 0; round < 10; ++round) {
            for (std::size_t i = 0; i < W; ++i) {
                const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * c0[i];
                const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * c2[i];
                const auto n0 = static_cast<std::uint32_t>(p1 >> 32) ^ c1[i] ^ k0;
                const auto n2 = static_cast<std::uint32_t>(p0 >> 32) ^ c3[i] ^ k1;
                c1[i] = static_cast<std::uint32_t>(p1);
                c3[i] = static_cast<std::uint32_t>(p0);
                c0[i] = n0, c2[i] = n2;
            }
            k0 += W0, k1 += W1;
        }
        for (std::size_t i = 0; i < m; ++i) {
            out[2 * (s + i)] = (static_cast<std::uint64_t>(c0[i]) << 32) | c1[i];
            out[2 * (s + i) + 1] = (static_cast<std::uint64_t>(c2[i]) << 32) | c3[i];
        }
    }
}
} // namespace detail

class NoiseStream {
public:
    explicit NoiseStream(std::uint64_t seed) : seed_(seed) {}

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

    /// Normals for steps (2*pair, 2*pair+1) of `mode` on path `stream_id`.
    [[nodiscard]] NormalQuad quad(std::uint64_t stream_id, std::uint32_t mode, std::uint32_t pair,
                                  NoiseDomain domain = NoiseDomain::forward) const {
        auto src = words(stream_id, mode, pair, domain);
        boost::random::normal_distribution<double> nd;
        NormalQuad q;
        for (double& z : q.z) z = nd(src);
        return q;
    }

    /// Component 0 only, for the even and odd step; equals quad().z[0..1].
    [[nodiscard]] std::array<double, 2> primary(std::uint64_t stream_id, std::uint32_t mode, std::uint32_t pair,
                                                NoiseDomain domain = NoiseDomain::forward) const {
        auto src = words(stream_id, mode, pair, domain);
        boost::random::normal_distribution<double> nd;
        const double a = nd(src);
        return {a, nd(src)};
    }

    /// primary() for modes 0..d-1 at once: out[2k], out[2k+1].
    void primary_modes(std::uint64_t stream_id, std::uint32_t pair, std::size_t d, double* out,
                       NoiseDomain domain = NoiseDomain::forward) const {
        batch(stream_id, pair, d, 1, domain, [&](std::size_t k, PhiloxWords& src) {
            boost::random::normal_distribution<double> nd;
            out[2 * k] = nd(src);
            out[2 * k + 1] = nd(src);
        });
    }
    /// quad() for modes 0..d-1 at once: out[4k + i] = quad(k).z[i].
    void quad_modes(std::uint64_t stream_id, std::uint32_t pair, std::size_t d, double* out,
                    NoiseDomain domain = NoiseDomain::forward) const {
        batch(stream_id, pair, d, 2, domain, [&](std::size_t k, PhiloxWords& src) {
            boost::random::normal_distribution<double> nd;
            for (int i = 0; i < 4; ++i) out[4 * k + i] = nd(src);
        });
    }

    /// (component 0, component 1) for a single step.
    [[nodiscard]] std::array<double, 2> pair(std::uint64_t stream_id, std::uint32_t mode, std::uint32_t step,
                                             NoiseDomain domain = NoiseDomain::forward) const {
        const NormalQuad q = quad(stream_id, mode, step >> 1, domain);
        const unsigned odd = step & 1u;
        return {q.z[odd], q.z[2 + odd]};
    }

    /// Uniform in (0,1) keyed like `pair`; used for test and probe sampling.
    [[nodiscard]] double uniform(std::uint64_t stream_id, std::uint32_t index) const {
        const auto w = philox4x32({static_cast<std::uint32_t>(stream_id), static_cast<std::uint32_t>(stream_id >> 32),
                                   index, 0x7fffffffu},
                                  {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
        return (static_cast<double>(w[0]) + 0.5) * 0x1p-32;
    }

private:
    template <class F>
    void batch(std::uint64_t stream_id, std::uint32_t pair, std::size_t d, std::uint32_t blocks, NoiseDomain domain,
               F&& draw) const {
        if (pair >= (1u << 24)) throw std::out_of_range("NoiseStream: step index exceeds 2^25");
        const std::uint32_t tag = static_cast<std::uint32_t>(domain) << 28;
        const std::array<std::uint32_t, 4> base{static_cast<std::uint32_t>(stream_id),
                                                static_cast<std::uint32_t>(stream_id >> 32) ^ tag, 0u, pair};
        const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
        thread_local std::vector<std::uint64_t> w[2];
        for (std::uint32_t b = 0; b < blocks; ++b) {
            w[b].resize(2 * d);
            detail::philox_lanes(base, 0u, d, key, b, w[b].data());
        }
        std::uint64_t buf[4];
        for (std::size_t k = 0; k < d; ++k) {
            for (std::uint32_t b = 0; b < blocks; ++b) buf[2 * b] = w[b][2 * k], buf[2 * b + 1] = w[b][2 * k + 1];
            auto ctr = base;
            ctr[2] = static_cast<std::uint32_t>(k);
            PhiloxWords src(ctr, key, buf, blocks);
            draw(k, src);
        }
    }

    [[nodiscard]] PhiloxWords words(std::uint64_t stream_id, std::uint32_t mode, std::uint32_t pair,
                                    NoiseDomain domain) const {
        if (pair >= (1u << 24)) throw std::out_of_range("NoiseStream: step index exceeds 2^25");
        const std::uint32_t tag = static_cast<std::uint32_t>(domain) << 28;
        return PhiloxWords({static_cast<std::uint32_t>(stream_id), static_cast<std::uint32_t>(stream_id >> 32) ^ tag,
                            mode, pair},
                           {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
    }

    std::uint64_t seed_;
};

} // namespace bsdelab
