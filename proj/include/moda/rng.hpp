#ifndef MODA_RNG_HPP
#define MODA_RNG_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <utility>
#include <vector>

namespace moda {

/**
 * Counter-based generator: every draw is a pure function of (seed, stream, counter).
 *
 * draw = mix(mix(mix(seed) ^ stream) ^ counter), where mix is the SplitMix64
 * finaliser. Any implementation of this recipe reproduces the same streams,
 * independent of platform or standard library.
 */
class CounterRng {
public:
	CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(mix(mix(seed) ^ stream)) {}

	static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
		z += 0x9e3779b97f4a7c15ULL;
		z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
		z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
		return z ^ (z >> 31);
	}

	std::uint64_t at(std::uint64_t counter) const noexcept { return mix(key_ ^ counter); }

	std::uint64_t next_u64() noexcept { return at(counter_++); }

	/// Uniform in [0, 1) with 53 random bits.
	double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

	double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

	/// Standard normal via Box-Muller; consumes two counters per draw.
	double normal() noexcept {
		const double u1 = 1.0 - uniform(); // (0, 1]
		const double u2 = uniform();
		return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
	}

	/// Uniform integer in [0, n) by rejection to avoid modulo bias.
	std::uint64_t below(std::uint64_t n) noexcept {
		if (n <= 1)
			return 0;
		const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
		std::uint64_t x;
		do
			x = next_u64();
		while (x >= limit);
		return x % n;
	}

	std::uint64_t counter() const noexcept { return counter_; }

private:
	std::uint64_t key_;
	std::uint64_t counter_ = 0;
};

/// Fisher-Yates permutation of [0, n) drawn from the given stream.
inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
	std::vector<std::size_t> idx(n);
	std::iota(idx.begin(), idx.end(), std::size_t{0});
	CounterRng rng(seed, stream);
	for (std::size_t i = n; i > 1; --i)
		std::swap(idx[i - 1], idx[rng.below(i)]);
	return idx;
}

// Stream ids keep independent consumers of one seed from sharing draws.
namespace streams {
inline constexpr std::uint64_t kInit = 0x1000;
inline constexpr std::uint64_t kBlobs = 0x2000;
inline constexpr std::uint64_t kShuffle = 0x3000ULL << 32; // + epoch
inline constexpr std::uint64_t kSplit = 0x4000;
inline constexpr std::uint64_t kSubtasks = 0x5000;
inline constexpr std::uint64_t kGradcheck = 0x6000;
} // namespace streams

} // namespace moda

#endif // MODA_RNG_HPP
