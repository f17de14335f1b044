#ifndef MODA_DIGEST_HPP
#define MODA_DIGEST_HPP

#include <bit>
#include <cstdint>
#include <span>

#include "moda/network.hpp"

namespace moda {

/// Incremental 64-bit FNV-1a.
class Fnv1a {
public:
	void update(std::span<const unsigned char> bytes) noexcept {
		for (unsigned char b : bytes) {
			h_ ^= b;
			h_ *= 0x100000001b3ULL;
		}
	}

	/// Hashes the little-endian IEEE-754 bytes of each value.
	void update(std::span<const double> values) noexcept {
		for (double v : values) {
			std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
			unsigned char le[8];
			for (int i = 0; i < 8; ++i)
				le[i] = static_cast<unsigned char>(bits >> (8 * i));
			update(std::span<const unsigned char>(le, 8));
		}
	}

	std::uint64_t value() const noexcept { return h_; }

private:
	std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

/// FNV-1a over every parameter tensor of a model, in layer order (weight then bias).
inline std::uint64_t model_digest(const Model& m) {
	Fnv1a h;
	for (const Tensor* t : m.parameters())
		h.update(t->data());
	return h.value();
}

} // namespace moda

#endif // MODA_DIGEST_HPP
