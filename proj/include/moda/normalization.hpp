#ifndef MODA_NORMALIZATION_HPP
#define MODA_NORMALIZATION_HPP

#include <string>
#include <vector>

namespace moda {

/**
 * Affine input transform x' = (x - mean) * scale that was applied to a dataset.
 *
 * Either vector may hold one entry per feature or a single entry applied to all
 * features. Empty vectors mean the identity. Models remember the normalisation
 * of the data they were trained on so evaluation can refuse mismatched inputs.
 */
struct Normalization {
	std::vector<double> mean;
	std::vector<double> scale;

	bool is_identity() const noexcept { return mean.empty() && scale.empty(); }
	friend bool operator==(const Normalization&, const Normalization&) = default;
};

} // namespace moda

#endif // MODA_NORMALIZATION_HPP
