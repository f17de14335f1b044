#ifndef MODA_TENSOR_HPP
#define MODA_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace moda {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
	return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
	std::ostringstream os;
	os << '[';
	for (std::size_t i = 0; i < shape.size(); ++i)
		os << (i ? "x" : "") << shape[i];
	os << ']';
	return os.str();
}

/**
 * Dense row-major array of doubles with an optional gradient buffer.
 *
 * Tensors are plain values. A tensor only acquires a gradient buffer when it is
 * bound as a parameter of a Graph (or enable_grad() is called explicitly).
 */
class Tensor {
public:
	Tensor() = default;

	explicit Tensor(Shape shape, double fill = 0.0)
		: shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

	Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
		if (shape_numel(shape_) != data_.size())
			throw ShapeError("tensor shape " + shape_str(shape_) + " holds " +
					std::to_string(shape_numel(shape_)) + " elements, got " +
					std::to_string(data_.size()));
	}

	static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

	static Tensor vector(std::vector<double> v) {
		Shape s{v.size()};
		return Tensor(std::move(s), std::move(v));
	}

	/// Builds a rows x cols matrix from nested initializer rows.
	static Tensor matrix(const std::vector<std::vector<double>>& rows) {
		std::size_t r = rows.size();
		std::size_t c = r ? rows.front().size() : 0;
		std::vector<double> d;
		d.reserve(r * c);
		for (const auto& row : rows) {
			if (row.size() != c)
				throw ShapeError("ragged matrix rows");
			d.insert(d.end(), row.begin(), row.end());
		}
		return Tensor(Shape{r, c}, std::move(d));
	}

	const Shape& shape() const noexcept { return shape_; }
	std::size_t rank() const noexcept { return shape_.size(); }
	std::size_t dim(std::size_t i) const { return shape_.at(i); }
	std::size_t size() const noexcept { return data_.size(); }

	std::span<double> data() noexcept { return data_; }
	std::span<const double> data() const noexcept { return data_; }
	const std::vector<double>& values() const noexcept { return data_; }

	double& operator[](std::size_t i) { return data_[i]; }
	double operator[](std::size_t i) const { return data_[i]; }

	/// Element of a rank-2 tensor.
	double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
	double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

	double item() const {
		if (data_.size() != 1)
			throw ShapeError("item() on tensor of shape " + shape_str(shape_));
		return data_[0];
	}

	bool has_grad() const noexcept { return has_grad_; }
	void enable_grad() {
		if (!has_grad_) {
			grad_.assign(data_.size(), 0.0);
			has_grad_ = true;
		}
	}
	void drop_grad() noexcept {
		grad_.clear();
		has_grad_ = false;
	}
	void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }
	std::span<double> grad() noexcept { return grad_; }
	std::span<const double> grad() const noexcept { return grad_; }

	/// Same data under a new shape with equal element count.
	Tensor reshaped(Shape shape) const {
		if (shape_numel(shape) != data_.size())
			throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
		return Tensor(std::move(shape), data_);
	}

	bool all_finite() const {
		for (double v : data_)
			if (!std::isfinite(v))
				return false;
		return true;
	}

	/// Elementwise equality of shape and data (gradients ignored).
	friend bool operator==(const Tensor& a, const Tensor& b) {
		return a.shape_ == b.shape_ && a.data_ == b.data_;
	}

private:
	Shape shape_;
	std::vector<double> data_;
	std::vector<double> grad_;
	bool has_grad_ = false;
};

/// Rows of t (indexed along the leading dimension) selected by idx, in idx order.
inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
	if (t.rank() == 0)
		throw ShapeError("gather_rows on a scalar");
	const std::size_t stride = t.dim(0) ? t.size() / t.dim(0) : 0;
	Shape shape = t.shape();
	shape[0] = idx.size();
	std::vector<double> out;
	out.reserve(idx.size() * stride);
	for (std::size_t i : idx) {
		if (i >= t.dim(0))
			throw std::out_of_range("gather_rows: row " + std::to_string(i) + " of " +
					std::to_string(t.dim(0)));
		auto first = t.data().begin() + static_cast<std::ptrdiff_t>(i * stride);
		out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(stride));
	}
	return Tensor(std::move(shape), std::move(out));
}

} // namespace moda

#endif // MODA_TENSOR_HPP
