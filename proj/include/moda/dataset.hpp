#ifndef MODA_DATASET_HPP
#define MODA_DATASET_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "moda/normalization.hpp"
#include "moda/rng.hpp"
#include "moda/tensor.hpp"

namespace moda {

/// Malformed or unreadable input file.
class FormatError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Labelled samples; inputs are [N x features] or [N x C x H x W].
struct Dataset {
	Tensor inputs;
	std::vector<std::size_t> labels;
	std::size_t classes = 0;
	std::string name;
	Normalization normalization;

	std::size_t size() const noexcept { return labels.size(); }

	/// Per-sample input shape.
	Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

	void validate() const {
		if (inputs.rank() < 2 || inputs.dim(0) != labels.size())
			throw ShapeError("dataset '" + name + "': inputs " + shape_str(inputs.shape()) + " vs " +
					std::to_string(labels.size()) + " labels");
		for (std::size_t l : labels)
			if (l >= classes)
				throw std::out_of_range("dataset '" + name + "': label " + std::to_string(l) + " >= " +
						std::to_string(classes) + " classes");
		if (!inputs.all_finite())
			throw std::invalid_argument("dataset '" + name + "': non-finite input");
	}

	/// Samples at idx, in idx order, with the same class space.
	Dataset subset(std::span<const std::size_t> idx) const {
		Dataset d;
		d.inputs = gather_rows(inputs, idx);
		for (std::size_t i : idx)
			d.labels.push_back(labels.at(i));
		d.classes = classes;
		d.name = name;
		d.normalization = normalization;
		return d;
	}

	/// Samples whose label is in keep, relabelled to their position in keep.
	Dataset restrict_to(std::span<const std::size_t> keep) const {
		std::vector<std::size_t> idx;
		std::vector<std::size_t> remap(classes, SIZE_MAX);
		for (std::size_t p = 0; p < keep.size(); ++p)
			remap.at(keep[p]) = p;
		for (std::size_t i = 0; i < labels.size(); ++i)
			if (remap[labels[i]] != SIZE_MAX)
				idx.push_back(i);
		Dataset d = subset(idx);
		for (std::size_t& l : d.labels)
			l = remap[l];
		d.classes = keep.size();
		return d;
	}

	std::vector<std::size_t> class_counts() const {
		std::vector<std::size_t> c(classes, 0);
		for (std::size_t l : labels)
			++c.at(l);
		return c;
	}
};

struct DataSplit {
	Dataset train;
	Dataset test;
};

struct BlobsOptions {
	std::size_t classes = 4;
	std::size_t per_class = 250;
	std::size_t dim = 2;
	double spread = 1.0;
	std::uint64_t seed = 0;
};

/**
 * Gaussian clusters with class c centred at 4·(cos 2πc/n, sin 2πc/n, 0, ...).
 *
 * Sample p of class c is drawn from counter range [(c·per_class + p)·dim·2, ...) of
 * the blobs stream. The first ⌊0.8·per_class⌋ samples of each class form the training
 * split, the rest the test split; both interleave classes round-robin.
 */
inline DataSplit make_blobs(const BlobsOptions& o) {
	if (o.classes < 2)
		throw std::invalid_argument("make_blobs: need at least 2 classes");
	if (o.per_class < 2)
		throw std::invalid_argument("make_blobs: need at least 2 samples per class");
	if (o.dim < 2)
		throw std::invalid_argument("make_blobs: dim must be >= 2");
	if (!(o.spread >= 0.0) || !std::isfinite(o.spread))
		throw std::invalid_argument("make_blobs: spread must be finite and >= 0");
	const std::size_t n_train = o.per_class * 8 / 10;
	const std::size_t n_test = o.per_class - n_train;
	if (n_train == 0 || n_test == 0)
		throw std::invalid_argument("make_blobs: per_class too small for an 80/20 split");

	auto sample = [&](std::size_t c, std::size_t p, std::vector<double>& out) {
		CounterRng rng(o.seed, streams::kBlobs);
		const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(o.classes);
		for (std::size_t k = 0; k < o.dim; ++k) {
			// Two draws per coordinate for Box-Muller.
			const std::uint64_t base = ((c * o.per_class + p) * o.dim + k) * 2;
			const double u1 = 1.0 - static_cast<double>(rng.at(base) >> 11) * 0x1.0p-53;
			const double u2 = static_cast<double>(rng.at(base + 1) >> 11) * 0x1.0p-53;
			const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
			const double centre = k == 0 ? 4.0 * std::cos(angle) : (k == 1 ? 4.0 * std::sin(angle) : 0.0);
			out.push_back(centre + o.spread * z);
		}
	};

	auto build = [&](std::size_t first, std::size_t count, const char* tag) {
		Dataset d;
		std::vector<double> data;
		data.reserve(count * o.classes * o.dim);
		for (std::size_t p = first; p < first + count; ++p)
			for (std::size_t c = 0; c < o.classes; ++c) {
				sample(c, p, data);
				d.labels.push_back(c);
			}
		d.inputs = Tensor(Shape{count * o.classes, o.dim}, std::move(data));
		d.classes = o.classes;
		d.name = std::string("blobs-") + tag;
		return d;
	};
	return {build(0, n_train, "train"), build(n_train, n_test, "test")};
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path, const char* what) {
	unsigned char b[4];
	if (!in.read(reinterpret_cast<char*>(b), 4))
		throw FormatError(path + ": truncated header while reading " + what);
	return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

inline std::vector<unsigned char> read_payload(std::istream& in, const std::string& path, std::size_t bytes) {
	std::vector<unsigned char> buf(bytes);
	in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
	if (static_cast<std::size_t>(in.gcount()) != bytes)
		throw FormatError(path + ": truncated payload, expected " + std::to_string(bytes) + " bytes, got " +
				std::to_string(in.gcount()));
	return buf;
}

} // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Raw contents of an IDX u8 file: dimensions from the header plus the payload bytes.
struct IdxArray {
	std::vector<std::uint32_t> dims;
	std::vector<unsigned char> bytes;
};

/// Parses a big-endian IDX file holding unsigned bytes with the given magic.
inline IdxArray read_idx_file(const std::string& path, std::uint32_t expected_magic) {
	std::ifstream in(path, std::ios::binary);
	if (!in)
		throw FormatError(path + ": cannot open");
	const std::uint32_t magic = detail::read_be32(in, path, "magic");
	if (magic != expected_magic) {
		char buf[64];
		std::snprintf(buf, sizeof buf, "bad magic 0x%08x, expected 0x%08x", magic, expected_magic);
		throw FormatError(path + ": " + buf);
	}
	IdxArray a;
	const std::size_t rank = magic & 0xff;
	std::size_t total = 1;
	for (std::size_t i = 0; i < rank; ++i) {
		a.dims.push_back(detail::read_be32(in, path, "dimension"));
		total *= a.dims.back();
	}
	a.bytes = detail::read_payload(in, path, total);
	return a;
}

/**
 * Reads an IDX image/label pair (magic 0x00000803 / 0x00000801) into [N x 1 x H x W]
 * inputs scaled to [0, 1]. classes is max label + 1 unless given.
 */
inline Dataset read_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes = 0,
		std::size_t limit = 0) {
	IdxArray img = read_idx_file(images_path, kIdxImagesMagic);
	IdxArray lab = read_idx_file(labels_path, kIdxLabelsMagic);
	if (img.dims[0] != lab.dims[0])
		throw FormatError("count mismatch: " + images_path + " has " + std::to_string(img.dims[0]) + " images, " +
				labels_path + " has " + std::to_string(lab.dims[0]) + " labels");
	std::size_t n = img.dims[0];
	if (limit && limit < n)
		n = limit;
	const std::size_t h = img.dims[1], w = img.dims[2];
	Dataset d;
	std::vector<double> data(n * h * w);
	for (std::size_t i = 0; i < data.size(); ++i)
		data[i] = static_cast<double>(img.bytes[i]) / 255.0;
	d.inputs = Tensor(Shape{n, 1, h, w}, std::move(data));
	std::size_t max_label = 0;
	for (std::size_t i = 0; i < n; ++i) {
		d.labels.push_back(lab.bytes[i]);
		max_label = std::max<std::size_t>(max_label, lab.bytes[i]);
	}
	d.classes = classes ? classes : max_label + 1;
	d.name = images_path;
	d.normalization = Normalization{{0.0}, {1.0 / 255.0}};
	d.validate();
	return d;
}

/// Strong/weak class layout for a module-replacement experiment.
struct SplitPlan {
	std::vector<std::size_t> strong_classes;
	std::vector<std::size_t> weak_classes;
	std::size_t target = 0;
	/// Share of the target class's training samples given to the strong side; the rest go to the weak side.
	double target_strong_fraction = 0.5;
	/// Fraction of each weak training class kept for the overfit variant.
	double overfit_fraction = 0.1;
	std::uint64_t seed = 0;

	void validate(std::size_t classes) const {
		auto has = [](const std::vector<std::size_t>& v, std::size_t c) {
			return std::find(v.begin(), v.end(), c) != v.end();
		};
		if (!has(strong_classes, target) || !has(weak_classes, target))
			throw std::invalid_argument("split plan: target class must be in both strong and weak sets");
		for (const auto* v : {&strong_classes, &weak_classes}) {
			if (std::set<std::size_t>(v->begin(), v->end()).size() != v->size())
				throw std::invalid_argument("split plan: duplicate class");
			for (std::size_t c : *v)
				if (c >= classes)
					throw std::out_of_range("split plan: class " + std::to_string(c) + " out of range");
		}
		if (!(target_strong_fraction >= 0.0 && target_strong_fraction <= 1.0) ||
				!(overfit_fraction > 0.0 && overfit_fraction <= 1.0))
			throw std::invalid_argument("split plan: fractions out of range");
	}
};

struct ReplacementSplits {
	Dataset strong_train, strong_test;
	Dataset weak_train, weak_test;
	Dataset weak_overfit_train;
	/// Original training-set rows of the target class on each side (for audits).
	std::vector<std::size_t> target_rows_strong, target_rows_weak;
};

/**
 * Splits a dataset for a replacement experiment.
 *
 * The target class's training samples are partitioned (seeded) between the strong
 * and weak sides; every other class goes wholly to each side that lists it. Labels
 * are re-indexed to positions in the plan's class lists. The overfit variant keeps
 * ⌊overfit_fraction·n_c⌋ samples of each weak training class. Test sets are the
 * unmodified test samples of each side's classes.
 */
inline ReplacementSplits split_for_replacement(const DataSplit& data, const SplitPlan& plan) {
	plan.validate(data.train.classes);
	const Dataset& train = data.train;
	std::vector<std::size_t> target_rows;
	for (std::size_t i = 0; i < train.size(); ++i)
		if (train.labels[i] == plan.target)
			target_rows.push_back(i);
	if (target_rows.empty())
		throw std::invalid_argument("split plan: target class has no training samples");
	const auto perm = permutation(target_rows.size(), plan.seed, streams::kSplit);
	const auto n_strong = static_cast<std::size_t>(
			std::floor(plan.target_strong_fraction * static_cast<double>(target_rows.size())));
	ReplacementSplits out;
	for (std::size_t p = 0; p < perm.size(); ++p)
		(p < n_strong ? out.target_rows_strong : out.target_rows_weak).push_back(target_rows[perm[p]]);
	std::sort(out.target_rows_strong.begin(), out.target_rows_strong.end());
	std::sort(out.target_rows_weak.begin(), out.target_rows_weak.end());

	auto side = [&](const std::vector<std::size_t>& classes, const std::vector<std::size_t>& target_keep) {
		std::vector<std::size_t> idx;
		for (std::size_t i = 0; i < train.size(); ++i) {
			const std::size_t l = train.labels[i];
			if (l == plan.target) {
				if (std::binary_search(target_keep.begin(), target_keep.end(), i))
					idx.push_back(i);
			} else if (std::find(classes.begin(), classes.end(), l) != classes.end()) {
				idx.push_back(i);
			}
		}
		Dataset d = train.subset(idx);
		return d.restrict_to(classes);
	};
	out.strong_train = side(plan.strong_classes, out.target_rows_strong);
	out.weak_train = side(plan.weak_classes, out.target_rows_weak);
	out.strong_test = data.test.restrict_to(plan.strong_classes);
	out.weak_test = data.test.restrict_to(plan.weak_classes);
	for (const Dataset* d : {&out.strong_train, &out.weak_train})
		for (std::size_t c = 0; c < d->classes; ++c)
			if (d->class_counts()[c] == 0)
				throw std::invalid_argument("split plan: empty class bucket " + std::to_string(c) + " in " + d->name);

	std::vector<std::size_t> keep;
	for (std::size_t c = 0; c < out.weak_train.classes; ++c) {
		std::vector<std::size_t> rows;
		for (std::size_t i = 0; i < out.weak_train.size(); ++i)
			if (out.weak_train.labels[i] == c)
				rows.push_back(i);
		const auto take = static_cast<std::size_t>(std::floor(plan.overfit_fraction * static_cast<double>(rows.size())));
		if (take == 0)
			throw std::invalid_argument("split plan: overfit fraction leaves class " + std::to_string(c) + " empty");
		const auto p = permutation(rows.size(), plan.seed, streams::kSplit + 1 + c);
		for (std::size_t k = 0; k < take; ++k)
			keep.push_back(rows[p[k]]);
	}
	std::sort(keep.begin(), keep.end());
	out.weak_overfit_train = out.weak_train.subset(keep);
	out.weak_overfit_train.name = out.weak_train.name + "-overfit";
	return out;
}

} // namespace moda

#endif // MODA_DATASET_HPP
