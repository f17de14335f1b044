#ifndef MODA_TEST_SUPPORT_HPP
#define MODA_TEST_SUPPORT_HPP

#include <cstdint>
#include <vector>

#include "moda/moda.hpp"

namespace moda::test {

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
	CounterRng rng(seed, 0x7e57);
	Tensor t(std::move(s));
	for (double& v : t.data())
		v = rng.uniform(lo, hi);
	return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
	double m = 0.0;
	for (std::size_t i = 0; i < a.size(); ++i)
		m = std::max(m, std::abs(a[i] - b[i]));
	return m;
}

/// The 4-class blobs benchmark model shared by several suites; trained once per process.
struct BlobsFixture {
	DataSplit data;
	Model model;
	std::vector<ModuleSpec> modules;
};

inline const BlobsFixture& blobs_fixture() {
	static const BlobsFixture f = [] {
		BlobsFixture b;
		b.data = make_blobs(BlobsOptions{4, 250, 2, 1.0, 1});
		TrainConfig cfg;
		cfg.epochs = 60;
		cfg.seed = 3;
		cfg.eval_every = 0;
		b.model = train(Model::build(ModelSpec::mlp(2, {32, 32}, 4, 7)), b.data.train, cfg).model;
		b.modules = decompose_all(b.model, b.data.train, 0.9);
		return b;
	}();
	return f;
}

/// A small untrained CNN on random 1x8x8 images with labels drawn at random.
inline Model small_cnn(std::uint64_t seed, std::size_t classes = 3) {
	ModelSpec s;
	s.layers = {{LayerKind::Conv3x3, 3}, {LayerKind::MaxPool2x2, 0}, {LayerKind::Conv3x3, 4},
			{LayerKind::MaxPool2x2, 0}, {LayerKind::Flatten, 0}, {LayerKind::Dense, 6},
			{LayerKind::Output, classes}};
	s.input_shape = {1, 8, 8};
	s.classes = classes;
	s.seed = seed;
	return Model::build(s);
}

inline Dataset random_images(std::size_t n, std::size_t classes, std::uint64_t seed) {
	Dataset d;
	d.inputs = random_tensor(Shape{n, 1, 8, 8}, seed, 0.0, 1.0);
	for (std::size_t i = 0; i < n; ++i)
		d.labels.push_back(i % classes);
	d.classes = classes;
	d.name = "random-images";
	return d;
}

} // namespace moda::test

#endif // MODA_TEST_SUPPORT_HPP
