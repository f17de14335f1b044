#include <cmath>
#include <utility>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace moda;
using moda::test::max_abs_diff;
using moda::test::random_tensor;

TEST(Network, SameSeedSameParameters) {
	const Model a = Model::build(ModelSpec::mlp(2, {4}, 3, 5));
	const Model b = Model::build(ModelSpec::mlp(2, {4}, 3, 5));
	EXPECT_EQ(model_digest(a), model_digest(b));
	const Model c = Model::build(ModelSpec::mlp(2, {4}, 3, 6));
	EXPECT_NE(model_digest(a), model_digest(c));
}

TEST(Network, ParameterCounts) {
	EXPECT_EQ(count_params(Model::build(ModelSpec::mlp(2, {4}, 3, 0))).total, 27u);
	EXPECT_EQ(count_params(Model::build(ModelSpec::mlp(10, {}, 5, 0))).total, 55u);
	ModelSpec conv;
	conv.layers = {{LayerKind::Conv3x3, 4}, {LayerKind::Flatten, 0}, {LayerKind::Output, 2}};
	conv.input_shape = {2, 4, 4};
	conv.classes = 2;
	const auto t = count_params(Model::build(conv));
	EXPECT_EQ(t.per_layer[0], 76u);
	EXPECT_EQ(t.per_layer[2], 4u * 16 * 2 + 2);
}

TEST(Network, LenetStyleHandCount) {
	const Model m = moda::test::small_cnn(1);
	// conv 1->3: 27+3, conv 3->4: 108+4, flatten 4*2*2=16 -> dense 6: 96+6, output 6->3: 18+3
	EXPECT_EQ(count_params(m).total, 30u + 112 + 102 + 21);
}

TEST(Network, FlopCounts) {
	EXPECT_EQ(count_flops(Model::build(ModelSpec::mlp(10, {}, 5, 0))).total, 100u);
	ModelSpec conv;
	conv.layers = {{LayerKind::Conv3x3, 2}, {LayerKind::Flatten, 0}, {LayerKind::Output, 2}};
	conv.input_shape = {1, 4, 4};
	conv.classes = 2;
	EXPECT_EQ(count_flops(Model::build(conv)).per_layer[0], 576u);
}

TEST(Network, ConvDominatesFlopsDenseDominatesWeights) {
	ModelSpec s;
	s.layers = {{LayerKind::Conv3x3, 8}, {LayerKind::MaxPool2x2, 0}, {LayerKind::Conv3x3, 16},
			{LayerKind::MaxPool2x2, 0}, {LayerKind::Flatten, 0}, {LayerKind::Dense, 64}, {LayerKind::Output, 10}};
	s.input_shape = {1, 28, 28};
	s.classes = 10;
	const Model m = Model::build(s);
	const auto p = count_params(m), f = count_flops(m);
	const std::size_t conv_p = p.per_layer[0] + p.per_layer[2], conv_f = f.per_layer[0] + f.per_layer[2];
	EXPECT_LT(conv_p * 2, p.total);
	EXPECT_GT(conv_f * 2, f.total);
}

TEST(Network, ZeroInputZeroWeightsGiveZeroActivations) {
	Model m = Model::build(ModelSpec::mlp(3, {4}, 2, 1));
	for (Tensor* t : m.parameters())
		std::fill(t->data().begin(), t->data().end(), 0.0);
	Graph g;
	const auto r = forward_record(g, std::as_const(m), Tensor(Shape{5, 3}), {});
	for (double v : r.acts.layers[0].value().data())
		EXPECT_EQ(v, 0.0);
}

TEST(Network, RecordsOnlyHiddenLayers) {
	const Model m = Model::build(ModelSpec::mlp(2, {4}, 3, 1));
	Graph g;
	const auto r = forward_record(g, m, random_tensor(Shape{7, 2}, 1), {});
	ASSERT_EQ(r.acts.layers.size(), 1u);
	EXPECT_EQ(r.acts.layers[0].shape(), (Shape{7, 4}));
}

TEST(Network, ConvRecordIsSpatialMeanOfReluMap) {
	const Model m = moda::test::small_cnn(2);
	const Tensor x = random_tensor(Shape{3, 1, 8, 8}, 4);
	Graph g;
	const auto r = forward_record(g, m, x, {});
	Graph h;
	const Layer& c0 = m.layer(0);
	Var map = ops::relu(ops::conv2d(h.view(x), h.view(c0.weight), h.view(c0.bias)));
	EXPECT_LE(max_abs_diff(r.acts.layers[0].value(), ops::spatial_mean(map).value()), 1e-12);
	for (const Var& v : r.acts.layers)
		for (double a : v.value().data())
			EXPECT_GE(a, 0.0);
}

TEST(Network, RecordingDoesNotChangeLogitsOrParameters) {
	Model m = moda::test::small_cnn(3);
	const std::size_t before = count_params(m).total;
	const Tensor x = random_tensor(Shape{4, 1, 8, 8}, 5);
	Graph g;
	const Tensor rec = forward_record(g, m, x, {}).logits.value();
	EXPECT_EQ(rec.values(), predict_logits(m, x).values());
	EXPECT_EQ(count_params(m).total, before);
}

TEST(Network, FullMasksMatchForward) {
	for (std::uint64_t s = 0; s < 3; ++s) {
		const Model m = s == 0 ? Model::build(ModelSpec::mlp(3, {8, 6}, 4, s)) : moda::test::small_cnn(s);
		const Tensor x = s == 0 ? random_tensor(Shape{6, 3}, 9) : random_tensor(Shape{6, 1, 8, 8}, 9);
		EXPECT_LE(max_abs_diff(forward_masked(m, x, full_masks(m)), predict_logits(m, x)), 1e-12);
	}
}

TEST(Network, AllFalseHiddenMaskGivesBiasChain) {
	const Model m = Model::build(ModelSpec::mlp(3, {5, 4}, 2, 8));
	UnitMasks mk = full_masks(m);
	for (auto& h : mk.hidden)
		std::fill(h.begin(), h.end(), false);
	const Tensor out = forward_masked(m, random_tensor(Shape{3, 3}, 1), mk);
	for (std::size_t i = 0; i < 3; ++i)
		for (std::size_t c = 0; c < 2; ++c)
			EXPECT_EQ(out.at(i, c), m.layer(2).bias[c]);
}

TEST(Network, RandomMaskMatchesSubmatrixRecompute) {
	const Model m = Model::build(ModelSpec::mlp(3, {6, 5}, 3, 12));
	const Tensor x = random_tensor(Shape{4, 3}, 2);
	UnitMasks mk = full_masks(m);
	mk.hidden[0] = {true, false, true, true, false, true};
	mk.hidden[1] = {false, true, true, false, true};
	const Tensor got = forward_masked(m, x, mk);
	for (std::size_t i = 0; i < 4; ++i) {
		std::vector<double> h1, h2;
		std::vector<std::size_t> k1, k2;
		for (std::size_t u = 0; u < 6; ++u)
			if (mk.hidden[0][u]) {
				double s = m.layer(0).bias[u];
				for (std::size_t p = 0; p < 3; ++p)
					s += m.layer(0).weight.at(u, p) * x.at(i, p);
				h1.push_back(std::max(0.0, s));
				k1.push_back(u);
			}
		for (std::size_t u = 0; u < 5; ++u)
			if (mk.hidden[1][u]) {
				double s = m.layer(1).bias[u];
				for (std::size_t p = 0; p < k1.size(); ++p)
					s += m.layer(1).weight.at(u, k1[p]) * h1[p];
				h2.push_back(std::max(0.0, s));
				k2.push_back(u);
			}
		for (std::size_t c = 0; c < 3; ++c) {
			double s = m.layer(2).bias[c];
			for (std::size_t p = 0; p < k2.size(); ++p)
				s += m.layer(2).weight.at(c, k2[p]) * h2[p];
			EXPECT_NEAR(got.at(i, c), s, 1e-12);
		}
	}
}

TEST(Network, MaskedOutputsNeverWin) {
	const Model m = Model::build(ModelSpec::mlp(2, {4}, 3, 1));
	UnitMasks mk = full_masks(m);
	mk.output = {false, true, false};
	const Tensor out = forward_masked(m, random_tensor(Shape{5, 2}, 3), mk);
	for (std::size_t i = 0; i < 5; ++i)
		EXPECT_EQ(argmax_row(out, i), 1u);
}

TEST(Network, BatchShapeChecked) {
	const Model m = Model::build(ModelSpec::mlp(2, {4}, 3, 1));
	EXPECT_THROW(predict_logits(m, Tensor(Shape{3, 5})), ShapeError);
}

TEST(Trainer, NesterovStepExample) {
	std::vector<double> w{1.0}, g{1.0}, v{0.0};
	sgd_nesterov_step(w, g, v, 0.1, 0.9);
	EXPECT_DOUBLE_EQ(v[0], -0.1);
	EXPECT_DOUBLE_EQ(w[0], 0.81);
}

TEST(Trainer, ZeroMomentumIsPlainSgd) {
	std::vector<double> w{2.0, -1.0}, g{0.5, 3.0}, v{0.0, 0.0};
	sgd_nesterov_step(w, g, v, 0.1, 0.0);
	EXPECT_DOUBLE_EQ(w[0], 2.0 - 0.05);
	EXPECT_DOUBLE_EQ(w[1], -1.0 - 0.3);
}

TEST(Trainer, TwoStepsOnQuadraticMatchHandRecurrence) {
	// loss = w^2 / 2, gradient w.
	std::vector<double> w{1.0}, v{0.0};
	double hw = 1.0, hv = 0.0;
	for (int k = 0; k < 2; ++k) {
		std::vector<double> g{w[0]};
		sgd_nesterov_step(w, g, v, 0.1, 0.9);
		const double gk = hw;
		hv = 0.9 * hv - 0.1 * gk;
		hw = hw + 0.9 * hv - 0.1 * gk;
	}
	EXPECT_DOUBLE_EQ(w[0], hw);
	EXPECT_DOUBLE_EQ(v[0], hv);
	EXPECT_DOUBLE_EQ(hw, 1.0 + 0.9 * -0.1 - 0.1 + 0.9 * (0.9 * -0.1 - 0.1 * 0.81) - 0.1 * 0.81);
}

TEST(Trainer, SeedFixesParameters) {
	const DataSplit d = make_blobs(BlobsOptions{3, 40, 2, 1.0, 2});
	TrainConfig cfg;
	cfg.epochs = 3;
	cfg.batch_size = 16;
	cfg.seed = 9;
	const Model m0 = Model::build(ModelSpec::mlp(2, {8}, 3, 1));
	const auto a = train(m0, d.train, cfg).model;
	const auto b = train(m0, d.train, cfg).model;
	EXPECT_EQ(model_digest(a), model_digest(b));
	cfg.seed = 10;
	EXPECT_NE(model_digest(train(m0, d.train, cfg).model), model_digest(a));
}

TEST(Trainer, ZeroWeightsEqualStandardTraining) {
	const DataSplit d = make_blobs(BlobsOptions{3, 40, 2, 1.0, 2});
	TrainConfig cfg;
	cfg.epochs = 4;
	cfg.batch_size = 16;
	cfg.weights = LossWeights{0, 0, 0};
	const Model m0 = Model::build(ModelSpec::mlp(2, {8, 8}, 3, 1));
	const auto modular = train(m0, d.train, cfg);
	TrainConfig plain = cfg;
	plain.modular = false;
	const auto standard = train(m0, d.train, plain);
	EXPECT_EQ(model_digest(modular.model), model_digest(standard.model));
	// Modular terms are still reported, just unweighted.
	EXPECT_GT(modular.log.epochs.back().dispersion, 0.0);
	EXPECT_EQ(modular.log.epochs.back().total, modular.log.epochs.back().ce);
}

TEST(Trainer, PartialBatchKeptAndDegenerateCounted) {
	const DataSplit d = make_blobs(BlobsOptions{3, 10, 2, 1.0, 2}); // 24 training samples
	TrainConfig cfg;
	cfg.epochs = 1;
	cfg.batch_size = 23; // the trailing batch holds one sample
	const auto r = train(Model::build(ModelSpec::mlp(2, {4}, 3, 1)), d.train, cfg);
	EXPECT_EQ(r.log.epochs.front().degenerate_batches, 1u);
}

TEST(Trainer, ModularLossesDecreaseOnBlobs) {
	const auto& f = moda::test::blobs_fixture();
	TrainConfig cfg;
	cfg.epochs = 60;
	cfg.seed = 3;
	cfg.eval_every = 0;
	const auto r = train(Model::build(ModelSpec::mlp(2, {32, 32}, 4, 7)), f.data.train, cfg);
	EXPECT_LT(r.log.epochs.back().affinity, r.log.epochs.front().affinity);
	EXPECT_LT(r.log.epochs.back().dispersion, r.log.epochs.front().dispersion);
	EXPECT_EQ(model_digest(r.model), model_digest(f.model));
}

TEST(Trainer, BlobsReachNinetyPercent) {
	const auto& f = moda::test::blobs_fixture();
	EXPECT_GE(evaluate(f.model, f.data.test).accuracy, 0.90);
}

TEST(Trainer, RejectsBadConfig) {
	const DataSplit d = make_blobs(BlobsOptions{3, 10, 2, 1.0, 2});
	TrainConfig cfg;
	cfg.momentum = 1.0;
	EXPECT_THROW(train(Model::build(ModelSpec::mlp(2, {4}, 3, 1)), d.train, cfg), std::invalid_argument);
	cfg = TrainConfig{};
	EXPECT_THROW(train(Model::build(ModelSpec::mlp(2, {4}, 4, 1)), d.train, cfg), std::invalid_argument);
}

TEST(Evaluate, PerfectAndConstantModels) {
	Model m = Model::build(ModelSpec::mlp(2, {}, 2, 1));
	for (Tensor* t : m.parameters())
		std::fill(t->data().begin(), t->data().end(), 0.0);
	Dataset d;
	d.inputs = Tensor::matrix({{1, 0}, {0, 1}, {2, 0}, {0, 3}});
	d.labels = {0, 1, 0, 1};
	d.classes = 2;
	EXPECT_EQ(evaluate(m, d).accuracy, 0.5); // constant logits: ties go to class 0
	m.layer(0).weight.at(0, 0) = 1.0;
	m.layer(0).weight.at(1, 1) = 1.0;
	EXPECT_EQ(evaluate(m, d).accuracy, 1.0);
}

TEST(Evaluate, PerClassAveragesToOverall) {
	const auto& f = moda::test::blobs_fixture();
	const Evaluation ev = evaluate(f.model, f.data.test);
	double s = 0.0;
	std::size_t n = 0;
	for (std::size_t c = 0; c < ev.per_class_accuracy.size(); ++c) {
		s += ev.per_class_accuracy[c] * static_cast<double>(ev.per_class_count[c]);
		n += ev.per_class_count[c];
	}
	EXPECT_NEAR(s / static_cast<double>(n), ev.accuracy, 1e-12);
}

TEST(Evaluate, RefusesMismatchedNormalization) {
	const auto& f = moda::test::blobs_fixture();
	Dataset d = f.data.test;
	d.normalization = Normalization{{0.5}, {2.0}};
	EXPECT_THROW(evaluate(f.model, d), std::invalid_argument);
}
