#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace moda;
using moda::test::max_abs_diff;
using moda::test::random_tensor;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
	const fs::path p = fs::temp_directory_path() / ("moda-test-" + name);
	fs::remove_all(p);
	fs::create_directories(p);
	return p;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
	const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
			static_cast<char>(v)};
	out.write(b, 4);
}

void write_idx_images(const fs::path& p, std::uint32_t magic, std::uint32_t n, std::uint32_t h, std::uint32_t w,
		std::size_t payload) {
	std::ofstream out(p, std::ios::binary);
	put_be32(out, magic);
	put_be32(out, n);
	put_be32(out, h);
	put_be32(out, w);
	for (std::size_t i = 0; i < payload; ++i)
		out.put(static_cast<char>(i % 256));
}

void write_idx_labels(const fs::path& p, std::uint32_t n, std::size_t classes) {
	std::ofstream out(p, std::ios::binary);
	put_be32(out, kIdxLabelsMagic);
	put_be32(out, n);
	for (std::uint32_t i = 0; i < n; ++i)
		out.put(static_cast<char>(i % classes));
}

/// A small strong/weak setup on 3-class blobs with target class 1.
struct SwapRig {
	DataSplit data;
	ReplacementSplits splits;
	ReplacementAssembly assembly;
};

const SwapRig& swap_rig() {
	static const SwapRig s = [] {
		SwapRig r;
		r.data = make_blobs(BlobsOptions{3, 100, 2, 1.0, 4});
		const SplitPlan plan{{0, 1}, {1, 2}, 1, 0.5, 0.5, 2};
		r.splits = split_for_replacement(r.data, plan);
		TrainConfig cfg;
		cfg.epochs = 10;
		cfg.batch_size = 32;
		cfg.eval_every = 0;
		const Model strong = train(Model::build(ModelSpec::mlp(2, {8}, 2, 1)), r.splits.strong_train, cfg).model;
		cfg.modular = false;
		const Model weak = train(Model::build(ModelSpec::mlp(2, {4}, 2, 2)), r.splits.weak_overfit_train, cfg).model;
		ModuleSpec mod = extract_module(strong, compute_frequencies(strong, r.splits.strong_train), 1, 0.9);
		r.assembly = make_assembly(weak, std::move(mod), 0);
		return r;
	}();
	return s;
}

} // namespace

TEST(Replacement, AssembleOmSplicesTarget) {
	const std::vector<double> weak{1, 2, 3};
	EXPECT_EQ(assemble_om(weak, 9.0, 1), (std::vector<double>{1, 9, 3}));
	EXPECT_EQ(assemble_om(weak, 2.0, 1), weak);
	EXPECT_THROW(assemble_om(weak, 0.0, 3), std::out_of_range);
}

TEST(Replacement, BatchedAssembleMatchesPerRow) {
	const Tensor w = random_tensor(Shape{5, 4}, 1);
	const std::vector<double> s{0.1, 0.2, 0.3, 0.4, 0.5};
	const Tensor om = assemble_om(w, s, 2);
	for (std::size_t i = 0; i < 5; ++i) {
		const auto row = assemble_om(std::span<const double>(w.data().data() + i * 4, 4), s[i], 2);
		for (std::size_t c = 0; c < 4; ++c)
			EXPECT_EQ(om.at(i, c), row[c]);
	}
}

TEST(Replacement, IdentityAdaptationPassesSpliceThrough) {
	const SwapRig& s = swap_rig();
	const Tensor& x = s.splits.weak_test.inputs;
	EXPECT_EQ(adapted_logits(s.assembly, x), spliced_logits(s.assembly, x));
	const auto strong = module_forward(s.assembly.strong, x);
	const Tensor weak = predict_logits(s.assembly.weak, x);
	const Tensor om = spliced_logits(s.assembly, x);
	for (std::size_t i = 0; i < x.dim(0); ++i) {
		EXPECT_EQ(om.at(i, 0), strong[i]);
		EXPECT_EQ(om.at(i, 1), weak.at(i, 1));
	}
}

TEST(Replacement, NoOpSpliceLeavesAccuracyUnchanged) {
	const SwapRig& s = swap_rig();
	ReplacementAssembly a = s.assembly;
	// A module whose logit equals the weak model's own target logit: the weak model itself.
	ModuleSpec self;
	self.class_id = 0;
	self.source_spec = a.weak.spec();
	self.normalization = a.weak.normalization();
	self.retained = {IndexList{0, 1, 2, 3}};
	const Model sliced = slice_model(a.weak, self.retained, IndexList{0});
	for (const auto& l : sliced.layers())
		if (l.spec.has_params()) {
			self.weights.push_back(l.weight);
			self.biases.push_back(l.bias);
		}
	a = make_assembly(a.weak, self, 0);
	const ReplacementOutcome r = evaluate_replacement(a, s.splits.weak_test);
	EXPECT_EQ(r.pre_per_class, r.post_per_class);
}

TEST(Replacement, AuditFindsNoLeak) {
	const SwapRig& s = swap_rig();
	const GradientAudit audit = audit_gradient_isolation(s.assembly, s.splits.weak_overfit_train);
	EXPECT_EQ(audit.frozen_max_abs_grad, 0.0);
	EXPECT_GT(audit.adaptation_max_abs_grad, 0.0);
	EXPECT_TRUE(audit.passed());
}

TEST(Replacement, AdaptationTouchesOnlyAdaptationLayer) {
	const SwapRig& s = swap_rig();
	ReplacementAssembly a = s.assembly;
	const auto weak_before = model_digest(a.weak);
	const auto strong_before = module_digest(a.strong);
	const auto net_before = model_digest(a.strong_net);
	const Tensor w0 = a.adapt_weight;
	const auto log = train_adaptation(a, s.splits.weak_overfit_train, AdaptationConfig{5, 0.05, 16, 3});
	EXPECT_EQ(log.size(), 5u);
	EXPECT_EQ(model_digest(a.weak), weak_before);
	EXPECT_EQ(module_digest(a.strong), strong_before);
	EXPECT_EQ(model_digest(a.strong_net), net_before);
	EXPECT_FALSE(a.adapt_weight == w0);
	EXPECT_LT(log.back().ce, log.front().ce);
}

TEST(Replacement, AdaptationIsDeterministic) {
	const SwapRig& s = swap_rig();
	ReplacementAssembly a = s.assembly, b = s.assembly;
	train_adaptation(a, s.splits.weak_overfit_train, AdaptationConfig{3, 0.05, 16, 3});
	train_adaptation(b, s.splits.weak_overfit_train, AdaptationConfig{3, 0.05, 16, 3});
	EXPECT_EQ(a.adapt_weight, b.adapt_weight);
	EXPECT_EQ(a.adapt_bias, b.adapt_bias);
}

TEST(Replacement, RejectsEmptyDataAndBadTarget) {
	const SwapRig& s = swap_rig();
	ReplacementAssembly a = s.assembly;
	Dataset empty = s.splits.weak_train.subset(std::vector<std::size_t>{});
	EXPECT_THROW(train_adaptation(a, empty), std::invalid_argument);
	EXPECT_THROW(audit_gradient_isolation(a, empty), std::invalid_argument);
	EXPECT_THROW(make_assembly(a.weak, a.strong, 2), std::out_of_range);
}

TEST(Replacement, OutcomeJsonHasAllFields) {
	const SwapRig& s = swap_rig();
	const auto j = to_json(evaluate_replacement(s.assembly, s.splits.weak_test));
	for (const char* k : {"pre_target_accuracy", "post_target_accuracy", "pre_non_target_accuracy",
			     "post_non_target_accuracy", "pre_per_class", "post_per_class", "adaptation_log"})
		EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Splits, TargetSamplesPartitionedWithoutLeakage) {
	const SwapRig& s = swap_rig();
	const auto& sp = s.splits;
	std::set<std::size_t> strong(sp.target_rows_strong.begin(), sp.target_rows_strong.end());
	for (std::size_t r : sp.target_rows_weak)
		EXPECT_FALSE(strong.count(r));
	std::size_t target_total = 0;
	for (std::size_t l : s.data.train.labels)
		target_total += l == 1 ? 1 : 0;
	EXPECT_EQ(sp.target_rows_strong.size() + sp.target_rows_weak.size(), target_total);
	EXPECT_EQ(sp.target_rows_strong.size(), target_total / 2);
	// Labels are positions in the plan lists.
	EXPECT_EQ(sp.strong_train.classes, 2u);
	EXPECT_EQ(sp.strong_train.class_counts()[1], sp.target_rows_strong.size());
	EXPECT_EQ(sp.weak_train.class_counts()[0], sp.target_rows_weak.size());
	EXPECT_EQ(sp.weak_test.size() + sp.strong_test.size(), s.data.test.size() + s.data.test.size() / 3);
}

TEST(Splits, OverfitKeepsFractionPerClass) {
	const SwapRig& s = swap_rig();
	const auto full = s.splits.weak_train.class_counts();
	const auto over = s.splits.weak_overfit_train.class_counts();
	for (std::size_t c = 0; c < full.size(); ++c)
		EXPECT_EQ(over[c], full[c] / 2);
}

TEST(Splits, RejectsBadPlans) {
	const DataSplit d = make_blobs(BlobsOptions{3, 20, 2, 1.0, 1});
	EXPECT_THROW(split_for_replacement(d, SplitPlan{{0, 1}, {2}, 1, 0.5, 0.5, 0}), std::invalid_argument);
	EXPECT_THROW(split_for_replacement(d, SplitPlan{{0, 0, 1}, {1, 2}, 1, 0.5, 0.5, 0}), std::invalid_argument);
	EXPECT_THROW(split_for_replacement(d, SplitPlan{{0, 1}, {1, 2}, 1, 1.5, 0.5, 0}), std::invalid_argument);
	EXPECT_THROW(split_for_replacement(d, SplitPlan{{0, 1}, {1, 5}, 1, 0.5, 0.5, 0}), std::out_of_range);
}

TEST(Blobs, DeterministicAndBalanced) {
	const DataSplit a = make_blobs(BlobsOptions{4, 50, 3, 0.5, 9});
	const DataSplit b = make_blobs(BlobsOptions{4, 50, 3, 0.5, 9});
	EXPECT_EQ(a.train.inputs, b.train.inputs);
	EXPECT_EQ(a.test.labels, b.test.labels);
	EXPECT_EQ(a.train.class_counts(), (std::vector<std::size_t>(4, 40)));
	EXPECT_EQ(a.test.class_counts(), (std::vector<std::size_t>(4, 10)));
	EXPECT_EQ(a.train.sample_shape(), (Shape{3}));
	EXPECT_FALSE(make_blobs(BlobsOptions{4, 50, 3, 0.5, 10}).train.inputs == a.train.inputs);
}

TEST(Blobs, ZeroSpreadIsSeparableByNearestCentroid) {
	const DataSplit d = make_blobs(BlobsOptions{5, 10, 2, 0.0, 1});
	for (std::size_t i = 0; i < d.train.size(); ++i) {
		std::size_t best = 0;
		double bd = 1e300;
		for (std::size_t c = 0; c < 5; ++c) {
			const double a = 2.0 * std::numbers::pi * static_cast<double>(c) / 5.0;
			const double dx = d.train.inputs.at(i, 0) - 4 * std::cos(a), dy = d.train.inputs.at(i, 1) - 4 * std::sin(a);
			if (dx * dx + dy * dy < bd) {
				bd = dx * dx + dy * dy;
				best = c;
			}
		}
		EXPECT_EQ(best, d.train.labels[i]);
		EXPECT_LT(bd, 1e-20);
	}
}

TEST(Blobs, RejectsBadOptions) {
	EXPECT_THROW(make_blobs(BlobsOptions{1, 10, 2, 1.0, 0}), std::invalid_argument);
	EXPECT_THROW(make_blobs(BlobsOptions{2, 10, 1, 1.0, 0}), std::invalid_argument);
	EXPECT_THROW(make_blobs(BlobsOptions{2, 10, 2, -1.0, 0}), std::invalid_argument);
}

TEST(Idx, ReadsImagesScaledToUnitRange) {
	const fs::path dir = temp_dir("idx-ok");
	write_idx_images(dir / "img", kIdxImagesMagic, 6, 2, 3, 36);
	write_idx_labels(dir / "lab", 6, 3);
	const Dataset d = read_idx((dir / "img").string(), (dir / "lab").string());
	EXPECT_EQ(d.inputs.shape(), (Shape{6, 1, 2, 3}));
	EXPECT_EQ(d.classes, 3u);
	EXPECT_EQ(d.labels, (std::vector<std::size_t>{0, 1, 2, 0, 1, 2}));
	EXPECT_DOUBLE_EQ(d.inputs[7], 7.0 / 255.0);
	EXPECT_EQ(read_idx((dir / "img").string(), (dir / "lab").string(), 10, 4).size(), 4u);
	EXPECT_EQ(read_idx((dir / "img").string(), (dir / "lab").string(), 10).classes, 10u);
}

TEST(Idx, MalformedFilesRaiseFormatError) {
	const fs::path dir = temp_dir("idx-bad");
	write_idx_labels(dir / "lab", 6, 3);
	write_idx_images(dir / "magic", 0x00000804, 6, 2, 3, 36);
	EXPECT_THROW(read_idx((dir / "magic").string(), (dir / "lab").string()), FormatError);
	write_idx_images(dir / "short", kIdxImagesMagic, 6, 2, 3, 35);
	EXPECT_THROW(read_idx((dir / "short").string(), (dir / "lab").string()), FormatError);
	write_idx_images(dir / "count", kIdxImagesMagic, 5, 2, 3, 30);
	EXPECT_THROW(read_idx((dir / "count").string(), (dir / "lab").string()), FormatError);
	std::ofstream(dir / "empty").put('\0');
	EXPECT_THROW(read_idx((dir / "empty").string(), (dir / "lab").string()), FormatError);
	EXPECT_THROW(read_idx((dir / "missing").string(), (dir / "lab").string()), FormatError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
	const auto& f = moda::test::blobs_fixture();
	const fs::path dir = temp_dir("ckpt");
	save_checkpoint(f.model, dir / "a.moda");
	const Model back = load_checkpoint(dir / "a.moda");
	EXPECT_EQ(model_digest(back), model_digest(f.model));
	EXPECT_EQ(back.spec(), f.model.spec());
	save_checkpoint(back, dir / "b.moda");
	EXPECT_EQ(detail::read_file(dir / "a.moda"), detail::read_file(dir / "b.moda"));
	EXPECT_EQ(predict_logits(back, f.data.test.inputs), predict_logits(f.model, f.data.test.inputs));
}

TEST(Checkpoint, CnnRoundTripKeepsNormalization) {
	Model m = moda::test::small_cnn(5);
	m.set_normalization(Normalization{{0.0}, {1.0 / 255.0}});
	const Model back = decode_checkpoint(encode_checkpoint(m));
	EXPECT_EQ(back.normalization(), m.normalization());
	EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(m));
}

TEST(Checkpoint, CorruptedPayloadRaisesDigestError) {
	const auto& f = moda::test::blobs_fixture();
	std::string bytes = encode_checkpoint(f.model);
	bytes[bytes.size() - 3] ^= 0x10;
	EXPECT_THROW(decode_checkpoint(bytes), DigestError);
	EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 8)), FormatError);
	EXPECT_THROW(decode_checkpoint("NOPE"), FormatError);
}

TEST(ModuleFile, RoundTripIsByteIdentical) {
	const auto& f = moda::test::blobs_fixture();
	const fs::path dir = temp_dir("module");
	for (const ModuleSpec& s : f.modules) {
		const auto path = dir / ("m" + std::to_string(s.class_id) + ".moda");
		save_module(s, path);
		const ModuleSpec back = load_module(path);
		EXPECT_EQ(back.retained, s.retained);
		EXPECT_EQ(back.source_digest, s.source_digest);
		EXPECT_EQ(back.tau, s.tau);
		EXPECT_EQ(module_digest(back), module_digest(s));
		EXPECT_EQ(encode_module(back), encode_module(s));
		EXPECT_TRUE(module_matches(back, f.model));
	}
	std::string bytes = encode_module(f.modules[0]);
	bytes[bytes.size() - 1] ^= 0x01;
	EXPECT_THROW(decode_module(bytes), DigestError);
	EXPECT_THROW(decode_module(encode_checkpoint(f.model)), FormatError);
}

TEST(ModuleFile, MismatchedSourceDetected) {
	const auto& f = moda::test::blobs_fixture();
	Model other = f.model;
	other.layer(1).weight[0] = std::nextafter(other.layer(1).weight[0], 10.0);
	EXPECT_FALSE(module_matches(f.modules[0], other));
}
