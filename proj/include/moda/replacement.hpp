#ifndef MODA_REPLACEMENT_HPP
#define MODA_REPLACEMENT_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moda/autograd.hpp"
#include "moda/dataset.hpp"
#include "moda/decomposer.hpp"
#include "moda/digest.hpp"
#include "moda/network.hpp"
#include "moda/ops.hpp"
#include "moda/rng.hpp"
#include "moda/trainer.hpp"

namespace moda {

/// Weak logits with the target position overwritten by the strong module's logit.
inline std::vector<double> assemble_om(std::span<const double> weak_logits, double strong, std::size_t target) {
	if (target >= weak_logits.size())
		throw std::out_of_range("assemble_om: target index " + std::to_string(target) + " for " +
				std::to_string(weak_logits.size()) + " logits");
	std::vector<double> out(weak_logits.begin(), weak_logits.end());
	out[target] = strong;
	return out;
}

/// Row-wise assemble_om over a [N x k] logit matrix.
inline Tensor assemble_om(const Tensor& weak_logits, std::span<const double> strong, std::size_t target) {
	if (weak_logits.rank() != 2 || weak_logits.dim(0) != strong.size())
		throw ShapeError("assemble_om: logits " + shape_str(weak_logits.shape()) + " with " +
				std::to_string(strong.size()) + " strong values");
	if (target >= weak_logits.dim(1))
		throw std::out_of_range("assemble_om: target index " + std::to_string(target) + " for " +
				std::to_string(weak_logits.dim(1)) + " logits");
	Tensor out = weak_logits;
	for (std::size_t i = 0; i < strong.size(); ++i)
		out.at(i, target) = strong[i];
	return out;
}

/**
 * A weak model whose target-class output comes from a strong module, followed by a
 * square linear adaptation layer. Only the adaptation parameters are ever updated.
 */
struct ReplacementAssembly {
	Model weak;
	ModuleSpec strong;
	Model strong_net; // runnable copy of the module
	std::size_t target = 0;
	Tensor adapt_weight; // [k x k]
	Tensor adapt_bias;   // [k]

	std::size_t classes() const noexcept { return weak.classes(); }
};

/// Identity adaptation and zero bias, so the untrained assembly outputs o_m unchanged.
inline ReplacementAssembly make_assembly(Model weak, ModuleSpec strong, std::size_t target) {
	if (target >= weak.classes())
		throw std::out_of_range("replacement target " + std::to_string(target) + " not among the weak model's " +
				std::to_string(weak.classes()) + " classes");
	if (strong.source_spec.input_shape != weak.spec().input_shape)
		throw ShapeError("strong module input " + shape_str(strong.source_spec.input_shape) + " differs from weak " +
				shape_str(weak.spec().input_shape));
	ReplacementAssembly a;
	const std::size_t k = weak.classes();
	a.weak = std::move(weak);
	a.strong_net = module_model(strong);
	a.strong = std::move(strong);
	a.target = target;
	a.adapt_weight = Tensor(Shape{k, k});
	for (std::size_t i = 0; i < k; ++i)
		a.adapt_weight.at(i, i) = 1.0;
	a.adapt_bias = Tensor(Shape{k});
	return a;
}

/// o_m for a batch: weak logits spliced with the strong module's logit.
inline Tensor spliced_logits(const ReplacementAssembly& a, const Tensor& inputs) {
	const Tensor weak = predict_logits_chunked(a.weak, inputs);
	const Tensor strong = predict_logits_chunked(a.strong_net, inputs);
	return assemble_om(weak, strong.data(), a.target);
}

/// o_a = o_m·Aᵀ + b.
inline Tensor adapted_logits(const ReplacementAssembly& a, const Tensor& inputs) {
	Graph g;
	return ops::linear(g.constant(spliced_logits(a, inputs)), g.view(a.adapt_weight), g.view(a.adapt_bias)).value();
}

struct AdaptationConfig {
	std::size_t epochs = 10;
	double learning_rate = 0.05;
	std::size_t batch_size = 32;
	std::uint64_t seed = 0;

	void validate() const {
		if (epochs < 1 || batch_size < 1)
			throw std::invalid_argument("adaptation: epochs and batch size must be >= 1");
		if (!(learning_rate > 0.0))
			throw std::invalid_argument("adaptation: learning rate must be > 0");
	}
};

struct AdaptationEpoch {
	std::size_t epoch = 0;
	double ce = 0.0;
	double train_accuracy = 0.0;
};

/**
 * Plain mini-batch SGD on cross-entropy of o_a, adaptation parameters only.
 *
 * o_m is computed from the frozen networks outside the graph and enters as a constant,
 * so no gradient path reaches the weak model or the module.
 */
inline std::vector<AdaptationEpoch> train_adaptation(ReplacementAssembly& a, const Dataset& d,
		const AdaptationConfig& cfg = {}) {
	cfg.validate();
	if (d.size() == 0)
		throw std::invalid_argument("adaptation: empty dataset");
	d.validate();
	if (d.classes != a.classes())
		throw std::invalid_argument("adaptation: dataset has " + std::to_string(d.classes) +
				" classes, weak model " + std::to_string(a.classes()));
	check_normalization(a.weak, d);
	const Tensor om = spliced_logits(a, d.inputs);
	std::vector<AdaptationEpoch> log;
	a.adapt_weight.enable_grad();
	a.adapt_bias.enable_grad();
	for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
		const auto order = permutation(d.size(), cfg.seed, streams::kShuffle + epoch);
		AdaptationEpoch rec;
		rec.epoch = epoch + 1;
		std::size_t steps = 0, hits = 0;
		for (std::size_t s = 0; s < d.size(); s += cfg.batch_size) {
			const std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, d.size() - s));
			std::vector<std::size_t> yb;
			for (std::size_t i : idx)
				yb.push_back(d.labels[i]);
			a.adapt_weight.zero_grad();
			a.adapt_bias.zero_grad();
			Graph g;
			Var oa = ops::linear(g.constant(gather_rows(om, idx)), g.parameter(a.adapt_weight),
					g.parameter(a.adapt_bias));
			Var ce = ops::softmax_cross_entropy(oa, yb);
			g.backward(ce);
			for (std::size_t r = 0; r < yb.size(); ++r)
				hits += argmax_row(oa.value(), r) == yb[r] ? 1 : 0;
			for (Tensor* t : {&a.adapt_weight, &a.adapt_bias}) {
				auto w = t->data();
				auto gr = t->grad();
				for (std::size_t i = 0; i < w.size(); ++i)
					w[i] -= cfg.learning_rate * gr[i];
			}
			rec.ce += ce.value().item();
			++steps;
		}
		rec.ce /= static_cast<double>(steps);
		rec.train_accuracy = static_cast<double>(hits) / static_cast<double>(d.size());
		log.push_back(rec);
	}
	a.adapt_weight.drop_grad();
	a.adapt_bias.drop_grad();
	return log;
}

struct GradientAudit {
	/// Largest |gradient| seen on any weak-model or module parameter.
	double frozen_max_abs_grad = 0.0;
	/// Largest |gradient| on the adaptation parameters (should be non-zero).
	double adaptation_max_abs_grad = 0.0;
	bool frozen_unchanged = true;

	bool passed() const noexcept { return frozen_max_abs_grad == 0.0 && frozen_unchanged && adaptation_max_abs_grad > 0.0; }
};

/**
 * One adaptation step with every frozen parameter bound to the graph as trainable, so
 * any leak would land in its gradient buffer. Gradients must come back exactly zero and
 * the frozen weights bit-identical.
 */
inline GradientAudit audit_gradient_isolation(const ReplacementAssembly& a, const Dataset& d, std::size_t rows = 64) {
	if (d.size() == 0)
		throw std::invalid_argument("gradient audit: empty dataset");
	ReplacementAssembly probe = a;
	const std::uint64_t weak_before = model_digest(probe.weak), strong_before = model_digest(probe.strong_net);
	std::vector<std::size_t> idx;
	for (std::size_t i = 0; i < std::min(rows, d.size()); ++i)
		idx.push_back(i);
	const Tensor xb = gather_rows(d.inputs, idx);
	std::vector<std::size_t> yb;
	for (std::size_t i : idx)
		yb.push_back(d.labels[i]);

	probe.weak.zero_grad();
	probe.strong_net.zero_grad();
	probe.adapt_weight.zero_grad();
	probe.adapt_bias.zero_grad();
	Graph g;
	ForwardResult weak = forward_record(g, probe.weak, xb, yb);
	ForwardResult strong = forward_record(g, probe.strong_net, xb, {});
	// The splice reads values only; the frozen outputs never become graph parents.
	Tensor om = assemble_om(weak.logits.value(), strong.logits.value().data(), probe.target);
	Var oa = ops::linear(g.constant(std::move(om)), g.parameter(probe.adapt_weight), g.parameter(probe.adapt_bias));
	g.backward(ops::softmax_cross_entropy(oa, yb));

	GradientAudit audit;
	for (Model* m : {&probe.weak, &probe.strong_net})
		for (Tensor* t : m->parameters())
			for (double v : t->grad())
				audit.frozen_max_abs_grad = std::max(audit.frozen_max_abs_grad, std::abs(v));
	for (Tensor* t : {&probe.adapt_weight, &probe.adapt_bias})
		for (double v : t->grad())
			audit.adaptation_max_abs_grad = std::max(audit.adaptation_max_abs_grad, std::abs(v));
	probe.weak.drop_grad();
	probe.strong_net.drop_grad();
	audit.frozen_unchanged = model_digest(probe.weak) == weak_before && model_digest(probe.strong_net) == strong_before &&
	                         model_digest(a.weak) == weak_before;
	return audit;
}

struct ReplacementOutcome {
	double pre_target_accuracy = 0.0;
	double post_target_accuracy = 0.0;
	double pre_non_target_accuracy = 0.0;  // mean over non-target classes
	double post_non_target_accuracy = 0.0;
	std::vector<double> pre_per_class, post_per_class;
	std::vector<AdaptationEpoch> log;
};

namespace detail {

inline std::vector<double> per_class_hits(const Tensor& logits, const Dataset& d) {
	std::vector<double> hit(d.classes, 0.0), count(d.classes, 0.0);
	for (std::size_t i = 0; i < d.size(); ++i) {
		count[d.labels[i]] += 1.0;
		if (argmax_row(logits, i) == d.labels[i])
			hit[d.labels[i]] += 1.0;
	}
	for (std::size_t c = 0; c < d.classes; ++c)
		hit[c] = count[c] > 0 ? hit[c] / count[c] : std::numeric_limits<double>::quiet_NaN();
	return hit;
}

inline double mean_excluding(const std::vector<double>& v, std::size_t skip) {
	double s = 0.0;
	std::size_t n = 0;
	for (std::size_t c = 0; c < v.size(); ++c)
		if (c != skip && !std::isnan(v[c])) {
			s += v[c];
			++n;
		}
	return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

} // namespace detail

/// Per-class accuracy of the weak model alone (pre) and of argmax o_a (post).
inline ReplacementOutcome evaluate_replacement(const ReplacementAssembly& a, const Dataset& test) {
	check_normalization(a.weak, test);
	if (test.classes != a.classes())
		throw std::invalid_argument("replacement test set has " + std::to_string(test.classes) + " classes, weak model " +
				std::to_string(a.classes()));
	ReplacementOutcome r;
	r.pre_per_class = detail::per_class_hits(predict_logits_chunked(a.weak, test.inputs), test);
	r.post_per_class = detail::per_class_hits(adapted_logits(a, test.inputs), test);
	r.pre_target_accuracy = r.pre_per_class[a.target];
	r.post_target_accuracy = r.post_per_class[a.target];
	r.pre_non_target_accuracy = detail::mean_excluding(r.pre_per_class, a.target);
	r.post_non_target_accuracy = detail::mean_excluding(r.post_per_class, a.target);
	return r;
}

inline nlohmann::json to_json(const ReplacementOutcome& r) {
	nlohmann::json j;
	j["pre_target_accuracy"] = r.pre_target_accuracy;
	j["post_target_accuracy"] = r.post_target_accuracy;
	j["pre_non_target_accuracy"] = r.pre_non_target_accuracy;
	j["post_non_target_accuracy"] = r.post_non_target_accuracy;
	j["pre_per_class"] = r.pre_per_class;
	j["post_per_class"] = r.post_per_class;
	nlohmann::json log = nlohmann::json::array();
	for (const auto& e : r.log)
		log.push_back({{"epoch", e.epoch}, {"ce", e.ce}, {"train_accuracy", e.train_accuracy}});
	j["adaptation_log"] = log;
	return j;
}

} // namespace moda

#endif // MODA_REPLACEMENT_HPP
