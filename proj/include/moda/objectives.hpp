#ifndef MODA_OBJECTIVES_HPP
#define MODA_OBJECTIVES_HPP

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "moda/autograd.hpp"
#include "moda/network.hpp"
#include "moda/ops.hpp"

namespace moda {

/// Weights of the affinity, dispersion and compactness terms in the unified loss.
struct LossWeights {
	double alpha = 1.0;
	double beta = 1.0;
	double gamma = 0.3;

	void validate() const {
		if (alpha < 0 || beta < 0 || gamma < 0)
			throw std::invalid_argument("loss weights must be non-negative");
	}
	friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// One modular loss: a differentiable scalar plus its per-layer values.
struct LossTerm {
	Var value;
	std::vector<double> per_layer;
	/// The batch lacked the class structure this term needs; value is a constant 0.
	bool degenerate = false;

	double item() const { return value.value().item(); }
};

struct LossBreakdown {
	double ce = 0.0;
	double affinity = 0.0;
	double dispersion = 0.0;
	double compactness = 0.0;
	double total = 0.0;
	std::vector<double> affinity_per_layer;
	std::vector<double> dispersion_per_layer;
	std::vector<double> compactness_per_layer;
	bool affinity_degenerate = false;
	bool dispersion_degenerate = false;
};

struct UnifiedLoss {
	Var total;
	Var ce;
	LossBreakdown parts;
};

namespace detail {

/// Row indices grouped by class, in ascending class order.
inline std::map<std::size_t, std::vector<std::size_t>> rows_by_class(std::span<const std::size_t> labels) {
	std::map<std::size_t, std::vector<std::size_t>> groups;
	for (std::size_t i = 0; i < labels.size(); ++i)
		groups[labels[i]].push_back(i);
	return groups;
}

inline void check_acts(const ActivationBatch& acts) {
	if (acts.layers.empty())
		throw std::invalid_argument("activation batch has no layers");
	for (const Var& v : acts.layers) {
		if (v.shape().size() != 2 || v.shape()[0] != acts.labels.size())
			throw ShapeError("activation record " + shape_str(v.shape()) + " does not match " +
					std::to_string(acts.labels.size()) + " labels");
	}
}

/// Σ over layers of weighted_sum(mats[l], w / L): a layer mean of linear functionals.
template <class MakeMatrix>
LossTerm layer_mean(const ActivationBatch& acts, const Tensor& weights, MakeMatrix&& make) {
	const double inv_layers = 1.0 / static_cast<double>(acts.layers.size());
	Tensor scaled = weights;
	for (double& v : scaled.data())
		v *= inv_layers;
	LossTerm term;
	for (const Var& y : acts.layers) {
		Var m = make(y);
		Var part = ops::weighted_sum(m, scaled);
		term.per_layer.push_back(part.value().item() / inv_layers);
		term.value = term.value.valid() ? ops::add(term.value, part) : part;
	}
	return term;
}

inline LossTerm degenerate_term(const ActivationBatch& acts) {
	LossTerm t;
	t.value = acts.layers.front().graph().constant(Tensor::scalar(0.0));
	t.per_layer.assign(acts.layers.size(), 0.0);
	t.degenerate = true;
	return t;
}

} // namespace detail

/**
 * Inter-class dispersion loss: mean cosine similarity between activation vectors of
 * samples from different classes (i.e. 1 - mean dispersion).
 *
 * Per layer, each unordered pair of classes present in the batch contributes the mean
 * similarity over all its cross-class sample pairs; pairs are averaged, then layers.
 * With fewer than two classes present the term is degenerate and returns 0.
 */
inline LossTerm dispersion_loss(const ActivationBatch& acts) {
	detail::check_acts(acts);
	const auto groups = detail::rows_by_class(acts.labels);
	if (groups.size() < 2)
		return detail::degenerate_term(acts);
	const std::size_t n = acts.labels.size();
	const double pairs = static_cast<double>(groups.size() * (groups.size() - 1) / 2);
	Tensor w(Shape{n, n});
	for (auto a = groups.begin(); a != groups.end(); ++a)
		for (auto b = std::next(a); b != groups.end(); ++b) {
			const double wt = 1.0 / (static_cast<double>(a->second.size() * b->second.size()) * pairs);
			for (std::size_t i : a->second)
				for (std::size_t j : b->second)
					w.at(i, j) = wt;
		}
	return detail::layer_mean(acts, w, [](Var y) { return ops::pairwise_cosine(y); });
}

/**
 * Intra-class affinity loss: 1 - mean cosine similarity between activation vectors of
 * same-class samples.
 *
 * Per layer, every class with at least two samples contributes the mean similarity over
 * its unordered sample pairs; classes are averaged, then layers. If no class has two
 * samples the term is degenerate and returns 0.
 */
inline LossTerm affinity_loss(const ActivationBatch& acts) {
	detail::check_acts(acts);
	const auto groups = detail::rows_by_class(acts.labels);
	std::size_t eligible = 0;
	for (const auto& [c, rows] : groups)
		eligible += rows.size() >= 2 ? 1 : 0;
	if (eligible == 0)
		return detail::degenerate_term(acts);
	const std::size_t n = acts.labels.size();
	Tensor w(Shape{n, n});
	for (const auto& [c, rows] : groups) {
		if (rows.size() < 2)
			continue;
		const double np = static_cast<double>(rows.size() * (rows.size() - 1) / 2);
		const double wt = -1.0 / (np * static_cast<double>(eligible));
		for (std::size_t p = 0; p < rows.size(); ++p)
			for (std::size_t q = p + 1; q < rows.size(); ++q)
				w.at(rows[p], rows[q]) = wt;
	}
	LossTerm t = detail::layer_mean(acts, w, [](Var y) { return ops::pairwise_cosine(y); });
	t.value = ops::add_scalar(t.value, 1.0);
	for (double& v : t.per_layer)
		v += 1.0;
	return t;
}

/**
 * Compactness loss: per layer, the mean over classes of the mean l1 norm of the
 * class's activation vectors; averaged over layers. No width normalisation.
 */
inline LossTerm compactness_loss(const ActivationBatch& acts) {
	detail::check_acts(acts);
	const auto groups = detail::rows_by_class(acts.labels);
	if (groups.empty())
		return detail::degenerate_term(acts);
	const double classes = static_cast<double>(groups.size());
	std::vector<double> row_w(acts.labels.size());
	for (const auto& [c, rows] : groups)
		for (std::size_t i : rows)
			row_w[i] = 1.0 / (static_cast<double>(rows.size()) * classes);
	// Weight tensors differ in width per layer, so build each layer's term directly.
	const double inv_layers = 1.0 / static_cast<double>(acts.layers.size());
	LossTerm term;
	for (const Var& y : acts.layers) {
		const std::size_t n = y.shape()[0], d = y.shape()[1];
		Tensor w(Shape{n, d});
		for (std::size_t i = 0; i < n; ++i)
			for (std::size_t j = 0; j < d; ++j)
				w.at(i, j) = row_w[i] * inv_layers;
		Var part = ops::weighted_sum(ops::abs(y), std::move(w));
		term.per_layer.push_back(part.value().item() / inv_layers);
		term.value = term.value.valid() ? ops::add(term.value, part) : part;
	}
	return term;
}

/// Cross-entropy plus the weighted modular terms, all on one graph.
inline UnifiedLoss unified_loss(Var logits, std::span<const std::size_t> labels, const ActivationBatch& acts,
		const LossWeights& w) {
	w.validate();
	Var ce = ops::softmax_cross_entropy(logits, labels);
	LossTerm aff = affinity_loss(acts);
	LossTerm dis = dispersion_loss(acts);
	LossTerm com = compactness_loss(acts);
	Var modular = ops::add(ops::add(ops::scale(aff.value, w.alpha), ops::scale(dis.value, w.beta)),
			ops::scale(com.value, w.gamma));
	UnifiedLoss out;
	out.total = ops::add(ce, modular);
	out.ce = ce;
	LossBreakdown& p = out.parts;
	p.ce = ce.value().item();
	p.affinity = aff.item();
	p.dispersion = dis.item();
	p.compactness = com.item();
	p.total = out.total.value().item();
	p.affinity_per_layer = std::move(aff.per_layer);
	p.dispersion_per_layer = std::move(dis.per_layer);
	p.compactness_per_layer = std::move(com.per_layer);
	p.affinity_degenerate = aff.degenerate;
	p.dispersion_degenerate = dis.degenerate;
	return out;
}

} // namespace moda

#endif // MODA_OBJECTIVES_HPP
