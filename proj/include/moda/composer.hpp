#ifndef MODA_COMPOSER_HPP
#define MODA_COMPOSER_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moda/dataset.hpp"
#include "moda/decomposer.hpp"
#include "moda/digest.hpp"
#include "moda/network.hpp"
#include "moda/trainer.hpp"

namespace moda {

/// A k-class network cut from the source model at the union of k modules.
struct ComposedModel {
	Model model;
	/// Output row j predicts source class class_order[j].
	IndexList class_order;
	/// Per participating layer, the source unit behind each composed unit.
	std::vector<IndexList> hidden;

	std::size_t classes() const noexcept { return class_order.size(); }
};

namespace detail {

inline IndexList sorted_union(const IndexList& a, const IndexList& b) {
	IndexList out;
	std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
	return out;
}

inline std::size_t intersection_size(const IndexList& a, const IndexList& b) {
	std::size_t n = 0;
	auto i = a.begin(), j = b.begin();
	while (i != a.end() && j != b.end()) {
		if (*i < *j)
			++i;
		else if (*j < *i)
			++j;
		else {
			++n;
			++i;
			++j;
		}
	}
	return n;
}

inline void check_module(const ModuleSpec& m, const Model& source, std::uint64_t digest) {
	if (m.source_digest != digest)
		throw std::invalid_argument("module for class " + std::to_string(m.class_id) +
				" was cut from a different model (digest mismatch)");
	if (m.class_id >= source.classes())
		throw std::invalid_argument("module class " + std::to_string(m.class_id) + " out of range");
}

inline std::vector<ParamSlice> module_slices(const ModuleSpec& m, const Model& source) {
	return param_slices(source, m.retained, IndexList{static_cast<std::uint32_t>(m.class_id)});
}

} // namespace detail

/// Per participating layer, the sorted union of the modules' retained units.
inline std::vector<IndexList> union_indices(const std::vector<ModuleSpec>& modules) {
	if (modules.empty())
		throw std::invalid_argument("union of zero modules");
	std::vector<IndexList> u = modules.front().retained;
	for (std::size_t i = 1; i < modules.size(); ++i) {
		if (modules[i].retained.size() != u.size())
			throw ShapeError("modules disagree on the number of layers");
		for (std::size_t l = 0; l < u.size(); ++l)
			u[l] = detail::sorted_union(u[l], modules[i].retained[l]);
	}
	return u;
}

inline IndexList module_classes(const std::vector<ModuleSpec>& modules) {
	IndexList out;
	for (const auto& m : modules)
		out.push_back(static_cast<std::uint32_t>(m.class_id));
	return out;
}

/// Masks selecting the union of the modules' units and their class rows.
inline UnitMasks union_masks(const std::vector<ModuleSpec>& modules, const Model& source) {
	return masks_from_indices(source, union_indices(modules), module_classes(modules));
}

/**
 * Merges modules layer by layer. Each layer keeps the union of the modules' units and
 * every source weight between kept units; the output keeps one row per module in the
 * order given. No weight is changed, so the result computes exactly what the source
 * computes with all other units silenced.
 */
inline ComposedModel compose(const std::vector<ModuleSpec>& modules, const Model& source) {
	if (modules.size() < 2)
		throw std::invalid_argument("compose needs at least 2 modules, got " + std::to_string(modules.size()));
	const std::uint64_t digest = model_digest(source);
	std::vector<bool> seen(source.classes(), false);
	for (const auto& m : modules) {
		detail::check_module(m, source, digest);
		if (seen[m.class_id])
			throw std::invalid_argument("class " + std::to_string(m.class_id) + " selected twice");
		seen[m.class_id] = true;
	}
	ComposedModel cm{Model{}, module_classes(modules), union_indices(modules)};
	cm.model = slice_model(source, cm.hidden, cm.class_order);
	return cm;
}

/// Source class predicted for every input row.
inline std::vector<std::size_t> predict(const ComposedModel& cm, const Tensor& inputs) {
	const Tensor logits = predict_logits_chunked(cm.model, inputs);
	std::vector<std::size_t> out(inputs.dim(0));
	for (std::size_t i = 0; i < out.size(); ++i)
		out[i] = cm.class_order[argmax_row(logits, i)];
	return out;
}

namespace detail {

inline void check_subtask_labels(const Dataset& d, const IndexList& classes) {
	for (std::size_t y : d.labels)
		if (std::find(classes.begin(), classes.end(), y) == classes.end())
			throw std::invalid_argument("dataset '" + d.name + "' has label " + std::to_string(y) +
					" outside the selected classes");
}

inline double hit_rate(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& labels) {
	if (labels.empty())
		return std::numeric_limits<double>::quiet_NaN();
	std::size_t hits = 0;
	for (std::size_t i = 0; i < labels.size(); ++i)
		hits += pred[i] == labels[i] ? 1 : 0;
	return static_cast<double>(hits) / static_cast<double>(labels.size());
}

} // namespace detail

/// Top-1 accuracy of a composed model on data whose labels are all selected classes.
inline double reuse_accuracy(const ComposedModel& cm, const Dataset& d) {
	if (!(cm.model.normalization() == d.normalization))
		throw std::invalid_argument("dataset '" + d.name + "' normalisation differs from the model's training data");
	detail::check_subtask_labels(d, cm.class_order);
	return detail::hit_rate(predict(cm, d.inputs), d.labels);
}

/// Argmax of the source model run with masks; unselected classes can never win.
inline std::vector<std::size_t> predict_masked(const Model& source, const Tensor& inputs, const UnitMasks& masks,
		std::size_t chunk = 512) {
	std::vector<std::size_t> out;
	std::vector<std::size_t> idx;
	for (std::size_t s = 0; s < inputs.dim(0); s += chunk) {
		idx.clear();
		for (std::size_t i = s; i < std::min(inputs.dim(0), s + chunk); ++i)
			idx.push_back(i);
		const Tensor logits = forward_masked(source, gather_rows(inputs, idx), masks);
		for (std::size_t r = 0; r < idx.size(); ++r)
			out.push_back(argmax_row(logits, r));
	}
	return out;
}

inline double masked_accuracy(const Model& source, const UnitMasks& masks, const Dataset& d) {
	check_normalization(source, d);
	return detail::hit_rate(predict_masked(source, d.inputs, masks), d.labels);
}

/// Weight elements (biases included) retained by both modules, per parametrised layer.
inline std::vector<std::size_t> shared_weights(const ModuleSpec& a, const ModuleSpec& b, const Model& source) {
	const auto sa = detail::module_slices(a, source);
	const auto sb = detail::module_slices(b, source);
	std::vector<std::size_t> out;
	for (std::size_t l = 0; l < sa.size(); ++l) {
		const std::size_t rows = detail::intersection_size(sa[l].out, sb[l].out);
		const std::size_t ins = detail::intersection_size(sa[l].in, sb[l].in);
		out.push_back(rows * ins * sa[l].taps + rows);
	}
	return out;
}

/// Distinct source weight elements retained by at least one module.
inline std::size_t union_weight_count(const std::vector<ModuleSpec>& modules, const Model& source) {
	std::vector<std::vector<ParamSlice>> slices;
	for (const auto& m : modules)
		slices.push_back(detail::module_slices(m, source));
	std::size_t total = 0;
	for (std::size_t l = 0; l < slices.front().size(); ++l) {
		const Layer& layer = source.layer(slices.front()[l].layer);
		const std::size_t width = slices.front()[l].in_width;
		std::vector<bool> w(layer.spec.units * width, false), b(layer.spec.units, false);
		for (const auto& s : slices)
			for (std::uint32_t o : s[l].out) {
				b[o] = true;
				for (std::uint32_t i : s[l].in)
					w[o * width + i] = true;
			}
		total += static_cast<std::size_t>(std::count(w.begin(), w.end(), true)) * slices.front()[l].taps +
		         static_cast<std::size_t>(std::count(b.begin(), b.end(), true));
	}
	return total;
}

struct MetricsReport {
	IndexList classes;
	/// Weights of each module over weights of the source, in module order.
	std::vector<double> module_size;
	double mean_module_size = 0.0;
	/// Over unordered module pairs; NaN with fewer than two modules.
	double mean_overlap = std::numeric_limits<double>::quiet_NaN();
	double min_overlap = std::numeric_limits<double>::quiet_NaN();
	double max_overlap = std::numeric_limits<double>::quiet_NaN();
	/// Per parametrised layer: mean over pairs of shared weights over the layer's weights.
	std::vector<double> overlap_profile;
	/// Parameters of the composed (union) network over those of the source.
	double composed_size = 0.0;
	/// Distinct source weights held by any module over those of the source.
	double composed_weight_union = 0.0;
	double composed_flops = 0.0;
	/// NaN unless a test set was given.
	double reuse_accuracy = std::numeric_limits<double>::quiet_NaN();
};

/**
 * Size, overlap and composition ratios for a set of modules, plus reuse accuracy when a
 * test set restricted to the modules' classes is given.
 */
inline MetricsReport module_metrics(const std::vector<ModuleSpec>& modules, const Model& source,
		const Dataset* test = nullptr) {
	if (modules.empty())
		throw std::invalid_argument("module_metrics needs at least one module");
	const std::uint64_t digest = model_digest(source);
	for (const auto& m : modules)
		detail::check_module(m, source, digest);
	const LayerTally params = count_params(source);
	const double total = static_cast<double>(params.total);

	MetricsReport r;
	r.classes = module_classes(modules);
	for (const auto& m : modules) {
		std::size_t n = 0;
		for (const auto& s : detail::module_slices(m, source))
			n += s.weight_count();
		r.module_size.push_back(static_cast<double>(n) / total);
	}
	double sum = 0.0;
	for (double s : r.module_size)
		sum += s;
	r.mean_module_size = sum / static_cast<double>(modules.size());

	const auto slices = detail::module_slices(modules.front(), source);
	if (modules.size() >= 2) {
		r.overlap_profile.assign(slices.size(), 0.0);
		double acc = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
		std::size_t pairs = 0;
		for (std::size_t a = 0; a < modules.size(); ++a)
			for (std::size_t b = a + 1; b < modules.size(); ++b) {
				const auto shared = shared_weights(modules[a], modules[b], source);
				std::size_t n = 0;
				for (std::size_t l = 0; l < shared.size(); ++l) {
					n += shared[l];
					r.overlap_profile[l] += static_cast<double>(shared[l]) /
					                        static_cast<double>(params.per_layer[slices[l].layer]);
				}
				const double o = static_cast<double>(n) / total;
				acc += o;
				lo = std::min(lo, o);
				hi = std::max(hi, o);
				++pairs;
			}
		for (double& v : r.overlap_profile)
			v /= static_cast<double>(pairs);
		r.mean_overlap = acc / static_cast<double>(pairs);
		r.min_overlap = lo;
		r.max_overlap = hi;
	}

	const Model composed = slice_model(source, union_indices(modules), r.classes);
	r.composed_size = static_cast<double>(count_params(composed).total) / total;
	r.composed_weight_union = static_cast<double>(union_weight_count(modules, source)) / total;
	r.composed_flops = static_cast<double>(count_flops(composed).total) / static_cast<double>(count_flops(source).total);
	if (test) {
		if (!(source.normalization() == test->normalization))
			throw std::invalid_argument("dataset '" + test->name + "' normalisation differs from the model's training data");
		detail::check_subtask_labels(*test, r.classes);
		std::vector<std::size_t> pred;
		const Tensor logits = predict_logits_chunked(composed, test->inputs);
		for (std::size_t i = 0; i < test->size(); ++i)
			pred.push_back(r.classes[argmax_row(logits, i)]);
		r.reuse_accuracy = detail::hit_rate(pred, test->labels);
	}
	return r;
}

namespace detail {

/// NaN has no JSON form; it is written as null.
inline nlohmann::json number_or_null(double v) {
	return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
}

} // namespace detail

inline nlohmann::json to_json(const MetricsReport& r) {
	nlohmann::json j;
	j["classes"] = r.classes;
	j["module_size"] = r.module_size;
	j["mean_module_size"] = r.mean_module_size;
	j["mean_overlap"] = detail::number_or_null(r.mean_overlap);
	j["min_overlap"] = detail::number_or_null(r.min_overlap);
	j["max_overlap"] = detail::number_or_null(r.max_overlap);
	j["overlap_profile"] = r.overlap_profile;
	j["composed_size"] = r.composed_size;
	j["composed_weight_union"] = r.composed_weight_union;
	j["composed_flops"] = r.composed_flops;
	j["reuse_accuracy"] = detail::number_or_null(r.reuse_accuracy);
	return j;
}

inline void write_metrics_csv_header(std::ostream& os) {
	os << "subtask,classes,k,mean_module_size,mean_overlap,composed_size,composed_weight_union,composed_flops,"
	      "reuse_accuracy,full_accuracy\n";
}

/// One sweep row; classes are joined with '-'. full_accuracy is the source model on the same data.
inline void write_metrics_csv_row(std::ostream& os, std::size_t subtask, const MetricsReport& r, double full_accuracy) {
	os << subtask << ',';
	for (std::size_t i = 0; i < r.classes.size(); ++i)
		os << (i ? "-" : "") << r.classes[i];
	const auto prec = os.precision(17);
	os << ',' << r.classes.size() << ',' << r.mean_module_size << ',' << r.mean_overlap << ',' << r.composed_size << ','
	   << r.composed_weight_union << ',' << r.composed_flops << ',' << r.reuse_accuracy << ',' << full_accuracy << '\n';
	os.precision(prec);
}

} // namespace moda

#endif // MODA_COMPOSER_HPP
