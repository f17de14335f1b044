#ifndef MODA_DECOMPOSER_HPP
#define MODA_DECOMPOSER_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "moda/autograd.hpp"
#include "moda/dataset.hpp"
#include "moda/digest.hpp"
#include "moda/network.hpp"

namespace moda {

/// Per participating layer, the fraction of each class's samples on which a unit fires.
struct FrequencyTable {
	/// active[l] is [units x classes]: number of class-c samples with activation > 0.
	std::vector<std::vector<std::vector<std::size_t>>> active;
	std::vector<std::size_t> class_counts;

	std::size_t layers() const noexcept { return active.size(); }
	std::size_t units(std::size_t layer) const { return active.at(layer).size(); }
	std::size_t classes() const noexcept { return class_counts.size(); }

	double frequency(std::size_t layer, std::size_t unit, std::size_t cls) const {
		return static_cast<double>(active.at(layer).at(unit).at(cls)) / static_cast<double>(class_counts.at(cls));
	}
};

using IndexList = std::vector<std::uint32_t>;

/// Kept rows and kept input positions of one parametrised layer.
struct ParamSlice {
	std::size_t layer = 0; // index into Model::layers()
	IndexList out;
	IndexList in;          // input features, or input channels for a conv layer
	std::size_t taps = 1;  // 9 for a 3x3 kernel
	std::size_t in_width = 0;

	std::size_t weight_count() const noexcept { return out.size() * in.size() * taps + out.size(); }
};

/**
 * Per parametrised layer, which rows and inputs survive when only the listed units remain.
 *
 * hidden[l] are the retained unit (or channel) indices of the l-th participating layer,
 * sorted and unique. Inputs of the first parametrised layer are all kept; at a flatten
 * boundary each kept channel expands to its H·W positions. output_rows may be in any
 * order (it becomes the output row order) but must be unique.
 */
inline std::vector<ParamSlice> param_slices(const Model& src, const std::vector<IndexList>& hidden,
		const IndexList& output_rows) {
	const auto part = src.participating_layers();
	if (hidden.size() != part.size())
		throw ShapeError("expected " + std::to_string(part.size()) + " index lists, got " +
				std::to_string(hidden.size()));
	if (output_rows.empty())
		throw std::invalid_argument("no output rows selected");
	std::vector<bool> seen(src.classes(), false);
	for (std::uint32_t c : output_rows) {
		if (c >= src.classes() || seen[c])
			throw std::invalid_argument("output rows must be unique class indices below " +
					std::to_string(src.classes()));
		seen[c] = true;
	}

	std::vector<ParamSlice> out;
	IndexList cur(src.spec().input_shape[0]);
	for (std::uint32_t i = 0; i < cur.size(); ++i)
		cur[i] = i;
	std::size_t h = 0;
	for (std::size_t li = 0; li < src.layers().size(); ++li) {
		const Layer& s = src.layer(li);
		if (s.spec.kind == LayerKind::Flatten) {
			const std::size_t hw = s.in_shape[1] * s.in_shape[2];
			IndexList flat;
			flat.reserve(cur.size() * hw);
			for (std::uint32_t ch : cur)
				for (std::size_t p = 0; p < hw; ++p)
					flat.push_back(static_cast<std::uint32_t>(ch * hw + p));
			cur = std::move(flat);
		}
		if (!s.spec.has_params())
			continue;
		ParamSlice ps;
		ps.layer = li;
		ps.in = cur;
		ps.in_width = s.in_shape[0];
		ps.taps = s.spec.kind == LayerKind::Conv3x3 ? 9 : 1;
		if (s.spec.kind == LayerKind::Output) {
			ps.out = output_rows;
		} else {
			ps.out = hidden[h];
			for (std::size_t o = 0; o < ps.out.size(); ++o)
				if (ps.out[o] >= s.spec.units || (o && ps.out[o] <= ps.out[o - 1]))
					throw std::invalid_argument("index list of layer " + std::to_string(h) +
							" must be sorted, unique and below " + std::to_string(s.spec.units));
			cur = ps.out;
			++h;
		}
		out.push_back(std::move(ps));
	}
	return out;
}

/// Reduced copy of a model keeping only the listed hidden units and output rows.
inline Model slice_model(const Model& src, const std::vector<IndexList>& hidden, const IndexList& output_rows) {
	const std::vector<ParamSlice> slices = param_slices(src, hidden, output_rows);
	ModelSpec spec = src.spec();
	std::size_t h = 0;
	for (auto& l : spec.layers) {
		if (l.participates())
			l.units = hidden[h++].size();
		else if (l.kind == LayerKind::Output)
			l.units = output_rows.size();
	}
	spec.classes = output_rows.size();
	Model out = Model::build(spec);
	out.set_normalization(src.normalization());
	for (const ParamSlice& ps : slices) {
		const Layer& s = src.layer(ps.layer);
		Layer& d = out.layer(ps.layer);
		for (std::size_t o = 0; o < ps.out.size(); ++o) {
			d.bias[o] = s.bias[ps.out[o]];
			for (std::size_t i = 0; i < ps.in.size(); ++i)
				for (std::size_t t = 0; t < ps.taps; ++t)
					d.weight[(o * ps.in.size() + i) * ps.taps + t] =
							s.weight[(ps.out[o] * ps.in_width + ps.in[i]) * ps.taps + t];
		}
	}
	return out;
}

/// Masks equivalent to slicing: true exactly at the listed indices.
inline UnitMasks masks_from_indices(const Model& src, const std::vector<IndexList>& hidden, const IndexList& output_rows) {
	UnitMasks m;
	const auto part = src.participating_layers();
	for (std::size_t l = 0; l < part.size(); ++l) {
		m.hidden.emplace_back(src.layer(part[l]).spec.units, false);
		for (std::uint32_t u : hidden.at(l))
			m.hidden.back().at(u) = true;
	}
	m.output.assign(src.classes(), false);
	for (std::uint32_t c : output_rows)
		m.output.at(c) = true;
	return m;
}

/**
 * The weights of one class: retained units per layer and their extracted parameters.
 *
 * weights/biases hold one entry per parametrised layer of the source (output included),
 * sliced to (retained out x retained in). The output entry has exactly one row.
 */
struct ModuleSpec {
	std::size_t class_id = 0;
	ModelSpec source_spec;
	Normalization normalization;
	std::vector<IndexList> retained;
	std::vector<Tensor> weights;
	std::vector<Tensor> biases;
	std::uint64_t source_digest = 0;
	double tau = 0.9;
	std::uint64_t seed = 0;
	/// Participating layers where no unit met tau and the most frequent unit was kept instead.
	std::vector<std::size_t> fallback_layers;

	std::size_t weight_count() const {
		std::size_t n = 0;
		for (const auto& w : weights)
			n += w.size();
		for (const auto& b : biases)
			n += b.size();
		return n;
	}
};

/// Counts, per unit and class, the samples whose recorded activation is strictly positive.
inline FrequencyTable compute_frequencies(const Model& m, const Dataset& d, std::size_t chunk = 512) {
	d.validate();
	if (d.classes != m.classes())
		throw std::invalid_argument("compute_frequencies: dataset has " + std::to_string(d.classes) +
				" classes, model " + std::to_string(m.classes()));
	FrequencyTable ft;
	ft.class_counts = d.class_counts();
	for (std::size_t c = 0; c < ft.class_counts.size(); ++c)
		if (ft.class_counts[c] == 0)
			throw std::invalid_argument("compute_frequencies: class " + std::to_string(c) + " has no samples");
	for (std::size_t li : m.participating_layers())
		ft.active.emplace_back(m.layer(li).spec.units, std::vector<std::size_t>(m.classes(), 0));

	std::vector<std::size_t> idx;
	for (std::size_t s = 0; s < d.size(); s += chunk) {
		idx.clear();
		for (std::size_t i = s; i < std::min(d.size(), s + chunk); ++i)
			idx.push_back(i);
		const Tensor xb = gather_rows(d.inputs, idx);
		Graph g;
		const ForwardResult fr = forward_record(g, m, xb, {});
		for (std::size_t l = 0; l < fr.acts.layers.size(); ++l) {
			const Tensor& y = fr.acts.layers[l].value();
			const std::size_t units = y.dim(1);
			for (std::size_t r = 0; r < idx.size(); ++r) {
				const std::size_t c = d.labels[idx[r]];
				for (std::size_t u = 0; u < units; ++u)
					if (y[r * units + u] > 0.0)
						++ft.active[l][u][c];
			}
		}
	}
	return ft;
}

/**
 * Module for class c: per layer, units whose class-c activation frequency is >= tau.
 *
 * A layer with no qualifying unit keeps its single most frequent unit (lowest index on
 * ties) so the module stays connected; this is reported on stderr and in fallback_layers.
 */
inline ModuleSpec extract_module(const Model& m, const FrequencyTable& freq, std::size_t c, double tau) {
	if (!(tau > 0.0 && tau <= 1.0))
		throw std::invalid_argument("extract_module: tau must be in (0, 1], got " + std::to_string(tau));
	if (c >= m.classes())
		throw std::out_of_range("extract_module: class " + std::to_string(c) + " out of range");
	if (freq.layers() != m.participating_layers().size() || freq.classes() != m.classes())
		throw ShapeError("extract_module: frequency table does not match model");
	ModuleSpec spec;
	spec.class_id = c;
	spec.source_spec = m.spec();
	spec.normalization = m.normalization();
	spec.source_digest = model_digest(m);
	spec.tau = tau;
	spec.seed = m.spec().seed;
	for (std::size_t l = 0; l < freq.layers(); ++l) {
		IndexList keep;
		std::size_t best = 0;
		for (std::size_t u = 0; u < freq.units(l); ++u) {
			const double f = freq.frequency(l, u, c);
			if (f >= tau)
				keep.push_back(static_cast<std::uint32_t>(u));
			if (freq.active[l][u][c] > freq.active[l][best][c])
				best = u;
		}
		if (keep.empty()) {
			keep.push_back(static_cast<std::uint32_t>(best));
			spec.fallback_layers.push_back(l);
			std::cerr << "warning: class " << c << " layer " << l << " has no unit with frequency >= " << tau
			          << "; keeping unit " << best << '\n';
		}
		spec.retained.push_back(std::move(keep));
	}
	const Model sliced = slice_model(m, spec.retained, IndexList{static_cast<std::uint32_t>(c)});
	for (const auto& layer : sliced.layers())
		if (layer.spec.has_params()) {
			spec.weights.push_back(layer.weight);
			spec.biases.push_back(layer.bias);
		}
	return spec;
}

/// One module per class, all cut from one shared frequency table.
inline std::vector<ModuleSpec> decompose_all(const Model& m, const FrequencyTable& freq, double tau) {
	std::vector<ModuleSpec> out;
	for (std::size_t c = 0; c < m.classes(); ++c)
		out.push_back(extract_module(m, freq, c, tau));
	return out;
}

inline std::vector<ModuleSpec> decompose_all(const Model& m, const Dataset& train, double tau) {
	return decompose_all(m, compute_frequencies(m, train), tau);
}

/// Standalone runnable network of a module: its retained sub-network with one output.
inline Model module_model(const ModuleSpec& spec) {
	ModelSpec ms = spec.source_spec;
	std::size_t h = 0;
	for (auto& l : ms.layers) {
		if (l.participates())
			l.units = spec.retained.at(h++).size();
		else if (l.kind == LayerKind::Output)
			l.units = 1;
	}
	ms.classes = 1;
	Model out = Model::build(ms);
	out.set_normalization(spec.normalization);
	std::size_t p = 0;
	for (auto& layer : out.layers())
		if (layer.spec.has_params()) {
			if (spec.weights.at(p).shape() != layer.weight.shape() || spec.biases.at(p).shape() != layer.bias.shape())
				throw ShapeError("module weights do not match its index lists at layer " + std::to_string(p));
			layer.weight = spec.weights[p];
			layer.bias = spec.biases[p];
			++p;
		}
	return out;
}

/// The class logit of a module on each input row, in row order.
inline std::vector<double> module_forward(const ModuleSpec& spec, const Tensor& batch) {
	const Model m = module_model(spec);
	const Tensor logits = predict_logits_chunked(m, batch);
	return std::vector<double>(logits.data().begin(), logits.data().end());
}

} // namespace moda

#endif // MODA_DECOMPOSER_HPP
