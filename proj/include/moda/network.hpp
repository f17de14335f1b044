#ifndef MODA_NETWORK_HPP
#define MODA_NETWORK_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "moda/autograd.hpp"
#include "moda/normalization.hpp"
#include "moda/ops.hpp"
#include "moda/rng.hpp"
#include "moda/tensor.hpp"

namespace moda {

enum class LayerKind { Dense, Conv3x3, MaxPool2x2, Flatten, Output };

inline const char* layer_kind_name(LayerKind k) {
	switch (k) {
	case LayerKind::Dense: return "dense";
	case LayerKind::Conv3x3: return "conv3x3";
	case LayerKind::MaxPool2x2: return "maxpool2x2";
	case LayerKind::Flatten: return "flatten";
	case LayerKind::Output: return "output";
	}
	return "?";
}

struct LayerSpec {
	LayerKind kind = LayerKind::Dense;
	/// Output neurons (dense/output) or output channels (conv); 0 for pool and flatten.
	std::size_t units = 0;

	/// Hidden ReLU layers take part in the modular losses and in decomposition.
	bool participates() const noexcept { return kind == LayerKind::Dense || kind == LayerKind::Conv3x3; }
	bool has_params() const noexcept { return participates() || kind == LayerKind::Output; }

	friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Architecture of a sequential ReLU network. The output layer is the last entry.
struct ModelSpec {
	std::vector<LayerSpec> layers;
	Shape input_shape; // per sample: {features} or {C, H, W}
	std::size_t classes = 0;
	std::uint64_t seed = 0;

	/// Dense network input_dim -> hidden... -> classes.
	static ModelSpec mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t classes,
			std::uint64_t seed) {
		ModelSpec s;
		for (std::size_t h : hidden)
			s.layers.push_back({LayerKind::Dense, h});
		s.layers.push_back({LayerKind::Output, classes});
		s.input_shape = {input_dim};
		s.classes = classes;
		s.seed = seed;
		return s;
	}

	friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Layer {
	LayerSpec spec;
	Shape in_shape;  // per sample
	Shape out_shape; // per sample
	Tensor weight;   // dense/output: [units x in]; conv: [units x C_in x 3 x 3]
	Tensor bias;     // [units]
};

/// Per-sample output shape of every layer; throws ShapeError on an invalid architecture.
inline std::vector<Shape> infer_shapes(const ModelSpec& spec) {
	if (spec.layers.empty() || spec.layers.back().kind != LayerKind::Output)
		throw ShapeError("model must end with exactly one output layer");
	if (spec.input_shape.empty() || shape_numel(spec.input_shape) == 0)
		throw ShapeError("model input shape " + shape_str(spec.input_shape) + " is empty");
	if (spec.layers.back().units != spec.classes)
		throw ShapeError("output layer has " + std::to_string(spec.layers.back().units) + " units for " +
				std::to_string(spec.classes) + " classes");
	std::vector<Shape> out;
	Shape cur = spec.input_shape;
	for (std::size_t i = 0; i < spec.layers.size(); ++i) {
		const LayerSpec& l = spec.layers[i];
		const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
		switch (l.kind) {
		case LayerKind::Output:
			if (i + 1 != spec.layers.size())
				throw ShapeError("output layer must be last, found at " + std::to_string(i));
			[[fallthrough]];
		case LayerKind::Dense:
			if (cur.size() != 1)
				throw ShapeError(where + " needs a flat input, got " + shape_str(cur));
			if (l.units == 0)
				throw ShapeError(where + " has zero units");
			cur = {l.units};
			break;
		case LayerKind::Conv3x3:
			if (cur.size() != 3)
				throw ShapeError(where + " needs a CxHxW input, got " + shape_str(cur));
			if (l.units == 0)
				throw ShapeError(where + " has zero channels");
			cur = {l.units, cur[1], cur[2]};
			break;
		case LayerKind::MaxPool2x2:
			if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2)
				throw ShapeError(where + " needs a CxHxW input of at least 2x2, got " + shape_str(cur));
			cur = {cur[0], cur[1] / 2, cur[2] / 2};
			break;
		case LayerKind::Flatten:
			if (cur.size() != 3)
				throw ShapeError(where + " needs a CxHxW input, got " + shape_str(cur));
			cur = {shape_numel(cur)};
			break;
		}
		out.push_back(cur);
	}
	return out;
}

/**
 * A sequential ReLU network with its parameters.
 *
 * Every hidden dense/conv layer is followed by ReLU; the output layer yields raw logits.
 */
class Model {
public:
	Model() = default;

	/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), biases U(±1/sqrt(fan_in)), seeded by spec.seed.
	static Model build(const ModelSpec& spec) {
		Model m;
		m.spec_ = spec;
		const auto shapes = infer_shapes(spec);
		Shape cur = spec.input_shape;
		for (std::size_t i = 0; i < spec.layers.size(); ++i) {
			Layer layer;
			layer.spec = spec.layers[i];
			layer.in_shape = cur;
			layer.out_shape = shapes[i];
			if (layer.spec.has_params()) {
				const bool conv = layer.spec.kind == LayerKind::Conv3x3;
				const std::size_t fan_in = conv ? cur[0] * 9 : cur[0];
				layer.weight = conv ? Tensor(Shape{layer.spec.units, cur[0], 3, 3})
				                    : Tensor(Shape{layer.spec.units, cur[0]});
				layer.bias = Tensor(Shape{layer.spec.units});
				CounterRng rng(spec.seed, streams::kInit + i);
				const double wb = std::sqrt(6.0 / static_cast<double>(fan_in));
				const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
				for (double& v : layer.weight.data())
					v = rng.uniform(-wb, wb);
				for (double& v : layer.bias.data())
					v = rng.uniform(-bb, bb);
			}
			cur = shapes[i];
			m.layers_.push_back(std::move(layer));
		}
		return m;
	}

	const ModelSpec& spec() const noexcept { return spec_; }
	std::size_t classes() const noexcept { return spec_.classes; }
	const std::vector<Layer>& layers() const noexcept { return layers_; }
	std::vector<Layer>& layers() noexcept { return layers_; }
	const Layer& layer(std::size_t i) const { return layers_.at(i); }
	Layer& layer(std::size_t i) { return layers_.at(i); }

	/// Indices (into layers()) of the hidden layers that take part in modularity.
	std::vector<std::size_t> participating_layers() const {
		std::vector<std::size_t> idx;
		for (std::size_t i = 0; i < layers_.size(); ++i)
			if (layers_[i].spec.participates())
				idx.push_back(i);
		return idx;
	}

	/// Weight and bias tensors in layer order.
	std::vector<Tensor*> parameters() {
		std::vector<Tensor*> p;
		for (auto& l : layers_)
			if (l.spec.has_params()) {
				p.push_back(&l.weight);
				p.push_back(&l.bias);
			}
		return p;
	}
	std::vector<const Tensor*> parameters() const {
		std::vector<const Tensor*> p;
		for (const auto& l : layers_)
			if (l.spec.has_params()) {
				p.push_back(&l.weight);
				p.push_back(&l.bias);
			}
		return p;
	}

	void zero_grad() {
		for (Tensor* t : parameters())
			t->zero_grad();
	}
	void drop_grad() {
		for (Tensor* t : parameters())
			t->drop_grad();
	}

	const Normalization& normalization() const noexcept { return norm_; }
	void set_normalization(Normalization n) { norm_ = std::move(n); }

private:
	ModelSpec spec_;
	std::vector<Layer> layers_;
	Normalization norm_;
};

/// Post-ReLU channel-wise activations of every participating layer for one batch.
struct ActivationBatch {
	std::vector<Var> layers;          // each [batch x units], entries >= 0
	std::vector<std::size_t> labels;  // class index per row
};

struct ForwardResult {
	Var logits;
	ActivationBatch acts;
};

/// Per-layer keep masks for the masked-forward oracle.
struct UnitMasks {
	std::vector<std::vector<bool>> hidden; // one per participating layer, width = units
	std::vector<bool> output;              // width = classes
};

/// Stand-in for -inf on unselected output logits; only ever compared by argmax.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

namespace detail {

inline void check_batch(const Model& m, const Tensor& batch) {
	const Shape& in = m.spec().input_shape;
	if (batch.rank() != in.size() + 1 || !std::equal(in.begin(), in.end(), batch.shape().begin() + 1))
		throw ShapeError("batch " + shape_str(batch.shape()) + " does not match model input " + shape_str(in));
}

/// Shared forward walk. bind() turns a parameter tensor into a graph leaf.
template <class M, class Bind>
ForwardResult forward_impl(Graph& g, M& m, const Tensor& batch, std::span<const std::size_t> labels,
		bool record, const UnitMasks* masks, Bind&& bind) {
	if (!labels.empty() && labels.size() != batch.dim(0))
		throw ShapeError("got " + std::to_string(labels.size()) + " labels for batch " + shape_str(batch.shape()));
	const std::size_t n = batch.dim(0);
	Var x = g.view(batch);
	ForwardResult res;
	res.acts.labels.assign(labels.begin(), labels.end());
	std::size_t hidden_idx = 0;
	for (std::size_t li = 0; li < m.layers().size(); ++li) {
		auto& layer = m.layers()[li];
		switch (layer.spec.kind) {
		case LayerKind::Dense:
		case LayerKind::Output:
			x = ops::linear(x, bind(layer.weight), bind(layer.bias));
			break;
		case LayerKind::Conv3x3:
			x = ops::conv2d(x, bind(layer.weight), bind(layer.bias));
			break;
		case LayerKind::MaxPool2x2:
			x = ops::maxpool2x2(x);
			break;
		case LayerKind::Flatten:
			x = ops::reshape(x, Shape{n, shape_numel(layer.out_shape)});
			break;
		}
		if (!layer.spec.participates())
			continue;
		x = ops::relu(x);
		if (masks) {
			const auto& keep = masks->hidden.at(hidden_idx);
			const std::size_t units = layer.spec.units;
			const std::size_t per_unit = shape_numel(layer.out_shape) / units;
			Tensor mask(x.value().shape());
			for (std::size_t b = 0; b < n; ++b)
				for (std::size_t u = 0; u < units; ++u)
					if (keep[u])
						std::fill_n(mask.data().begin() + static_cast<std::ptrdiff_t>((b * units + u) * per_unit),
								per_unit, 1.0);
			x = ops::mul(x, g.constant(std::move(mask)));
		}
		if (record)
			res.acts.layers.push_back(layer.spec.kind == LayerKind::Conv3x3 ? ops::spatial_mean(x) : x);
		++hidden_idx;
	}
	res.logits = x;
	return res;
}

} // namespace detail

/**
 * Forward pass that records post-ReLU activations of each participating layer.
 *
 * Conv layers are reduced to one value per channel by spatial averaging. The
 * model's parameters are bound as differentiable leaves, so a backward() on any
 * loss built from the result accumulates into their grad buffers.
 */
inline ForwardResult forward_record(Graph& g, Model& m, const Tensor& batch, std::span<const std::size_t> labels) {
	detail::check_batch(m, batch);
	return detail::forward_impl(g, m, batch, labels, true, nullptr, [&](Tensor& t) { return g.parameter(t); });
}

/// Same walk with frozen parameters (no gradients reach the model).
inline ForwardResult forward_record(Graph& g, const Model& m, const Tensor& batch,
		std::span<const std::size_t> labels) {
	detail::check_batch(m, batch);
	return detail::forward_impl(g, m, batch, labels, true, nullptr, [&](const Tensor& t) { return g.view(t); });
}

/// Logits only, no activation records.
inline Tensor predict_logits(const Model& m, const Tensor& batch) {
	detail::check_batch(m, batch);
	Graph g;
	auto r = detail::forward_impl(g, m, batch, {}, false, nullptr, [&](const Tensor& t) { return g.view(t); });
	return r.logits.value();
}

/// predict_logits over large inputs in fixed-size chunks.
inline Tensor predict_logits_chunked(const Model& m, const Tensor& inputs, std::size_t chunk = 512) {
	const std::size_t n = inputs.dim(0);
	Tensor out(Shape{n, m.classes()});
	std::vector<std::size_t> idx;
	for (std::size_t s = 0; s < n; s += chunk) {
		idx.clear();
		for (std::size_t i = s; i < std::min(n, s + chunk); ++i)
			idx.push_back(i);
		Tensor part = predict_logits(m, gather_rows(inputs, idx));
		std::copy(part.data().begin(), part.data().end(),
				out.data().begin() + static_cast<std::ptrdiff_t>(s * m.classes()));
	}
	return out;
}

/**
 * Forward pass with units outside the masks forced to zero after each participating
 * layer's ReLU. Conv masks zero whole channels; the mask carries through pooling and
 * flatten by position. Unselected output logits are reported as kMaskedLogit.
 */
inline Tensor forward_masked(const Model& m, const Tensor& batch, const UnitMasks& masks) {
	detail::check_batch(m, batch);
	const auto part = m.participating_layers();
	if (masks.hidden.size() != part.size())
		throw ShapeError("forward_masked: " + std::to_string(masks.hidden.size()) + " hidden masks for " +
				std::to_string(part.size()) + " participating layers");
	for (std::size_t i = 0; i < part.size(); ++i)
		if (masks.hidden[i].size() != m.layer(part[i]).spec.units)
			throw ShapeError("forward_masked: mask " + std::to_string(i) + " has width " +
					std::to_string(masks.hidden[i].size()) + ", layer has " +
					std::to_string(m.layer(part[i]).spec.units) + " units");
	if (masks.output.size() != m.classes())
		throw ShapeError("forward_masked: output mask width " + std::to_string(masks.output.size()) + " for " +
				std::to_string(m.classes()) + " classes");
	if (std::none_of(masks.output.begin(), masks.output.end(), [](bool b) { return b; }))
		throw std::invalid_argument("forward_masked: output mask selects no class");
	Graph g;
	auto r = detail::forward_impl(g, m, batch, {}, false, &masks, [&](const Tensor& t) { return g.view(t); });
	Tensor logits = r.logits.value();
	const std::size_t k = m.classes();
	for (std::size_t i = 0; i < logits.dim(0); ++i)
		for (std::size_t c = 0; c < k; ++c)
			if (!masks.output[c])
				logits[i * k + c] = kMaskedLogit;
	return logits;
}

/// Masks that keep every unit and every class.
inline UnitMasks full_masks(const Model& m) {
	UnitMasks masks;
	for (std::size_t li : m.participating_layers())
		masks.hidden.emplace_back(m.layer(li).spec.units, true);
	masks.output.assign(m.classes(), true);
	return masks;
}

/// Index of the largest entry in a row; ties resolve to the lowest index.
inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
	const std::size_t k = logits.dim(1);
	std::size_t best = 0;
	for (std::size_t c = 1; c < k; ++c)
		if (logits.at(row, c) > logits.at(row, best))
			best = c;
	return best;
}

struct LayerTally {
	std::vector<std::size_t> per_layer; // aligned with model layers; 0 for pool/flatten
	std::size_t total = 0;
};

/// Number of scalar weights and biases; a 3x3 kernel counts 9.
inline LayerTally count_params(const Model& m) {
	LayerTally t;
	for (const auto& l : m.layers()) {
		const std::size_t c = l.spec.has_params() ? l.weight.size() + l.bias.size() : 0;
		t.per_layer.push_back(c);
		t.total += c;
	}
	return t;
}

/// Per-sample FLOPs: dense 2·in·out, conv 2·H·W·C_out·C_in·9; pooling and activations are free.
inline LayerTally count_flops(const Model& m) {
	LayerTally t;
	for (const auto& l : m.layers()) {
		std::size_t f = 0;
		if (l.spec.kind == LayerKind::Dense || l.spec.kind == LayerKind::Output)
			f = 2 * l.in_shape[0] * l.spec.units;
		else if (l.spec.kind == LayerKind::Conv3x3)
			f = 2 * l.out_shape[1] * l.out_shape[2] * l.spec.units * l.in_shape[0] * 9;
		t.per_layer.push_back(f);
		t.total += f;
	}
	return t;
}

} // namespace moda

#endif // MODA_NETWORK_HPP
