#ifndef MODA_AUTOGRAD_HPP
#define MODA_AUTOGRAD_HPP

#include <cassert>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "moda/tensor.hpp"

namespace moda {

class Graph;

/// Handle to a node recorded in a Graph. Cheap to copy; only valid while the graph lives.
class Var {
public:
	Var() = default;
	Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

	Graph& graph() const { return *graph_; }
	std::size_t id() const noexcept { return id_; }
	bool valid() const noexcept { return graph_ != nullptr; }

	const Tensor& value() const;
	const Shape& shape() const { return value().shape(); }
	bool requires_grad() const;

private:
	Graph* graph_ = nullptr;
	std::size_t id_ = 0;
};

/**
 * Define-by-run tape for reverse-mode differentiation.
 *
 * Nodes are appended in creation order, which is a topological order of the
 * computation; backward() walks them in reverse. Leaves bound with parameter()
 * alias an external tensor and accumulate their gradient into its grad buffer,
 * so repeated backward() calls without zeroing sum up.
 */
class Graph {
public:
	/// Receives the gradient of the node's output and scatters into its parents.
	using BackwardFn = std::function<void(Graph&, std::span<const double>)>;

	Graph() = default;
	Graph(const Graph&) = delete;
	Graph& operator=(const Graph&) = delete;

	/// Owned leaf that never receives a gradient.
	Var constant(Tensor t) {
		Node n;
		n.owned = std::move(t);
		return push(std::move(n));
	}

	/// Non-differentiable leaf aliasing an external tensor; the tensor must outlive the graph.
	Var view(const Tensor& t) {
		Node n;
		n.external = &t;
		return push(std::move(n));
	}

	/// Differentiable leaf aliasing an external tensor. Its grad buffer is created if absent.
	Var parameter(Tensor& t) {
		t.enable_grad();
		Node n;
		n.external = &t;
		n.sink = &t;
		n.requires_grad = true;
		return push(std::move(n));
	}

	/// Differentiable owned leaf; read its gradient with grad_of() after backward().
	Var variable(Tensor t) {
		Node n;
		n.owned = std::move(t);
		n.requires_grad = true;
		return push(std::move(n));
	}

	/// Records an op output. The node requires grad iff any parent does.
	Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
		Node n;
		n.owned = std::move(value);
		for (const Var& p : parents) {
			if (!p.valid() || &p.graph() != this)
				throw std::invalid_argument("operand does not belong to this graph");
			if (nodes_[p.id()].requires_grad)
				n.requires_grad = true;
		}
		if (n.requires_grad)
			n.backward = std::move(fn);
		return push(std::move(n));
	}

	const Tensor& value(std::size_t id) const {
		const Node& n = nodes_[id];
		return n.external ? *n.external : n.owned;
	}

	bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

	/**
	 * Gradient buffer of a node during backward, for accumulation by op closures.
	 * Returns an empty span when the node does not require a gradient.
	 */
	std::span<double> grad_sink(std::size_t id) {
		Node& n = nodes_[id];
		if (!n.requires_grad)
			return {};
		if (n.grad.empty())
			n.grad.assign(value(id).size(), 0.0);
		return n.grad;
	}

	/// Gradient computed for a node by the last backward() (empty if never reached).
	std::span<const double> grad_of(Var v) const { return nodes_[v.id()].grad; }

	/// Populates d(loss)/d(node) for every differentiable node reachable from loss.
	void backward(Var loss) {
		if (&loss.graph() != this)
			throw std::invalid_argument("loss belongs to a different graph");
		if (value(loss.id()).size() != 1)
			throw ShapeError("backward() needs a scalar loss, got shape " +
					shape_str(value(loss.id()).shape()));
		for (auto& n : nodes_)
			std::fill(n.grad.begin(), n.grad.end(), 0.0);
		if (!nodes_[loss.id()].requires_grad)
			return;
		grad_sink(loss.id())[0] = 1.0;
		for (std::size_t i = loss.id() + 1; i-- > 0;) {
			Node& n = nodes_[i];
			if (!n.requires_grad || n.grad.empty())
				continue;
			// Closures only touch buffers of lower-index nodes; nodes_ never reallocates here.
			if (n.backward)
				n.backward(*this, n.grad);
			if (n.sink) {
				auto dst = n.sink->grad();
				for (std::size_t k = 0; k < dst.size(); ++k)
					dst[k] += n.grad[k];
			}
		}
	}

	std::size_t size() const noexcept { return nodes_.size(); }

private:
	struct Node {
		Tensor owned;
		const Tensor* external = nullptr;
		Tensor* sink = nullptr;
		bool requires_grad = false;
		std::vector<double> grad;
		BackwardFn backward;
	};

	Var push(Node n) {
		nodes_.push_back(std::move(n));
		return Var(this, nodes_.size() - 1);
	}

	std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

} // namespace moda

#endif // MODA_AUTOGRAD_HPP
