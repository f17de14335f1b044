#ifndef MODA_GRADCHECK_HPP
#define MODA_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "moda/autograd.hpp"
#include "moda/objectives.hpp"
#include "moda/ops.hpp"
#include "moda/rng.hpp"
#include "moda/tensor.hpp"

namespace moda::gradcheck {

/// Builds a scalar from the op's inputs on a fresh graph.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

/// Called with the op name and the analytic gradient (all inputs concatenated) before comparison.
using Perturb = std::function<void(std::string_view, std::span<double>)>;

struct Instance {
	std::vector<Tensor> inputs;
	ScalarFn fn;
};

/// Draws one seeded instance of an op; inputs are kept clear of non-differentiable points.
using InstanceFactory = std::function<Instance(CounterRng&)>;

struct OpCase {
	std::string name;
	double tolerance;
	InstanceFactory make;
};

struct Options {
	std::size_t instances = 20;
	double h = 1e-5;
	std::uint64_t seed = 0;
	Perturb perturb;
};

struct OpResult {
	std::string name;
	std::size_t instances = 0;
	std::size_t checked = 0; // scalar partial derivatives compared
	double max_error = 0.0;
	double tolerance = 0.0;

	bool passed() const { return checked > 0 && max_error <= tolerance; }
};

struct Report {
	std::vector<OpResult> ops;

	bool passed() const {
		return !ops.empty() && std::all_of(ops.begin(), ops.end(), [](const OpResult& r) { return r.passed(); });
	}
};

inline double relative_error(double analytic, double numeric) {
	return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

inline double evaluate(const Instance& inst, const std::vector<Tensor>& inputs) {
	Graph g;
	std::vector<Var> vars;
	vars.reserve(inputs.size());
	for (const Tensor& t : inputs)
		vars.push_back(g.view(t));
	return inst.fn(g, vars).value().item();
}

/// Analytic gradient of the instance's scalar, inputs concatenated in order.
inline std::vector<double> analytic_gradient(const Instance& inst) {
	Graph g;
	std::vector<Var> vars;
	for (const Tensor& t : inst.inputs)
		vars.push_back(g.variable(t));
	Var out = inst.fn(g, vars);
	g.backward(out);
	std::vector<double> grad;
	for (std::size_t k = 0; k < vars.size(); ++k) {
		auto gk = g.grad_of(vars[k]);
		if (gk.empty())
			grad.insert(grad.end(), inst.inputs[k].size(), 0.0);
		else
			grad.insert(grad.end(), gk.begin(), gk.end());
	}
	return grad;
}

/// Central differences with step h, inputs concatenated in order.
inline std::vector<double> numeric_gradient(const Instance& inst, double h) {
	std::vector<Tensor> inputs = inst.inputs;
	std::vector<double> grad;
	for (auto& t : inputs)
		for (std::size_t i = 0; i < t.size(); ++i) {
			const double x0 = t[i];
			t[i] = x0 + h;
			const double fp = evaluate(inst, inputs);
			t[i] = x0 - h;
			const double fm = evaluate(inst, inputs);
			t[i] = x0;
			grad.push_back((fp - fm) / (2.0 * h));
		}
	return grad;
}

inline OpResult check_op(const OpCase& op, std::size_t op_index, const Options& opt) {
	OpResult r;
	r.name = op.name;
	r.tolerance = op.tolerance;
	for (std::size_t k = 0; k < opt.instances; ++k) {
		CounterRng rng(opt.seed, streams::kGradcheck + (static_cast<std::uint64_t>(op_index) << 16) + k);
		const Instance inst = op.make(rng);
		std::vector<double> a = analytic_gradient(inst);
		if (opt.perturb)
			opt.perturb(op.name, a);
		const std::vector<double> n = numeric_gradient(inst, opt.h);
		for (std::size_t i = 0; i < a.size(); ++i)
			r.max_error = std::max(r.max_error, relative_error(a[i], n[i]));
		r.checked += a.size();
		++r.instances;
	}
	return r;
}

namespace detail {

inline Tensor random(CounterRng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
	Tensor t(std::move(s));
	for (std::size_t i = 0; i < t.size(); ++i)
		t[i] = rng.uniform(lo, hi);
	return t;
}

/// Values with |x| in [0.1, 1] so relu and abs stay differentiable within the FD step.
inline Tensor away_from_zero(CounterRng& rng, Shape s) {
	Tensor t(std::move(s));
	for (std::size_t i = 0; i < t.size(); ++i)
		t[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
	return t;
}

/// Shuffled, well-separated values so every pooling window has a unique maximum.
inline Tensor distinct(CounterRng& rng, Shape s) {
	Tensor t(std::move(s));
	std::vector<std::size_t> order(t.size());
	for (std::size_t i = 0; i < order.size(); ++i)
		order[i] = i;
	for (std::size_t i = order.size(); i > 1; --i)
		std::swap(order[i - 1], order[rng.below(i)]);
	for (std::size_t i = 0; i < t.size(); ++i)
		t[i] = 0.1 * static_cast<double>(order[i]) + rng.uniform(0.0, 0.01) - 0.05 * t.size();
	return t;
}

inline std::size_t dim(CounterRng& rng, std::size_t lo, std::size_t hi) {
	return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

/// Labels covering `classes` classes with at least two rows each, shuffled.
inline std::vector<std::size_t> labels(CounterRng& rng, std::size_t classes, std::size_t per_class) {
	std::vector<std::size_t> y;
	for (std::size_t c = 0; c < classes; ++c)
		y.insert(y.end(), per_class, c);
	for (std::size_t i = y.size(); i > 1; --i)
		std::swap(y[i - 1], y[rng.below(i)]);
	return y;
}

/// Post-ReLU-like activations for two layers: strictly positive entries.
inline std::vector<Tensor> activations(CounterRng& rng, std::size_t rows) {
	return {random(rng, Shape{rows, dim(rng, 2, 5)}, 0.1, 1.0), random(rng, Shape{rows, dim(rng, 2, 5)}, 0.1, 1.0)};
}

inline ActivationBatch act_batch(std::span<const Var> v, std::size_t first, std::vector<std::size_t> y) {
	ActivationBatch acts;
	for (std::size_t i = first; i < v.size(); ++i)
		acts.layers.push_back(v[i]);
	acts.labels = std::move(y);
	return acts;
}

/// Op whose scalar is weighted_sum(f(inputs), w) with w drawn once per instance.
template <class F>
Instance reduced(CounterRng& rng, std::vector<Tensor> inputs, F f) {
	Graph probe;
	std::vector<Var> pv;
	for (const Tensor& t : inputs)
		pv.push_back(probe.view(t));
	Tensor w = random(rng, f(pv).shape());
	return {std::move(inputs), [f, w](Graph&, std::span<const Var> v) { return ops::weighted_sum(f(v), w); }};
}

} // namespace detail

inline constexpr double kLinearTolerance = 1e-6;
inline constexpr double kTolerance = 1e-4;

/// Every differentiable op plus the three modular losses and the unified loss.
inline std::vector<OpCase> default_suite() {
	using detail::dim;
	using detail::random;
	using detail::reduced;
	using VS = std::span<const Var>;
	std::vector<OpCase> s;

	s.push_back({"add", kLinearTolerance, [](CounterRng& r) {
		Shape sh{dim(r, 1, 4), dim(r, 1, 4)};
		return reduced(r, {random(r, sh), random(r, sh)}, [](VS v) { return ops::add(v[0], v[1]); });
	}});
	s.push_back({"scale", kLinearTolerance, [](CounterRng& r) {
		const double k = r.uniform(-2.0, 2.0);
		return reduced(r, {random(r, Shape{dim(r, 1, 6)})}, [k](VS v) { return ops::scale(v[0], k); });
	}});
	s.push_back({"add_scalar", kLinearTolerance, [](CounterRng& r) {
		const double c = r.uniform(-2.0, 2.0);
		return reduced(r, {random(r, Shape{dim(r, 1, 6)})}, [c](VS v) { return ops::add_scalar(v[0], c); });
	}});
	s.push_back({"mul", kTolerance, [](CounterRng& r) {
		Shape sh{dim(r, 1, 4), dim(r, 1, 4)};
		return reduced(r, {random(r, sh), random(r, sh)}, [](VS v) { return ops::mul(v[0], v[1]); });
	}});
	s.push_back({"sum", kLinearTolerance, [](CounterRng& r) {
		return Instance{{random(r, Shape{dim(r, 1, 4), dim(r, 1, 4)})},
				[](Graph&, VS v) { return ops::sum(v[0]); }};
	}});
	s.push_back({"weighted_sum", kLinearTolerance, [](CounterRng& r) {
		return reduced(r, {random(r, Shape{dim(r, 1, 4), dim(r, 1, 4)})}, [](VS v) { return v[0]; });
	}});
	s.push_back({"reshape", kLinearTolerance, [](CounterRng& r) {
		const std::size_t a = dim(r, 1, 4), b = dim(r, 1, 4);
		return reduced(r, {random(r, Shape{a, b})}, [a, b](VS v) { return ops::reshape(v[0], Shape{b, a}); });
	}});
	s.push_back({"matmul", kTolerance, [](CounterRng& r) {
		const std::size_t m = dim(r, 1, 4), k = dim(r, 1, 4), n = dim(r, 1, 4);
		return reduced(r, {random(r, Shape{m, k}), random(r, Shape{k, n})},
				[](VS v) { return ops::matmul(v[0], v[1]); });
	}});
	s.push_back({"transpose", kLinearTolerance, [](CounterRng& r) {
		return reduced(r, {random(r, Shape{dim(r, 1, 4), dim(r, 1, 4)})},
				[](VS v) { return ops::transpose(v[0]); });
	}});
	s.push_back({"linear", kTolerance, [](CounterRng& r) {
		const std::size_t n = dim(r, 1, 4), in = dim(r, 1, 5), out = dim(r, 1, 4);
		return reduced(r, {random(r, Shape{n, in}), random(r, Shape{out, in}), random(r, Shape{out})},
				[](VS v) { return ops::linear(v[0], v[1], v[2]); });
	}});
	s.push_back({"relu", kLinearTolerance, [](CounterRng& r) {
		return reduced(r, {detail::away_from_zero(r, Shape{dim(r, 1, 4), dim(r, 1, 4)})},
				[](VS v) { return ops::relu(v[0]); });
	}});
	s.push_back({"abs", kLinearTolerance, [](CounterRng& r) {
		return reduced(r, {detail::away_from_zero(r, Shape{dim(r, 1, 4), dim(r, 1, 4)})},
				[](VS v) { return ops::abs(v[0]); });
	}});
	s.push_back({"l1_sum", kLinearTolerance, [](CounterRng& r) {
		return Instance{{detail::away_from_zero(r, Shape{dim(r, 1, 4), dim(r, 1, 4)})},
				[](Graph&, VS v) { return ops::l1_sum(v[0]); }};
	}});
	s.push_back({"conv2d", kTolerance, [](CounterRng& r) {
		const std::size_t n = dim(r, 1, 2), ci = dim(r, 1, 2), co = dim(r, 1, 2);
		const std::size_t h = dim(r, 2, 4), w = dim(r, 2, 4);
		return reduced(r, {random(r, Shape{n, ci, h, w}), random(r, Shape{co, ci, 3, 3}), random(r, Shape{co})},
				[](VS v) { return ops::conv2d(v[0], v[1], v[2]); });
	}});
	s.push_back({"maxpool2x2", kLinearTolerance, [](CounterRng& r) {
		const std::size_t n = dim(r, 1, 2), c = dim(r, 1, 2);
		return reduced(r, {detail::distinct(r, Shape{n, c, 2 * dim(r, 1, 2), 2 * dim(r, 1, 2)})},
				[](VS v) { return ops::maxpool2x2(v[0]); });
	}});
	s.push_back({"spatial_mean", kLinearTolerance, [](CounterRng& r) {
		return reduced(r, {random(r, Shape{dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)})},
				[](VS v) { return ops::spatial_mean(v[0]); });
	}});
	s.push_back({"cosine_sim", kTolerance, [](CounterRng& r) {
		const std::size_t d = dim(r, 2, 6);
		return Instance{{random(r, Shape{d}), random(r, Shape{d})},
				[](Graph&, VS v) { return ops::cosine_sim(v[0], v[1]); }};
	}});
	s.push_back({"normalize_rows", kTolerance, [](CounterRng& r) {
		return reduced(r, {random(r, Shape{dim(r, 1, 4), dim(r, 2, 5)})},
				[](VS v) { return ops::normalize_rows(v[0]); });
	}});
	s.push_back({"pairwise_cosine", kTolerance, [](CounterRng& r) {
		return reduced(r, {random(r, Shape{dim(r, 2, 5), dim(r, 2, 5)})},
				[](VS v) { return ops::pairwise_cosine(v[0]); });
	}});
	s.push_back({"softmax_cross_entropy", kTolerance, [](CounterRng& r) {
		const std::size_t n = dim(r, 1, 5), k = dim(r, 2, 5);
		std::vector<std::size_t> y(n);
		for (auto& c : y)
			c = static_cast<std::size_t>(r.below(k));
		return Instance{{random(r, Shape{n, k}, -3.0, 3.0)},
				[y](Graph&, VS v) { return ops::softmax_cross_entropy(v[0], y); }};
	}});

	const auto loss_case = [](auto term) {
		return [term](CounterRng& r) {
			const std::size_t classes = dim(r, 2, 3), per = dim(r, 2, 3);
			auto y = detail::labels(r, classes, per);
			return Instance{detail::activations(r, y.size()), [term, y](Graph&, VS v) {
				return term(detail::act_batch(v, 0, y)).value;
			}};
		};
	};
	s.push_back({"affinity_loss", kTolerance, loss_case([](const ActivationBatch& a) { return affinity_loss(a); })});
	s.push_back({"dispersion_loss", kTolerance,
			loss_case([](const ActivationBatch& a) { return dispersion_loss(a); })});
	s.push_back({"compactness_loss", kTolerance,
			loss_case([](const ActivationBatch& a) { return compactness_loss(a); })});
	s.push_back({"unified_loss", kTolerance, [](CounterRng& r) {
		const std::size_t classes = dim(r, 2, 3), per = dim(r, 2, 3);
		auto y = detail::labels(r, classes, per);
		std::vector<Tensor> in{random(r, Shape{y.size(), classes}, -2.0, 2.0)};
		for (auto& t : detail::activations(r, y.size()))
			in.push_back(std::move(t));
		const LossWeights w{r.uniform(0.5, 1.5), r.uniform(0.5, 1.5), r.uniform(0.1, 0.5)};
		return Instance{std::move(in), [y, w](Graph&, VS v) {
			return unified_loss(v[0], y, detail::act_batch(v, 1, y), w).total;
		}};
	}});
	return s;
}

inline Report run(const std::vector<OpCase>& suite, const Options& opt = {}) {
	Report rep;
	for (std::size_t i = 0; i < suite.size(); ++i)
		rep.ops.push_back(check_op(suite[i], i, opt));
	return rep;
}

inline void print_table(std::ostream& os, const Report& rep) {
	os << "op                       instances  partials  max_rel_error  tolerance  result\n";
	for (const auto& r : rep.ops) {
		char line[160];
		std::snprintf(line, sizeof line, "%-24s %9zu %9zu %14.3e %10.0e  %s\n", r.name.c_str(), r.instances,
				r.checked, r.max_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
		os << line;
	}
	os << (rep.passed() ? "all ops PASS\n" : "gradient check FAILED\n");
}

} // namespace moda::gradcheck

#endif // MODA_GRADCHECK_HPP
