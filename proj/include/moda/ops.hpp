#ifndef MODA_OPS_HPP
#define MODA_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "moda/autograd.hpp"
#include "moda/tensor.hpp"

/// Differentiable operations recorded on a Graph.
namespace moda::ops {

/// Norm floor shared by cosine similarity and row normalisation; cos(0, x) == 0.
inline constexpr double kCosineEps = 1e-12;

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
	if (t.rank() != rank)
		throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
				shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
	if (a.shape() != b.shape())
		throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
				shape_str(b.shape()));
}

inline void axpy(std::span<double> dst, std::span<const double> src, double s = 1.0) {
	for (std::size_t i = 0; i < dst.size(); ++i)
		dst[i] += s * src[i];
}

} // namespace detail

inline Var add(Var a, Var b) {
	const Tensor& av = a.value();
	const Tensor& bv = b.value();
	detail::require_same(av, bv, "add");
	Tensor out(av.shape());
	for (std::size_t i = 0; i < out.size(); ++i)
		out[i] = av[i] + bv[i];
	return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, std::span<const double> go) {
		detail::axpy(g.grad_sink(a.id()), go);
		detail::axpy(g.grad_sink(b.id()), go);
	});
}

inline Var scale(Var a, double s) {
	Tensor out = a.value();
	for (double& v : out.data())
		v *= s;
	return a.graph().record(std::move(out), {a}, [a, s](Graph& g, std::span<const double> go) {
		detail::axpy(g.grad_sink(a.id()), go, s);
	});
}

inline Var add_scalar(Var a, double c) {
	Tensor out = a.value();
	for (double& v : out.data())
		v += c;
	return a.graph().record(std::move(out), {a}, [a](Graph& g, std::span<const double> go) {
		detail::axpy(g.grad_sink(a.id()), go);
	});
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
	const Tensor& av = a.value();
	const Tensor& bv = b.value();
	detail::require_same(av, bv, "mul");
	Tensor out(av.shape());
	for (std::size_t i = 0; i < out.size(); ++i)
		out[i] = av[i] * bv[i];
	return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, std::span<const double> go) {
		const Tensor& av = g.value(a.id());
		const Tensor& bv = g.value(b.id());
		if (auto da = g.grad_sink(a.id()); !da.empty())
			for (std::size_t i = 0; i < go.size(); ++i)
				da[i] += go[i] * bv[i];
		if (auto db = g.grad_sink(b.id()); !db.empty())
			for (std::size_t i = 0; i < go.size(); ++i)
				db[i] += go[i] * av[i];
	});
}

inline Var sum(Var a) {
	const Tensor& av = a.value();
	double s = 0.0;
	for (double v : av.data())
		s += v;
	return a.graph().record(Tensor::scalar(s), {a}, [a](Graph& g, std::span<const double> go) {
		for (double& d : g.grad_sink(a.id()))
			d += go[0];
	});
}

/// Σ w_i a_i against a constant weight tensor of the same shape.
inline Var weighted_sum(Var a, Tensor weights) {
	const Tensor& av = a.value();
	detail::require_same(av, weights, "weighted_sum");
	double s = 0.0;
	for (std::size_t i = 0; i < av.size(); ++i)
		s += weights[i] * av[i];
	return a.graph().record(Tensor::scalar(s), {a},
			[a, w = std::move(weights)](Graph& g, std::span<const double> go) {
				detail::axpy(g.grad_sink(a.id()), w.data(), go[0]);
			});
}

inline Var reshape(Var a, Shape shape) {
	Tensor out = a.value().reshaped(std::move(shape));
	return a.graph().record(std::move(out), {a}, [a](Graph& g, std::span<const double> go) {
		detail::axpy(g.grad_sink(a.id()), go);
	});
}

/// Standard matrix product of [m x k] and [k x n].
inline Var matmul(Var a, Var b) {
	const Tensor& av = a.value();
	const Tensor& bv = b.value();
	detail::require_rank(av, 2, "matmul");
	detail::require_rank(bv, 2, "matmul");
	const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
	if (bv.dim(0) != k)
		throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " +
				shape_str(bv.shape()));
	Tensor out(Shape{m, n});
	for (std::size_t i = 0; i < m; ++i)
		for (std::size_t p = 0; p < k; ++p) {
			const double aip = av[i * k + p];
			for (std::size_t j = 0; j < n; ++j)
				out[i * n + j] += aip * bv[p * n + j];
		}
	return a.graph().record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, std::span<const double> go) {
		const Tensor& av = g.value(a.id());
		const Tensor& bv = g.value(b.id());
		if (auto da = g.grad_sink(a.id()); !da.empty())
			for (std::size_t i = 0; i < m; ++i)
				for (std::size_t p = 0; p < k; ++p) {
					double s = 0.0;
					for (std::size_t j = 0; j < n; ++j)
						s += go[i * n + j] * bv[p * n + j];
					da[i * k + p] += s;
				}
		if (auto db = g.grad_sink(b.id()); !db.empty())
			for (std::size_t i = 0; i < m; ++i)
				for (std::size_t p = 0; p < k; ++p) {
					const double aip = av[i * k + p];
					for (std::size_t j = 0; j < n; ++j)
						db[p * n + j] += aip * go[i * n + j];
				}
	});
}

inline Var transpose(Var a) {
	const Tensor& av = a.value();
	detail::require_rank(av, 2, "transpose");
	const std::size_t r = av.dim(0), c = av.dim(1);
	Tensor out(Shape{c, r});
	for (std::size_t i = 0; i < r; ++i)
		for (std::size_t j = 0; j < c; ++j)
			out[j * r + i] = av[i * c + j];
	return a.graph().record(std::move(out), {a}, [a, r, c](Graph& g, std::span<const double> go) {
		auto da = g.grad_sink(a.id());
		for (std::size_t i = 0; i < r; ++i)
			for (std::size_t j = 0; j < c; ++j)
				da[i * c + j] += go[j * r + i];
	});
}

/**
 * Fully-connected map y = x Wᵀ + b.
 *
 * x is [N x in], weight is [out x in] (one row per unit), bias is [out].
 */
inline Var linear(Var x, Var weight, Var bias) {
	const Tensor& xv = x.value();
	const Tensor& wv = weight.value();
	const Tensor& bv = bias.value();
	detail::require_rank(xv, 2, "linear");
	detail::require_rank(wv, 2, "linear");
	const std::size_t n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
	if (wv.dim(1) != in || bv.size() != out_dim)
		throw ShapeError("linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
				shape_str(wv.shape()) + " and bias " + shape_str(bv.shape()));
	Tensor out(Shape{n, out_dim});
	for (std::size_t i = 0; i < n; ++i) {
		const double* xi = &xv.data()[i * in];
		for (std::size_t o = 0; o < out_dim; ++o) {
			const double* wo = &wv.data()[o * in];
			double s = bv[o];
			for (std::size_t p = 0; p < in; ++p)
				s += wo[p] * xi[p];
			out[i * out_dim + o] = s;
		}
	}
	return x.graph().record(std::move(out), {x, weight, bias},
			[x, weight, bias, n, in, out_dim](Graph& g, std::span<const double> go) {
				const Tensor& xv = g.value(x.id());
				const Tensor& wv = g.value(weight.id());
				if (auto dx = g.grad_sink(x.id()); !dx.empty())
					for (std::size_t i = 0; i < n; ++i)
						for (std::size_t o = 0; o < out_dim; ++o) {
							const double gio = go[i * out_dim + o];
							if (gio == 0.0)
								continue;
							for (std::size_t p = 0; p < in; ++p)
								dx[i * in + p] += gio * wv[o * in + p];
						}
				if (auto dw = g.grad_sink(weight.id()); !dw.empty())
					for (std::size_t i = 0; i < n; ++i)
						for (std::size_t o = 0; o < out_dim; ++o) {
							const double gio = go[i * out_dim + o];
							if (gio == 0.0)
								continue;
							for (std::size_t p = 0; p < in; ++p)
								dw[o * in + p] += gio * xv[i * in + p];
						}
				if (auto db = g.grad_sink(bias.id()); !db.empty())
					for (std::size_t i = 0; i < n; ++i)
						for (std::size_t o = 0; o < out_dim; ++o)
							db[o] += go[i * out_dim + o];
			});
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Var relu(Var x) {
	Tensor out = x.value();
	for (double& v : out.data())
		v = v > 0.0 ? v : 0.0;
	return x.graph().record(std::move(out), {x}, [x](Graph& g, std::span<const double> go) {
		const Tensor& xv = g.value(x.id());
		auto dx = g.grad_sink(x.id());
		for (std::size_t i = 0; i < dx.size(); ++i)
			if (xv[i] > 0.0)
				dx[i] += go[i];
	});
}

inline Var abs(Var x) {
	Tensor out = x.value();
	for (double& v : out.data())
		v = std::fabs(v);
	return x.graph().record(std::move(out), {x}, [x](Graph& g, std::span<const double> go) {
		const Tensor& xv = g.value(x.id());
		auto dx = g.grad_sink(x.id());
		for (std::size_t i = 0; i < dx.size(); ++i)
			dx[i] += xv[i] > 0.0 ? go[i] : (xv[i] < 0.0 ? -go[i] : 0.0);
	});
}

/// Σ|x_i|, gradient sign(x) with sign(0) = 0.
inline Var l1_sum(Var x) { return sum(abs(x)); }

/**
 * 3x3 cross-correlation, stride 1, zero padding 1.
 *
 * x is [N x C_in x H x W], kernel is [C_out x C_in x 3 x 3], bias is [C_out].
 * The output keeps the spatial size of the input.
 */
inline Var conv2d(Var x, Var kernel, Var bias) {
	const Tensor& xv = x.value();
	const Tensor& kv = kernel.value();
	const Tensor& bv = bias.value();
	detail::require_rank(xv, 4, "conv2d");
	detail::require_rank(kv, 4, "conv2d");
	if (kv.dim(2) != 3 || kv.dim(3) != 3)
		throw ShapeError("conv2d: kernel must be 3x3, got " + shape_str(kv.shape()));
	const std::size_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
	const std::size_t cout = kv.dim(0);
	if (kv.dim(1) != cin)
		throw ShapeError("conv2d: channel mismatch, input " + shape_str(xv.shape()) + " vs kernel " +
				shape_str(kv.shape()));
	if (bv.size() != cout)
		throw ShapeError("conv2d: bias " + shape_str(bv.shape()) + " does not match kernel " +
				shape_str(kv.shape()));

	const std::size_t hw = h * w;
	Tensor out(Shape{n, cout, h, w});
	for (std::size_t b = 0; b < n; ++b)
		for (std::size_t o = 0; o < cout; ++o) {
			double* dst = &out.data()[(b * cout + o) * hw];
			std::fill(dst, dst + hw, bv[o]);
			for (std::size_t c = 0; c < cin; ++c) {
				const double* src = &xv.data()[(b * cin + c) * hw];
				const double* k = &kv.data()[(o * cin + c) * 9];
				for (std::size_t dy = 0; dy < 3; ++dy)
					for (std::size_t dx = 0; dx < 3; ++dx) {
						const double kk = k[dy * 3 + dx];
						// Output rows/cols whose tap (r + dy - 1, q + dx - 1) stays inside the image.
						const std::size_t r0 = dy == 0 ? 1 : 0, r1 = dy == 2 ? h - 1 : h;
						const std::size_t q0 = dx == 0 ? 1 : 0, q1 = dx == 2 ? w - 1 : w;
						// Unsigned wrap-around makes the shift a negative offset when dy or dx is 0.
						const std::size_t shift = (dy * w + dx) - (w + 1);
						for (std::size_t r = r0; r < r1; ++r) {
							double* drow = dst + r * w;
							for (std::size_t q = q0; q < q1; ++q)
								drow[q] += kk * src[r * w + q + shift];
						}
					}
			}
		}

	return x.graph().record(std::move(out), {x, kernel, bias},
			[x, kernel, bias, n, cin, cout, h, w](Graph& g, std::span<const double> go) {
				const std::size_t hw = h * w;
				const Tensor& xv = g.value(x.id());
				const Tensor& kv = g.value(kernel.id());
				auto dxs = g.grad_sink(x.id());
				auto dks = g.grad_sink(kernel.id());
				auto dbs = g.grad_sink(bias.id());
				for (std::size_t b = 0; b < n; ++b)
					for (std::size_t o = 0; o < cout; ++o) {
						const double* gsrc = &go[(b * cout + o) * hw];
						if (!dbs.empty())
							for (std::size_t i = 0; i < hw; ++i)
								dbs[o] += gsrc[i];
						for (std::size_t c = 0; c < cin; ++c) {
							const std::size_t xoff = (b * cin + c) * hw;
							const std::size_t koff = (o * cin + c) * 9;
							for (std::size_t dy = 0; dy < 3; ++dy)
								for (std::size_t dx = 0; dx < 3; ++dx) {
									const std::size_t r0 = dy == 0 ? 1 : 0, r1 = dy == 2 ? h - 1 : h;
									const std::size_t q0 = dx == 0 ? 1 : 0, q1 = dx == 2 ? w - 1 : w;
									const std::size_t shift = (dy * w + dx) - (w + 1);
									double kacc = 0.0;
									const double kk = kv[koff + dy * 3 + dx];
									for (std::size_t r = r0; r < r1; ++r)
										for (std::size_t q = q0; q < q1; ++q) {
											const std::size_t oi = r * w + q;
											const std::size_t xi = xoff + oi + shift;
											kacc += gsrc[oi] * xv[xi];
											if (!dxs.empty())
												dxs[xi] += gsrc[oi] * kk;
										}
									if (!dks.empty())
										dks[koff + dy * 3 + dx] += kacc;
								}
						}
					}
			});
}

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped. Ties go to the first element.
inline Var maxpool2x2(Var x) {
	const Tensor& xv = x.value();
	detail::require_rank(xv, 4, "maxpool2x2");
	const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
	const std::size_t ho = h / 2, wo = w / 2;
	if (ho == 0 || wo == 0)
		throw ShapeError("maxpool2x2: input too small " + shape_str(xv.shape()));
	Tensor out(Shape{n, c, ho, wo});
	std::vector<std::size_t> argmax(out.size());
	for (std::size_t m = 0; m < n * c; ++m)
		for (std::size_t r = 0; r < ho; ++r)
			for (std::size_t q = 0; q < wo; ++q) {
				std::size_t best = m * h * w + (2 * r) * w + 2 * q;
				for (std::size_t dy = 0; dy < 2; ++dy)
					for (std::size_t dx = 0; dx < 2; ++dx) {
						const std::size_t i = m * h * w + (2 * r + dy) * w + 2 * q + dx;
						if (xv[i] > xv[best])
							best = i;
					}
				const std::size_t oi = (m * ho + r) * wo + q;
				out[oi] = xv[best];
				argmax[oi] = best;
			}
	return x.graph().record(std::move(out), {x},
			[x, argmax = std::move(argmax)](Graph& g, std::span<const double> go) {
				auto dx = g.grad_sink(x.id());
				for (std::size_t i = 0; i < argmax.size(); ++i)
					dx[argmax[i]] += go[i];
			});
}

/// Mean over the trailing spatial dims: [N x T x H x W] -> [N x T].
inline Var spatial_mean(Var u) {
	const Tensor& uv = u.value();
	detail::require_rank(uv, 4, "spatial_mean");
	const std::size_t n = uv.dim(0), t = uv.dim(1), hw = uv.dim(2) * uv.dim(3);
	if (hw == 0)
		throw ShapeError("spatial_mean: empty spatial extent " + shape_str(uv.shape()));
	const double inv = 1.0 / static_cast<double>(hw);
	Tensor out(Shape{n, t});
	for (std::size_t m = 0; m < n * t; ++m) {
		double s = 0.0;
		for (std::size_t i = 0; i < hw; ++i)
			s += uv[m * hw + i];
		out[m] = s * inv;
	}
	return u.graph().record(std::move(out), {u}, [u, n, t, hw, inv](Graph& g, std::span<const double> go) {
		auto du = g.grad_sink(u.id());
		for (std::size_t m = 0; m < n * t; ++m)
			for (std::size_t i = 0; i < hw; ++i)
				du[m * hw + i] += go[m] * inv;
	});
}

/// (a·b) / (max(‖a‖, ε) · max(‖b‖, ε)) for two equal-length vectors.
inline Var cosine_sim(Var a, Var b) {
	const Tensor& av = a.value();
	const Tensor& bv = b.value();
	if (av.size() != bv.size())
		throw ShapeError("cosine_sim: length mismatch " + shape_str(av.shape()) + " vs " +
				shape_str(bv.shape()));
	double dot = 0.0, aa = 0.0, bb = 0.0;
	for (std::size_t i = 0; i < av.size(); ++i) {
		dot += av[i] * bv[i];
		aa += av[i] * av[i];
		bb += bv[i] * bv[i];
	}
	const double an = std::sqrt(aa), bn = std::sqrt(bb);
	const double na = std::max(an, kCosineEps), nb = std::max(bn, kCosineEps);
	const double cs = dot / (na * nb);
	return a.graph().record(Tensor::scalar(cs), {a, b},
			[a, b, na, nb, cs, a_live = an > kCosineEps, b_live = bn > kCosineEps](
					Graph& g, std::span<const double> go) {
				const Tensor& av = g.value(a.id());
				const Tensor& bv = g.value(b.id());
				if (auto da = g.grad_sink(a.id()); !da.empty())
					for (std::size_t i = 0; i < da.size(); ++i)
						da[i] += go[0] * (bv[i] / (na * nb) - (a_live ? cs * av[i] / (na * na) : 0.0));
				if (auto db = g.grad_sink(b.id()); !db.empty())
					for (std::size_t i = 0; i < db.size(); ++i)
						db[i] += go[0] * (av[i] / (na * nb) - (b_live ? cs * bv[i] / (nb * nb) : 0.0));
			});
}

/// Divides every row of an [N x d] matrix by max(‖row‖₂, ε).
inline Var normalize_rows(Var y) {
	const Tensor& yv = y.value();
	detail::require_rank(yv, 2, "normalize_rows");
	const std::size_t n = yv.dim(0), d = yv.dim(1);
	Tensor out(yv.shape());
	std::vector<double> norms(n);
	for (std::size_t i = 0; i < n; ++i) {
		double ss = 0.0;
		for (std::size_t j = 0; j < d; ++j)
			ss += yv[i * d + j] * yv[i * d + j];
		norms[i] = std::sqrt(ss);
		const double den = std::max(norms[i], kCosineEps);
		for (std::size_t j = 0; j < d; ++j)
			out[i * d + j] = yv[i * d + j] / den;
	}
	Tensor unit = out;
	return y.graph().record(std::move(out), {y},
			[y, n, d, norms = std::move(norms), unit = std::move(unit)](Graph& g, std::span<const double> go) {
				auto dy = g.grad_sink(y.id());
				for (std::size_t i = 0; i < n; ++i) {
					if (norms[i] > kCosineEps) {
						double ug = 0.0;
						for (std::size_t j = 0; j < d; ++j)
							ug += unit[i * d + j] * go[i * d + j];
						for (std::size_t j = 0; j < d; ++j)
							dy[i * d + j] += (go[i * d + j] - unit[i * d + j] * ug) / norms[i];
					} else {
						for (std::size_t j = 0; j < d; ++j)
							dy[i * d + j] += go[i * d + j] / kCosineEps;
					}
				}
			});
}

/// [N x d] -> [N x N] matrix of row cosine similarities.
inline Var pairwise_cosine(Var y) {
	Var u = normalize_rows(y);
	return matmul(u, transpose(u));
}

/**
 * Mean negative log-softmax of the labelled logit, with log-sum-exp stabilisation.
 * Gradient is (softmax - onehot) / N.
 */
inline Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
	const Tensor& lv = logits.value();
	detail::require_rank(lv, 2, "softmax_cross_entropy");
	const std::size_t n = lv.dim(0), k = lv.dim(1);
	if (labels.size() != n)
		throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
				" labels for logits " + shape_str(lv.shape()));
	if (n == 0)
		throw ShapeError("softmax_cross_entropy: empty batch");
	std::vector<double> probs(n * k);
	double loss = 0.0;
	for (std::size_t i = 0; i < n; ++i) {
		if (labels[i] >= k)
			throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) +
					" out of range for " + std::to_string(k) + " classes");
		const double* row = &lv.data()[i * k];
		const std::size_t jmax = static_cast<std::size_t>(std::max_element(row, row + k) - row);
		const double mx = row[jmax];
		// log-sum-exp as mx + log1p(rest) keeps tiny losses of confident rows exact.
		double rest = 0.0;
		for (std::size_t j = 0; j < k; ++j)
			if (j != jmax)
				rest += std::exp(row[j] - mx);
		const double lse = mx + std::log1p(rest);
		loss += (mx - row[labels[i]]) + std::log1p(rest);
		for (std::size_t j = 0; j < k; ++j)
			probs[i * k + j] = std::exp(row[j] - lse);
	}
	loss /= static_cast<double>(n);
	std::vector<std::size_t> lab(labels.begin(), labels.end());
	return logits.graph().record(Tensor::scalar(loss), {logits},
			[logits, n, k, probs = std::move(probs), lab = std::move(lab)](Graph& g, std::span<const double> go) {
				auto dl = g.grad_sink(logits.id());
				const double s = go[0] / static_cast<double>(n);
				for (std::size_t i = 0; i < n; ++i)
					for (std::size_t j = 0; j < k; ++j)
						dl[i * k + j] += s * (probs[i * k + j] - (j == lab[i] ? 1.0 : 0.0));
			});
}

} // namespace moda::ops

#endif // MODA_OPS_HPP
