#ifndef MODA_SWEEP_HPP
#define MODA_SWEEP_HPP

#include <algorithm>
#include <cstdint>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>
#include <vector>

#include "moda/composer.hpp"
#include "moda/dataset.hpp"
#include "moda/decomposer.hpp"
#include "moda/rng.hpp"
#include "moda/trainer.hpp"

namespace moda {

/// n choose k, saturating at the largest size_t.
inline std::size_t binomial(std::size_t n, std::size_t k) {
	if (k > n)
		return 0;
	k = std::min(k, n - k);
	std::size_t r = 1;
	for (std::size_t i = 1; i <= k; ++i) {
		const std::size_t num = n - k + i;
		if (r > std::numeric_limits<std::size_t>::max() / num)
			return std::numeric_limits<std::size_t>::max();
		r = r * num / i; // exact: r·num is divisible by i at every step
	}
	return r;
}

namespace detail {

inline void all_subsets(std::size_t n, std::size_t k, std::vector<IndexList>& out) {
	IndexList cur(k);
	for (std::size_t i = 0; i < k; ++i)
		cur[i] = static_cast<std::uint32_t>(i);
	while (true) {
		out.push_back(cur);
		std::size_t i = k;
		while (i > 0 && cur[i - 1] == n - k + i - 1)
			--i;
		if (i == 0)
			return;
		++cur[i - 1];
		for (std::size_t j = i; j < k; ++j)
			cur[j] = cur[j - 1] + 1;
	}
}

} // namespace detail

/**
 * Class subsets of size k_min..k_max, grouped by k and lexicographic within each k.
 *
 * When n choose k exceeds max_per_k, max_per_k distinct subsets are drawn from the
 * subtask stream (one stream per k) instead of enumerating all of them.
 */
inline std::vector<IndexList> enumerate_subtasks(std::size_t n, std::size_t k_min, std::size_t k_max,
		std::size_t max_per_k, std::uint64_t seed) {
	if (k_min < 1 || k_min > k_max || k_max > n)
		throw std::invalid_argument("subtasks: need 1 <= k_min <= k_max <= n, got k in [" + std::to_string(k_min) +
				", " + std::to_string(k_max) + "] for n = " + std::to_string(n));
	if (max_per_k == 0)
		throw std::invalid_argument("subtasks: max_per_k must be >= 1");
	std::vector<IndexList> out;
	for (std::size_t k = k_min; k <= k_max; ++k) {
		if (binomial(n, k) <= max_per_k) {
			detail::all_subsets(n, k, out);
			continue;
		}
		CounterRng rng(seed, streams::kSubtasks + k);
		std::set<IndexList> picked;
		std::vector<std::uint32_t> pool(n);
		while (picked.size() < max_per_k) {
			for (std::size_t i = 0; i < n; ++i)
				pool[i] = static_cast<std::uint32_t>(i);
			for (std::size_t i = 0; i < k; ++i)
				std::swap(pool[i], pool[i + rng.below(n - i)]);
			IndexList s(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
			std::sort(s.begin(), s.end());
			picked.insert(std::move(s));
		}
		out.insert(out.end(), picked.begin(), picked.end());
	}
	return out;
}

/// Samples whose label is one of classes, labels unchanged.
inline Dataset samples_of(const Dataset& d, const IndexList& classes) {
	std::vector<std::size_t> idx;
	for (std::size_t i = 0; i < d.size(); ++i)
		if (std::find(classes.begin(), classes.end(), d.labels[i]) != classes.end())
			idx.push_back(i);
	return d.subset(idx);
}

struct SweepRow {
	std::size_t subtask = 0;
	MetricsReport report;
	/// Source model on the same test samples, argmax over all of its classes.
	double full_accuracy = 0.0;
};

/// Composes the modules of every subset and measures it on the matching test samples.
inline std::vector<SweepRow> run_sweep(const std::vector<ModuleSpec>& modules, const Model& source, const Dataset& test,
		const std::vector<IndexList>& subtasks) {
	const Evaluation full = evaluate(source, test);
	std::vector<SweepRow> rows;
	for (std::size_t s = 0; s < subtasks.size(); ++s) {
		std::vector<ModuleSpec> chosen;
		for (std::uint32_t c : subtasks[s]) {
			const auto it = std::find_if(modules.begin(), modules.end(),
					[c](const ModuleSpec& m) { return m.class_id == c; });
			if (it == modules.end())
				throw std::invalid_argument("sweep: no module for class " + std::to_string(c));
			chosen.push_back(*it);
		}
		const Dataset sub = samples_of(test, subtasks[s]);
		SweepRow row;
		row.subtask = s;
		row.report = module_metrics(chosen, source, &sub);
		std::size_t hits = 0;
		for (std::size_t i = 0; i < test.size(); ++i)
			if (std::find(subtasks[s].begin(), subtasks[s].end(), test.labels[i]) != subtasks[s].end())
				hits += full.predictions[i] == test.labels[i] ? 1 : 0;
		row.full_accuracy = sub.size() ? static_cast<double>(hits) / static_cast<double>(sub.size())
		                               : std::numeric_limits<double>::quiet_NaN();
		rows.push_back(std::move(row));
	}
	return rows;
}

/// Header, one row per subtask in id order, then a `mean` row averaging every numeric column.
inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
	write_metrics_csv_header(os);
	for (const auto& r : rows)
		write_metrics_csv_row(os, r.subtask, r.report, r.full_accuracy);
	if (rows.empty())
		return;
	double v[8] = {};
	for (const auto& r : rows) {
		const MetricsReport& m = r.report;
		const double cols[8] = {static_cast<double>(m.classes.size()), m.mean_module_size, m.mean_overlap,
				m.composed_size, m.composed_weight_union, m.composed_flops, m.reuse_accuracy, r.full_accuracy};
		for (int i = 0; i < 8; ++i)
			v[i] += cols[i];
	}
	const auto prec = os.precision(17);
	os << "mean,,";
	for (int i = 0; i < 8; ++i)
		os << v[i] / static_cast<double>(rows.size()) << (i == 7 ? '\n' : ',');
	os.precision(prec);
}

} // namespace moda

#endif // MODA_SWEEP_HPP
