#ifndef MODA_PIPELINE_HPP
#define MODA_PIPELINE_HPP

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "moda/config.hpp"
#include "moda/dataset.hpp"
#include "moda/decomposer.hpp"
#include "moda/replacement.hpp"
#include "moda/trainer.hpp"

namespace moda {

/// Train and test splits described by the data section.
inline DataSplit load_data(const DataConfig& c) {
	if (c.source == "blobs")
		return make_blobs(c.blobs);
	if (c.source != "idx")
		throw ConfigError("data.source must be 'blobs' or 'idx', got '" + c.source + "'");
	for (const auto* p : {&c.train_images, &c.train_labels, &c.test_images, &c.test_labels}) {
		if (p->empty())
			throw ConfigError("data.source = idx needs data.train_images, data.train_labels, data.test_images and "
			                  "data.test_labels");
		if (!std::filesystem::exists(*p))
			throw FormatError(*p + ": no such file");
	}
	DataSplit d;
	d.train = read_idx(c.train_images, c.train_labels, 0, c.train_limit);
	d.test = read_idx(c.test_images, c.test_labels, d.train.classes, c.test_limit);
	return d;
}

/// Trains the configured model on the training split, evaluating on the test split.
inline TrainResult train_from_config(const ExperimentConfig& c, const DataSplit& d) {
	Model m = Model::build(model_spec_for(c.layers, d.train, c.model_seed));
	return train(std::move(m), d.train, c.train, &d.test);
}

struct ReplacementRun {
	ReplacementSplits splits;
	Model strong;
	Model weak;
	ReplacementAssembly assembly;
	GradientAudit audit;
	ReplacementOutcome outcome;
};

inline std::size_t position_of(const std::vector<std::size_t>& v, std::size_t c) {
	const auto it = std::find(v.begin(), v.end(), c);
	if (it == v.end())
		throw std::invalid_argument("class " + std::to_string(c) + " not in list");
	return static_cast<std::size_t>(it - v.begin());
}

/**
 * Strong model on the strong classes (trained as configured), weak model on the weak
 * overfit split (cross-entropy only), the strong model's target module spliced into
 * the weak outputs, then adaptation on the weak overfit split and evaluation on the
 * weak test split.
 */
inline ReplacementRun run_replacement(const ExperimentConfig& c, const DataSplit& data) {
	const ReplaceConfig& rc = c.replace;
	ReplacementRun run;
	run.splits = split_for_replacement(data, rc.plan);
	const ReplacementSplits& sp = run.splits;

	run.strong = train(Model::build(model_spec_for(rc.strong_layers, sp.strong_train, rc.strong_seed)), sp.strong_train,
			c.train)
	                     .model;
	const FrequencyTable freq = compute_frequencies(run.strong, sp.strong_train);
	ModuleSpec module = extract_module(run.strong, freq, position_of(rc.plan.strong_classes, rc.plan.target), c.tau);

	TrainConfig wc = c.train;
	wc.epochs = rc.weak_epochs;
	wc.batch_size = rc.weak_batch_size;
	wc.modular = false;
	run.weak = train(Model::build(model_spec_for(rc.weak_layers, sp.weak_overfit_train, rc.weak_seed)),
			sp.weak_overfit_train, wc)
	                   .model;

	run.assembly = make_assembly(run.weak, std::move(module), position_of(rc.plan.weak_classes, rc.plan.target));
	run.audit = audit_gradient_isolation(run.assembly, sp.weak_overfit_train);
	auto log = train_adaptation(run.assembly, sp.weak_overfit_train, rc.adapt);
	run.outcome = evaluate_replacement(run.assembly, sp.weak_test);
	run.outcome.log = std::move(log);
	return run;
}

} // namespace moda

#endif // MODA_PIPELINE_HPP
