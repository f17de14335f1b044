#ifndef MODA_TRAINER_HPP
#define MODA_TRAINER_HPP

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "moda/autograd.hpp"
#include "moda/dataset.hpp"
#include "moda/network.hpp"
#include "moda/objectives.hpp"
#include "moda/rng.hpp"

namespace moda {

struct TrainConfig {
	std::size_t epochs = 200;
	std::size_t batch_size = 128;
	double learning_rate = 0.05;
	double momentum = 0.9;
	LossWeights weights;
	std::uint64_t seed = 0;
	bool shuffle = true;
	/// Epochs between test evaluations; 0 disables evaluation.
	std::size_t eval_every = 1;
	/// false trains on cross-entropy alone and skips the modular terms (logged as NaN).
	bool modular = true;

	void validate() const {
		if (epochs < 1)
			throw std::invalid_argument("train: epochs must be >= 1");
		if (batch_size < 1)
			throw std::invalid_argument("train: batch size must be >= 1");
		if (!(learning_rate > 0.0))
			throw std::invalid_argument("train: learning rate must be > 0");
		if (!(momentum >= 0.0 && momentum < 1.0))
			throw std::invalid_argument("train: momentum must be in [0, 1)");
		weights.validate();
	}
};

struct EpochRecord {
	std::size_t epoch = 0;
	double ce = 0.0, affinity = 0.0, dispersion = 0.0, compactness = 0.0, total = 0.0;
	/// NaN when the epoch was not evaluated.
	double test_accuracy = std::numeric_limits<double>::quiet_NaN();
	double seconds = 0.0;
	std::size_t degenerate_batches = 0;
};

struct TrainLog {
	std::vector<EpochRecord> epochs;

	/// CSV with header epoch,ce,aff,dis,com,total,test_acc,seconds.
	void write_csv(std::ostream& os) const {
		os << "epoch,ce,aff,dis,com,total,test_acc,seconds\n";
		os.precision(17);
		for (const auto& e : epochs) {
			os << e.epoch << ',' << e.ce << ',' << e.affinity << ',' << e.dispersion << ',' << e.compactness << ','
			   << e.total << ',';
			if (!std::isnan(e.test_accuracy))
				os << e.test_accuracy;
			os << ',' << e.seconds << '\n';
		}
	}
};

/**
 * One Nesterov step in look-ahead form:
 *   v <- mu·v - lr·g
 *   w <- w + mu·v - lr·g
 */
inline void sgd_nesterov_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
		double lr, double mu) {
	if (params.size() != grads.size() || params.size() != velocity.size())
		throw ShapeError("sgd_nesterov_step: sizes differ (params " + std::to_string(params.size()) + ", grads " +
				std::to_string(grads.size()) + ", velocity " + std::to_string(velocity.size()) + ")");
	for (std::size_t i = 0; i < params.size(); ++i) {
		const double step = lr * grads[i];
		velocity[i] = mu * velocity[i] - step;
		params[i] += mu * velocity[i] - step;
	}
}

/// Velocity buffers for every parameter tensor of one model.
class NesterovSgd {
public:
	NesterovSgd(const Model& m, double lr, double mu) : lr_(lr), mu_(mu) {
		for (const Tensor* t : m.parameters())
			velocity_.emplace_back(t->size(), 0.0);
	}

	void step(Model& m) {
		auto params = m.parameters();
		if (params.size() != velocity_.size())
			throw ShapeError("optimizer bound to a model with a different parameter count");
		for (std::size_t i = 0; i < params.size(); ++i)
			sgd_nesterov_step(params[i]->data(), params[i]->grad(), velocity_[i], lr_, mu_);
	}

private:
	double lr_, mu_;
	std::vector<std::vector<double>> velocity_;
};

struct Evaluation {
	double accuracy = 0.0;
	std::vector<double> per_class_accuracy; // NaN for classes absent from the data
	std::vector<std::size_t> per_class_count;
	std::vector<std::size_t> predictions;
};

inline void check_normalization(const Model& m, const Dataset& d) {
	if (!(m.normalization() == d.normalization))
		throw std::invalid_argument("dataset '" + d.name + "' normalisation differs from the model's training data");
}

/// Top-1 accuracy by argmax over logits (ties go to the lowest class index).
inline Evaluation evaluate(const Model& m, const Dataset& d) {
	check_normalization(m, d);
	Evaluation ev;
	ev.per_class_count.assign(m.classes(), 0);
	std::vector<std::size_t> hits(m.classes(), 0);
	if (d.size() == 0) {
		ev.per_class_accuracy.assign(m.classes(), std::numeric_limits<double>::quiet_NaN());
		return ev;
	}
	const Tensor logits = predict_logits_chunked(m, d.inputs);
	std::size_t correct = 0;
	for (std::size_t i = 0; i < d.size(); ++i) {
		const std::size_t p = argmax_row(logits, i);
		ev.predictions.push_back(p);
		++ev.per_class_count.at(d.labels[i]);
		if (p == d.labels[i]) {
			++correct;
			++hits[p];
		}
	}
	ev.accuracy = static_cast<double>(correct) / static_cast<double>(d.size());
	for (std::size_t c = 0; c < m.classes(); ++c)
		ev.per_class_accuracy.push_back(ev.per_class_count[c]
				? static_cast<double>(hits[c]) / static_cast<double>(ev.per_class_count[c])
				: std::numeric_limits<double>::quiet_NaN());
	return ev;
}

struct TrainResult {
	Model model;
	TrainLog log;
};

/**
 * Mini-batch training on the unified loss with Nesterov SGD.
 *
 * Each epoch visits a permutation of the training set drawn from (seed, epoch); the
 * trailing partial batch is kept. The run is fully determined by (model, data, cfg).
 */
inline TrainResult train(Model model, const Dataset& data, const TrainConfig& cfg, const Dataset* test = nullptr) {
	cfg.validate();
	if (data.size() == 0)
		throw std::invalid_argument("train: empty dataset");
	data.validate();
	if (data.classes != model.classes())
		throw std::invalid_argument("train: dataset has " + std::to_string(data.classes) + " classes, model " +
				std::to_string(model.classes()));
	model.set_normalization(data.normalization);

	NesterovSgd opt(model, cfg.learning_rate, cfg.momentum);
	TrainLog log;
	const std::size_t n = data.size();
	std::vector<std::size_t> order(n);
	std::iota(order.begin(), order.end(), std::size_t{0});
	for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
		const auto t0 = std::chrono::steady_clock::now();
		if (cfg.shuffle)
			order = permutation(n, cfg.seed, streams::kShuffle + epoch);
		EpochRecord rec;
		rec.epoch = epoch + 1;
		std::size_t steps = 0;
		for (std::size_t start = 0; start < n; start += cfg.batch_size) {
			const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
			const Tensor xb = gather_rows(data.inputs, idx);
			std::vector<std::size_t> yb;
			yb.reserve(idx.size());
			for (std::size_t i : idx)
				yb.push_back(data.labels[i]);

			model.zero_grad();
			Graph g;
			ForwardResult fr = forward_record(g, model, xb, yb);
			if (cfg.modular) {
				UnifiedLoss loss = unified_loss(fr.logits, yb, fr.acts, cfg.weights);
				g.backward(loss.total);
				const LossBreakdown& p = loss.parts;
				rec.ce += p.ce;
				rec.affinity += p.affinity;
				rec.dispersion += p.dispersion;
				rec.compactness += p.compactness;
				rec.total += p.total;
				rec.degenerate_batches += (p.affinity_degenerate || p.dispersion_degenerate) ? 1 : 0;
			} else {
				Var ce = ops::softmax_cross_entropy(fr.logits, yb);
				g.backward(ce);
				rec.ce += ce.value().item();
				rec.total += ce.value().item();
			}
			opt.step(model);
			++steps;
		}
		const double inv = 1.0 / static_cast<double>(steps);
		rec.ce *= inv;
		rec.total *= inv;
		if (cfg.modular) {
			rec.affinity *= inv;
			rec.dispersion *= inv;
			rec.compactness *= inv;
		} else {
			rec.affinity = rec.dispersion = rec.compactness = std::numeric_limits<double>::quiet_NaN();
		}
		if (test && cfg.eval_every && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs))
			rec.test_accuracy = evaluate(model, *test).accuracy;
		rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
		log.epochs.push_back(rec);
	}
	model.drop_grad();
	return {std::move(model), std::move(log)};
}

} // namespace moda

#endif // MODA_TRAINER_HPP
