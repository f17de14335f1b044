#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moda/moda.hpp"
#include "moda/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kMetricFailure = 1;
constexpr int kUsage = 2;

struct Overrides {
	std::string config_path;
	std::vector<std::string> sets;
	std::string out;
	// Command flags, each sugar for one config key.
	std::vector<std::pair<std::string, std::string>> flags;
};

void write_text(const fs::path& p, const std::string& s) {
	std::ofstream out(p, std::ios::binary | std::ios::trunc);
	if (!out || !(out << s))
		throw moda::FormatError(p.string() + ": cannot write");
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

/// Config file, then MODA_SEED, then --set, then command flags; writes the resolved copy.
moda::ExperimentConfig resolve(const Overrides& o, fs::path& out_dir) {
	moda::ExperimentConfig c = o.config_path.empty() ? moda::ExperimentConfig{} : moda::load_config(o.config_path);
	moda::apply_seed_env(c);
	for (const auto& s : o.sets)
		moda::apply_override(c, s);
	for (const auto& [k, v] : o.flags)
		moda::set_config_value(c, k, v);
	if (!o.out.empty())
		c.output_dir = o.out;
	out_dir = c.output_dir;
	fs::create_directories(out_dir);
	write_text(out_dir / "resolved.cfg", moda::resolved_config(c));
	return c;
}

moda::Model load_source(const moda::ExperimentConfig& c) {
	if (c.input.checkpoint.empty())
		throw moda::ConfigError("no checkpoint given (--checkpoint or input.checkpoint)");
	return moda::load_checkpoint(c.input.checkpoint);
}

fs::path module_path(const fs::path& dir, std::size_t c) { return dir / ("module_" + std::to_string(c) + ".moda"); }

void check_unique(const std::vector<std::size_t>& classes) {
	if (std::set<std::size_t>(classes.begin(), classes.end()).size() != classes.size())
		throw moda::ConfigError("duplicate class in input.classes");
}

/// Modules from input.modules_dir (the listed classes, or every class of the source).
std::vector<moda::ModuleSpec> load_modules(const moda::ExperimentConfig& c, const moda::Model& source) {
	if (c.input.modules_dir.empty())
		throw moda::ConfigError("no module directory given (--modules-dir or input.modules_dir)");
	std::vector<std::size_t> classes = c.input.classes;
	if (classes.empty())
		for (std::size_t k = 0; k < source.classes(); ++k)
			classes.push_back(k);
	check_unique(classes);
	std::vector<moda::ModuleSpec> mods;
	for (std::size_t k : classes) {
		mods.push_back(moda::load_module(module_path(c.input.modules_dir, k)));
		if (!moda::module_matches(mods.back(), source))
			throw moda::FormatError(module_path(c.input.modules_dir, k).string() +
					": module was not decomposed from this checkpoint");
	}
	return mods;
}

json evaluation_json(const moda::Evaluation& ev) {
	json j;
	j["accuracy"] = ev.accuracy;
	json pc = json::array();
	for (double a : ev.per_class_accuracy)
		pc.push_back(std::isnan(a) ? json(nullptr) : json(a));
	j["per_class_accuracy"] = pc;
	return j;
}

int cmd_train(const moda::ExperimentConfig& c, const fs::path& out) {
	const moda::DataSplit data = moda::load_data(c.data);
	const moda::TrainResult r = moda::train_from_config(c, data);
	moda::save_checkpoint(r.model, out / "model.moda");
	std::ostringstream log;
	r.log.write_csv(log);
	write_text(out / "train_log.csv", log.str());
	json j = evaluation_json(moda::evaluate(r.model, data.test));
	j["digest"] = moda::detail::hex64(moda::model_digest(r.model));
	j["epochs"] = r.log.epochs.size();
	write_json(out / "train.json", j);
	std::cout << "trained " << c.train.epochs << " epochs, test accuracy " << j["accuracy"].get<double>()
	          << ", digest " << j["digest"].get<std::string>() << '\n';
	return kOk;
}

int cmd_decompose(const moda::ExperimentConfig& c, const fs::path& out) {
	const moda::Model source = load_source(c);
	const moda::DataSplit data = moda::load_data(c.data);
	moda::check_normalization(source, data.train);
	const moda::FrequencyTable freq = moda::compute_frequencies(source, data.train);
	const auto mods = moda::decompose_all(source, freq, c.tau);
	for (const auto& m : mods)
		moda::save_module(m, module_path(out, m.class_id));
	const moda::MetricsReport rep = moda::module_metrics(mods, source);
	json j;
	j["tau"] = c.tau;
	j["source_digest"] = moda::detail::hex64(moda::model_digest(source));
	j["mean_module_size"] = rep.mean_module_size;
	json list = json::array();
	for (std::size_t i = 0; i < mods.size(); ++i)
		list.push_back({{"class", mods[i].class_id}, {"module_size", rep.module_size[i]},
				{"retained_units", [&] {
					 std::vector<std::size_t> n;
					 for (const auto& r : mods[i].retained)
						 n.push_back(r.size());
					 return n;
				 }()},
				{"fallback_layers", mods[i].fallback_layers}});
	j["modules"] = list;
	write_json(out / "decompose.json", j);

	if (!c.tau_sweep.empty()) {
		std::ostringstream csv;
		csv.precision(17);
		csv << "tau,class,module_size\n";
		for (double t : c.tau_sweep) {
			const auto sizes = moda::module_metrics(moda::decompose_all(source, freq, t), source).module_size;
			double mean = 0.0;
			for (std::size_t k = 0; k < sizes.size(); ++k) {
				csv << moda::text::format_double(t) << ',' << k << ',' << sizes[k] << '\n';
				mean += sizes[k];
			}
			csv << moda::text::format_double(t) << ",mean," << mean / static_cast<double>(sizes.size()) << '\n';
		}
		write_text(out / "tau_sweep.csv", csv.str());
	}
	std::cout << mods.size() << " modules at tau " << c.tau << ", mean size " << rep.mean_module_size << '\n';
	return kOk;
}

int cmd_compose(const moda::ExperimentConfig& c, const fs::path& out) {
	const moda::Model source = load_source(c);
	if (c.input.classes.size() < 2 && !c.input.classes.empty())
		throw moda::ConfigError("compose needs at least two classes");
	const auto mods = load_modules(c, source);
	const moda::DataSplit data = moda::load_data(c.data);
	const moda::IndexList classes = moda::module_classes(mods);
	const moda::Dataset sub = moda::samples_of(data.test, classes);
	const moda::ComposedModel cm = moda::compose(mods, source);
	const double reuse = moda::reuse_accuracy(cm, sub);
	const double oracle = moda::masked_accuracy(source, moda::union_masks(mods, source), sub);
	json j = moda::to_json(moda::module_metrics(mods, source, &sub));
	j["oracle_accuracy"] = oracle;
	j["test_samples"] = sub.size();
	write_json(out / "compose.json", j);
	std::cout << "composed " << classes.size() << " classes: reuse accuracy " << reuse << ", masked oracle " << oracle
	          << '\n';
	if (reuse != oracle) {
		std::cerr << "error: composed model disagrees with the masked forward\n";
		return kMetricFailure;
	}
	return kOk;
}

int cmd_sweep(const moda::ExperimentConfig& c, const fs::path& out) {
	const moda::Model source = load_source(c);
	const moda::DataSplit data = moda::load_data(c.data);
	const auto mods = c.input.modules_dir.empty() ? moda::decompose_all(source, data.train, c.tau) : load_modules(c, source);
	const std::size_t n = source.classes();
	const std::size_t k_max = c.sweep.k_max ? c.sweep.k_max : n - 1;
	const auto subtasks = moda::enumerate_subtasks(n, c.sweep.k_min, k_max, c.sweep.max_per_k, c.sweep.seed);
	const auto rows = moda::run_sweep(mods, source, data.test, subtasks);
	std::ostringstream csv;
	moda::write_sweep_csv(csv, rows);
	write_text(out / "sweep.csv", csv.str());
	std::cout << rows.size() << " subtasks written to " << (out / "sweep.csv").string() << '\n';
	return kOk;
}

int cmd_replace(const moda::ExperimentConfig& c, const fs::path& out) {
	const moda::DataSplit data = moda::load_data(c.data);
	const moda::ReplacementRun run = moda::run_replacement(c, data);
	json j = moda::to_json(run.outcome);
	j["target_gain"] = run.outcome.post_target_accuracy - run.outcome.pre_target_accuracy;
	j["non_target_drop"] = run.outcome.pre_non_target_accuracy - run.outcome.post_non_target_accuracy;
	j["audit"] = {{"frozen_max_abs_grad", run.audit.frozen_max_abs_grad},
			{"adaptation_max_abs_grad", run.audit.adaptation_max_abs_grad},
			{"frozen_unchanged", run.audit.frozen_unchanged}, {"passed", run.audit.passed()}};
	j["strong_digest"] = moda::detail::hex64(moda::model_digest(run.strong));
	j["weak_digest"] = moda::detail::hex64(moda::model_digest(run.weak));
	write_json(out / "replace.json", j);
	std::cout << "target accuracy " << run.outcome.pre_target_accuracy << " -> " << run.outcome.post_target_accuracy
	          << ", non-target " << run.outcome.pre_non_target_accuracy << " -> "
	          << run.outcome.post_non_target_accuracy << ", audit " << (run.audit.passed() ? "passed" : "FAILED")
	          << '\n';
	return run.audit.passed() ? kOk : kMetricFailure;
}

int cmd_gradcheck(const moda::ExperimentConfig& c, const fs::path& out) {
	namespace gc = moda::gradcheck;
	const auto suite = gc::default_suite();
	gc::Options opt;
	opt.instances = c.gradcheck.instances;
	opt.seed = c.gradcheck.seed;
	if (!c.gradcheck.perturb.empty()) {
		if (std::none_of(suite.begin(), suite.end(), [&](const gc::OpCase& o) { return o.name == c.gradcheck.perturb; }))
			throw moda::ConfigError("gradcheck.perturb: unknown op '" + c.gradcheck.perturb + "'");
		opt.perturb = [name = c.gradcheck.perturb](std::string_view op, std::span<double> g) {
			if (op == name && !g.empty())
				g[0] += 1e-2;
		};
	}
	const gc::Report rep = gc::run(suite, opt);
	std::ostringstream table;
	gc::print_table(table, rep);
	write_text(out / "gradcheck.txt", table.str());
	std::cout << table.str();
	return rep.passed() ? kOk : kMetricFailure;
}

int cmd_eval(const moda::ExperimentConfig& c, const fs::path& out) {
	const moda::Model source = load_source(c);
	const moda::DataSplit data = moda::load_data(c.data);
	json j = evaluation_json(moda::evaluate(source, data.test));
	j["digest"] = moda::detail::hex64(moda::model_digest(source));
	write_json(out / "eval.json", j);
	std::cout << "test accuracy " << j["accuracy"].get<double>() << '\n';
	return kOk;
}

} // namespace

int main(int argc, char** argv) {
	CLI::App app{"Modular training, decomposition, composition and module replacement"};
	app.require_subcommand(1);
	app.fallthrough();
	Overrides o;
	app.add_option("-c,--config", o.config_path, "config file of section.key = value lines");
	app.add_option("--set", o.sets, "override one key, e.g. --set loss.gamma=0")->take_all();
	app.add_option("-o,--out", o.out, "output directory (output.dir)");

	using Fn = int (*)(const moda::ExperimentConfig&, const fs::path&);
	Fn selected = nullptr;
	auto verb = [&](const char* name, const char* help, Fn fn) {
		CLI::App* sub = app.add_subcommand(name, help);
		sub->callback([&selected, fn] { selected = fn; });
		return sub;
	};
	auto flag = [&](CLI::App* sub, const char* opt, const char* key, const char* help) {
		sub->add_option_function<std::string>(opt, [&o, key](const std::string& v) { o.flags.emplace_back(key, v); },
				help);
	};

	verb("train", "train a model; writes model.moda and train_log.csv", cmd_train);
	CLI::App* dec = verb("decompose", "split a checkpoint into per-class modules", cmd_decompose);
	flag(dec, "--checkpoint", "input.checkpoint", "source checkpoint");
	flag(dec, "--tau", "decompose.tau", "activation-frequency threshold (default 0.9)");
	flag(dec, "--tau-sweep", "decompose.tau_sweep", "comma-separated thresholds for tau_sweep.csv");
	CLI::App* comp = verb("compose", "compose modules and measure reuse accuracy", cmd_compose);
	flag(comp, "--checkpoint", "input.checkpoint", "source checkpoint");
	flag(comp, "--modules-dir", "input.modules_dir", "directory holding module_<class>.moda files");
	flag(comp, "--classes", "input.classes", "comma-separated classes to compose");
	CLI::App* sw = verb("sweep", "compose every k-class subtask and write sweep.csv", cmd_sweep);
	flag(sw, "--checkpoint", "input.checkpoint", "source checkpoint");
	flag(sw, "--modules-dir", "input.modules_dir", "modules to reuse instead of decomposing");
	verb("replace", "module replacement with an adaptation layer; writes replace.json", cmd_replace);
	CLI::App* gcmd = verb("gradcheck", "finite-difference check of every differentiable op", cmd_gradcheck);
	flag(gcmd, "--instances", "gradcheck.instances", "random instances per op");
	flag(gcmd, "--perturb", "gradcheck.perturb", "nudge one op's analytic gradient to exercise the harness");
	CLI::App* ev = verb("eval", "test accuracy of a checkpoint", cmd_eval);
	flag(ev, "--checkpoint", "input.checkpoint", "checkpoint to evaluate");

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError& e) {
		const int code = app.exit(e);
		return code == 0 ? kOk : kUsage;
	}

	try {
		fs::path out;
		const moda::ExperimentConfig cfg = resolve(o, out);
		return selected(cfg, out);
	} catch (const std::exception& e) {
		std::cerr << "error: " << e.what() << '\n';
		return kUsage;
	}
}
