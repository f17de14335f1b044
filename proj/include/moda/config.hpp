#ifndef MODA_CONFIG_HPP
#define MODA_CONFIG_HPP

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "moda/dataset.hpp"
#include "moda/network.hpp"
#include "moda/objectives.hpp"
#include "moda/replacement.hpp"
#include "moda/text.hpp"
#include "moda/trainer.hpp"

namespace moda {

/// Malformed config text, unknown key or bad value.
class ConfigError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Hidden layers as `kind[:units]` items; the output layer is implied by the class count.
using LayerList = std::vector<LayerSpec>;

struct DataConfig {
	std::string source = "blobs"; // blobs | idx
	BlobsOptions blobs{4, 250, 2, 1.0, 1};
	std::string train_images, train_labels, test_images, test_labels;
	std::size_t train_limit = 0; // 0 keeps every sample
	std::size_t test_limit = 0;
};

struct SweepConfig {
	std::size_t k_min = 2;
	std::size_t k_max = 0; // 0 means classes - 1
	std::size_t max_per_k = 100;
	std::uint64_t seed = 5;
};

struct ReplaceConfig {
	SplitPlan plan{{0, 1, 2}, {2, 3}, 2, 0.5, 0.1, 1};
	LayerList strong_layers{{LayerKind::Dense, 32}, {LayerKind::Dense, 32}};
	std::uint64_t strong_seed = 11;
	LayerList weak_layers{{LayerKind::Dense, 8}};
	std::uint64_t weak_seed = 21;
	std::size_t weak_epochs = 100;
	std::size_t weak_batch_size = 8;
	AdaptationConfig adapt{10, 0.05, 32, 0};
};

/// Artifacts a command starts from; empty when the command builds them itself.
struct InputConfig {
	std::string checkpoint;
	std::string modules_dir;
	std::vector<std::size_t> classes; // empty selects every module found
};

struct GradcheckConfig {
	std::size_t instances = 20;
	std::uint64_t seed = 0;
	std::string perturb; // op whose analytic gradient is deliberately nudged; empty for none
};

struct ExperimentConfig {
	LayerList layers{{LayerKind::Dense, 32}, {LayerKind::Dense, 32}};
	std::uint64_t model_seed = 7;
	DataConfig data;
	TrainConfig train{60, 128, 0.05, 0.9, LossWeights{}, 3, true, 1, true};
	double tau = 0.9;
	std::vector<double> tau_sweep;
	SweepConfig sweep;
	ReplaceConfig replace;
	GradcheckConfig gradcheck;
	InputConfig input;
	std::string output_dir = "moda-out";
};

inline std::string format_layers(const LayerList& layers) {
	return text::join(layers, [](const LayerSpec& l) {
		std::string s = layer_kind_name(l.kind);
		if (l.units)
			s += ":" + std::to_string(l.units);
		return s;
	});
}

inline LayerList parse_layers(std::string_view s) {
	LayerList out;
	for (auto item : text::split(s, ',')) {
		const auto colon = item.find(':');
		const auto name = item.substr(0, colon);
		LayerSpec l;
		bool known = false;
		for (LayerKind k : {LayerKind::Dense, LayerKind::Conv3x3, LayerKind::MaxPool2x2, LayerKind::Flatten})
			if (name == layer_kind_name(k)) {
				l.kind = k;
				known = true;
			}
		if (!known)
			throw ConfigError("unknown layer kind '" + std::string(name) + "'");
		if (l.participates()) {
			if (colon == std::string_view::npos)
				throw ConfigError("layer '" + std::string(item) + "' needs a unit count");
			l.units = static_cast<std::size_t>(text::parse_u64(item.substr(colon + 1), "layer units"));
			if (l.units == 0)
				throw ConfigError("layer '" + std::string(item) + "' has zero units");
		} else if (colon != std::string_view::npos) {
			throw ConfigError("layer '" + std::string(name) + "' takes no unit count");
		}
		out.push_back(l);
	}
	return out;
}

/// Network for a dataset: the configured hidden layers plus an output layer over its classes.
inline ModelSpec model_spec_for(const LayerList& layers, const Dataset& d, std::uint64_t seed) {
	ModelSpec s;
	s.layers = layers;
	s.layers.push_back({LayerKind::Output, d.classes});
	const auto& shape = d.inputs.shape();
	s.input_shape.assign(shape.begin() + 1, shape.end());
	s.classes = d.classes;
	s.seed = seed;
	return s;
}

namespace detail {

struct ConfigField {
	std::string key;
	std::function<void(ExperimentConfig&, std::string_view)> set;
	std::function<std::string(const ExperimentConfig&)> get;
	bool is_seed = false;
};

template <class T>
std::string format_value(const T& v) {
	if constexpr (std::is_same_v<T, bool>)
		return v ? "true" : "false";
	else if constexpr (std::is_same_v<T, double>)
		return text::format_double(v);
	else if constexpr (std::is_same_v<T, std::string>)
		return v;
	else if constexpr (std::is_same_v<T, LayerList>)
		return format_layers(v);
	else if constexpr (std::is_same_v<T, std::vector<double>>)
		return text::join(v, text::format_double);
	else if constexpr (std::is_same_v<T, std::vector<std::size_t>>)
		return text::join(v, [](std::size_t x) { return std::to_string(x); });
	else
		return std::to_string(v);
}

template <class T>
T parse_value(std::string_view s, std::string_view key) {
	if constexpr (std::is_same_v<T, bool>)
		return text::parse_bool(s, key);
	else if constexpr (std::is_same_v<T, double>)
		return text::parse_double(s, key);
	else if constexpr (std::is_same_v<T, std::string>)
		return std::string(text::trim(s));
	else if constexpr (std::is_same_v<T, LayerList>)
		return parse_layers(s);
	else if constexpr (std::is_same_v<T, std::vector<double>>)
		return text::parse_double_list(s, key);
	else if constexpr (std::is_same_v<T, std::vector<std::size_t>>)
		return text::parse_size_list(s, key);
	else
		return static_cast<T>(text::parse_u64(s, key));
}

template <class Access>
ConfigField bind(std::string key, Access access, bool is_seed = false) {
	using T = std::remove_reference_t<decltype(access(std::declval<ExperimentConfig&>()))>;
	ConfigField f;
	f.key = key;
	f.set = [access, key](ExperimentConfig& c, std::string_view v) { access(c) = parse_value<T>(v, key); };
	f.get = [access](const ExperimentConfig& c) {
		return format_value(access(const_cast<ExperimentConfig&>(c)));
	};
	f.is_seed = is_seed;
	return f;
}

#define MODA_FIELD(key, expr) bind(key, [](ExperimentConfig& c) -> auto& { return expr; })
#define MODA_SEED_FIELD(key, expr) bind(key, [](ExperimentConfig& c) -> auto& { return expr; }, true)

inline const std::vector<ConfigField>& config_fields() {
	static const std::vector<ConfigField> fields{
			MODA_FIELD("model.layers", c.layers),
			MODA_SEED_FIELD("model.seed", c.model_seed),
			MODA_FIELD("data.source", c.data.source),
			MODA_FIELD("data.classes", c.data.blobs.classes),
			MODA_FIELD("data.per_class", c.data.blobs.per_class),
			MODA_FIELD("data.dim", c.data.blobs.dim),
			MODA_FIELD("data.spread", c.data.blobs.spread),
			MODA_SEED_FIELD("data.seed", c.data.blobs.seed),
			MODA_FIELD("data.train_images", c.data.train_images),
			MODA_FIELD("data.train_labels", c.data.train_labels),
			MODA_FIELD("data.test_images", c.data.test_images),
			MODA_FIELD("data.test_labels", c.data.test_labels),
			MODA_FIELD("data.train_limit", c.data.train_limit),
			MODA_FIELD("data.test_limit", c.data.test_limit),
			MODA_FIELD("train.epochs", c.train.epochs),
			MODA_FIELD("train.batch_size", c.train.batch_size),
			MODA_FIELD("train.learning_rate", c.train.learning_rate),
			MODA_FIELD("train.momentum", c.train.momentum),
			MODA_SEED_FIELD("train.seed", c.train.seed),
			MODA_FIELD("train.shuffle", c.train.shuffle),
			MODA_FIELD("train.eval_every", c.train.eval_every),
			MODA_FIELD("train.modular", c.train.modular),
			MODA_FIELD("loss.alpha", c.train.weights.alpha),
			MODA_FIELD("loss.beta", c.train.weights.beta),
			MODA_FIELD("loss.gamma", c.train.weights.gamma),
			MODA_FIELD("decompose.tau", c.tau),
			MODA_FIELD("decompose.tau_sweep", c.tau_sweep),
			MODA_FIELD("sweep.k_min", c.sweep.k_min),
			MODA_FIELD("sweep.k_max", c.sweep.k_max),
			MODA_FIELD("sweep.max_per_k", c.sweep.max_per_k),
			MODA_SEED_FIELD("sweep.seed", c.sweep.seed),
			MODA_FIELD("replace.strong_classes", c.replace.plan.strong_classes),
			MODA_FIELD("replace.weak_classes", c.replace.plan.weak_classes),
			MODA_FIELD("replace.target", c.replace.plan.target),
			MODA_FIELD("replace.target_strong_fraction", c.replace.plan.target_strong_fraction),
			MODA_FIELD("replace.overfit_fraction", c.replace.plan.overfit_fraction),
			MODA_SEED_FIELD("replace.plan_seed", c.replace.plan.seed),
			MODA_FIELD("replace.strong_layers", c.replace.strong_layers),
			MODA_SEED_FIELD("replace.strong_seed", c.replace.strong_seed),
			MODA_FIELD("replace.weak_layers", c.replace.weak_layers),
			MODA_SEED_FIELD("replace.weak_seed", c.replace.weak_seed),
			MODA_FIELD("replace.weak_epochs", c.replace.weak_epochs),
			MODA_FIELD("replace.weak_batch_size", c.replace.weak_batch_size),
			MODA_FIELD("replace.adapt_epochs", c.replace.adapt.epochs),
			MODA_FIELD("replace.adapt_learning_rate", c.replace.adapt.learning_rate),
			MODA_FIELD("replace.adapt_batch_size", c.replace.adapt.batch_size),
			MODA_SEED_FIELD("replace.adapt_seed", c.replace.adapt.seed),
			MODA_FIELD("gradcheck.instances", c.gradcheck.instances),
			MODA_SEED_FIELD("gradcheck.seed", c.gradcheck.seed),
			MODA_FIELD("gradcheck.perturb", c.gradcheck.perturb),
			MODA_FIELD("input.checkpoint", c.input.checkpoint),
			MODA_FIELD("input.modules_dir", c.input.modules_dir),
			MODA_FIELD("input.classes", c.input.classes),
			MODA_FIELD("output.dir", c.output_dir),
	};
	return fields;
}

#undef MODA_FIELD
#undef MODA_SEED_FIELD

inline const ConfigField& find_field(std::string_view key) {
	for (const auto& f : config_fields())
		if (f.key == key)
			return f;
	throw ConfigError("unknown config key '" + std::string(key) + "'");
}

} // namespace detail

/// Applies one `section.key = value` assignment.
inline void set_config_value(ExperimentConfig& c, std::string_view key, std::string_view value) {
	const auto& f = detail::find_field(text::trim(key));
	try {
		f.set(c, value);
	} catch (const ConfigError&) {
		throw;
	} catch (const std::exception& e) {
		throw ConfigError(std::string(e.what()));
	}
}

inline std::string get_config_value(const ExperimentConfig& c, std::string_view key) {
	return detail::find_field(key).get(c);
}

/// Applies a `section.key=value` override as given on the command line.
inline void apply_override(ExperimentConfig& c, std::string_view assignment) {
	const auto eq = assignment.find('=');
	if (eq == std::string_view::npos)
		throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
	set_config_value(c, assignment.substr(0, eq), assignment.substr(eq + 1));
}

/// Line-oriented `section.key = value` text; '#' starts a comment. Later lines override earlier ones.
inline void parse_config(ExperimentConfig& c, std::string_view src) {
	std::size_t lineno = 0;
	std::size_t pos = 0;
	while (pos <= src.size()) {
		const auto nl = src.find('\n', pos);
		std::string_view line = src.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
		pos = nl == std::string_view::npos ? src.size() + 1 : nl + 1;
		++lineno;
		if (const auto hash = line.find('#'); hash != std::string_view::npos)
			line = line.substr(0, hash);
		line = text::trim(line);
		if (line.empty())
			continue;
		try {
			apply_override(c, line);
		} catch (const ConfigError& e) {
			throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
		}
	}
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
	std::ifstream in(path);
	if (!in)
		throw FormatError(path.string() + ": cannot open config");
	std::stringstream ss;
	ss << in.rdbuf();
	ExperimentConfig c;
	try {
		parse_config(c, ss.str());
	} catch (const ConfigError& e) {
		throw ConfigError(path.string() + ": " + e.what());
	}
	return c;
}

/// Sets every seed key to one value.
inline void apply_seed(ExperimentConfig& c, std::uint64_t seed) {
	for (const auto& f : detail::config_fields())
		if (f.is_seed)
			f.set(c, std::to_string(seed));
}

/// Honours MODA_SEED when set; returns whether it was applied.
inline bool apply_seed_env(ExperimentConfig& c) {
	const char* v = std::getenv("MODA_SEED");
	if (!v || !*v)
		return false;
	try {
		apply_seed(c, text::parse_u64(v, "MODA_SEED"));
	} catch (const std::invalid_argument& e) {
		throw ConfigError(e.what());
	}
	return true;
}

/// Every key with its effective value, parseable by parse_config.
inline void write_resolved_config(std::ostream& os, const ExperimentConfig& c) {
	std::string section;
	for (const auto& f : detail::config_fields()) {
		const auto s = f.key.substr(0, f.key.find('.'));
		if (s != section) {
			if (!section.empty())
				os << '\n';
			section = s;
		}
		const std::string v = f.get(c);
		os << f.key << (v.empty() ? " =" : " = ") << v << '\n';
	}
}

inline std::string resolved_config(const ExperimentConfig& c) {
	std::ostringstream os;
	write_resolved_config(os, c);
	return os.str();
}

} // namespace moda

#endif // MODA_CONFIG_HPP
