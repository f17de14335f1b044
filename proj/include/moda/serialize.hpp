#ifndef MODA_SERIALIZE_HPP
#define MODA_SERIALIZE_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "moda/dataset.hpp"
#include "moda/decomposer.hpp"
#include "moda/digest.hpp"
#include "moda/network.hpp"
#include "moda/text.hpp"

namespace moda {

/// Stored digest differs from the digest of the stored parameters.
class DigestError : public FormatError {
public:
	using FormatError::FormatError;
};

inline constexpr char kFileMagic[4] = {'M', 'O', 'D', 'A'};
inline constexpr std::uint16_t kFileVersion = 1;

namespace detail {

class ByteWriter {
public:
	void raw(std::string_view s) { out_.append(s); }
	void u16(std::uint16_t v) { le(v, 2); }
	void u32(std::uint32_t v) { le(v, 4); }
	void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
	std::string take() { return std::move(out_); }

private:
	void le(std::uint64_t v, int bytes) {
		for (int i = 0; i < bytes; ++i)
			out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
	}
	std::string out_;
};

class ByteReader {
public:
	explicit ByteReader(std::string_view bytes) : b_(bytes) {}

	std::string_view raw(std::size_t n, const char* what) {
		need(n, what);
		auto s = b_.substr(pos_, n);
		pos_ += n;
		return s;
	}
	std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(le(2, what)); }
	std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
	double f64(const char* what) { return std::bit_cast<double>(le(8, what)); }
	std::size_t remaining() const noexcept { return b_.size() - pos_; }

private:
	void need(std::size_t n, const char* what) const {
		if (b_.size() - pos_ < n)
			throw FormatError(std::string("truncated file while reading ") + what);
	}
	std::uint64_t le(int bytes, const char* what) {
		need(static_cast<std::size_t>(bytes), what);
		std::uint64_t v = 0;
		for (int i = 0; i < bytes; ++i)
			v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
		pos_ += static_cast<std::size_t>(bytes);
		return v;
	}
	std::string_view b_;
	std::size_t pos_ = 0;
};

inline std::string hex64(std::uint64_t v) {
	char buf[17];
	for (int i = 15; i >= 0; --i) {
		buf[i] = "0123456789abcdef"[v & 0xf];
		v >>= 4;
	}
	return std::string(buf, 16);
}

inline LayerKind parse_layer_kind(std::string_view s) {
	for (LayerKind k : {LayerKind::Dense, LayerKind::Conv3x3, LayerKind::MaxPool2x2, LayerKind::Flatten,
			     LayerKind::Output})
		if (s == layer_kind_name(k))
			return k;
	throw FormatError("unknown layer kind '" + std::string(s) + "'");
}

using Header = std::map<std::string, std::string>;

/// Architecture, seed and normalisation as header entries.
inline void put_model_spec(Header& h, const ModelSpec& spec, const Normalization& norm) {
	h["layers"] = text::join(spec.layers, [](const LayerSpec& l) {
		return std::string(layer_kind_name(l.kind)) + ":" + std::to_string(l.units);
	});
	h["input_shape"] = text::join(spec.input_shape, [](std::size_t d) { return std::to_string(d); }, 'x');
	h["classes"] = std::to_string(spec.classes);
	h["seed"] = std::to_string(spec.seed);
	h["norm_mean"] = text::join(norm.mean, text::format_double);
	h["norm_scale"] = text::join(norm.scale, text::format_double);
}

inline const std::string& field(const Header& h, const std::string& key) {
	auto it = h.find(key);
	if (it == h.end())
		throw FormatError("header lacks '" + key + "'");
	return it->second;
}

inline ModelSpec get_model_spec(const Header& h, Normalization& norm) {
	ModelSpec spec;
	for (auto item : text::split(field(h, "layers"), ',')) {
		const auto colon = item.find(':');
		if (colon == std::string_view::npos)
			throw FormatError("malformed layer entry '" + std::string(item) + "'");
		spec.layers.push_back({parse_layer_kind(item.substr(0, colon)),
				static_cast<std::size_t>(text::parse_u64(item.substr(colon + 1), "layer units"))});
	}
	spec.input_shape = text::parse_size_list(field(h, "input_shape"), "input_shape", 'x');
	spec.classes = static_cast<std::size_t>(text::parse_u64(field(h, "classes"), "classes"));
	spec.seed = text::parse_u64(field(h, "seed"), "seed");
	norm.mean = text::parse_double_list(field(h, "norm_mean"), "norm_mean");
	norm.scale = text::parse_double_list(field(h, "norm_scale"), "norm_scale");
	return spec;
}

inline std::string encode_header(const Header& h) {
	std::string s;
	for (const auto& [k, v] : h)
		s += k + "=" + v + "\n";
	return s;
}

inline Header decode_header(std::string_view s, const std::set<std::string>& allowed) {
	Header h;
	for (auto line : text::split(s, '\n')) {
		if (line.empty())
			continue;
		const auto eq = line.find('=');
		if (eq == std::string_view::npos)
			throw FormatError("malformed header line '" + std::string(line) + "'");
		std::string key(line.substr(0, eq));
		if (!allowed.count(key))
			throw FormatError("unknown header key '" + key + "'");
		if (!h.emplace(key, std::string(line.substr(eq + 1))).second)
			throw FormatError("duplicate header key '" + key + "'");
	}
	return h;
}

inline void write_prelude(ByteWriter& w, const Header& h) {
	const std::string head = encode_header(h);
	w.raw(std::string_view(kFileMagic, 4));
	w.u16(kFileVersion);
	w.u32(static_cast<std::uint32_t>(head.size()));
	w.raw(head);
}

inline Header read_prelude(ByteReader& r, const std::set<std::string>& allowed, std::string_view kind) {
	if (r.raw(4, "magic") != std::string_view(kFileMagic, 4))
		throw FormatError("not a MODA file (bad magic)");
	const auto version = r.u16("version");
	if (version != kFileVersion)
		throw FormatError("unsupported MODA file version " + std::to_string(version));
	const auto len = r.u32("header length");
	Header h = decode_header(r.raw(len, "header"), allowed);
	if (field(h, "kind") != kind)
		throw FormatError("expected a " + std::string(kind) + " file, found '" + field(h, "kind") + "'");
	return h;
}

/// Reads the trailing parameter block into the given tensors and checks the stored digest.
inline void read_params(ByteReader& r, const Header& h, const std::vector<Tensor*>& tensors) {
	std::size_t n = 0;
	for (const Tensor* t : tensors)
		n += t->size();
	const auto declared = text::parse_u64(field(h, "params"), "params");
	if (declared != n)
		throw ShapeError("header declares " + std::to_string(declared) + " parameters, architecture has " +
				std::to_string(n));
	if (r.remaining() != n * 8)
		throw FormatError(r.remaining() < n * 8 ? "truncated parameter block"
		                                        : "trailing bytes after parameter block");
	Fnv1a digest;
	for (Tensor* t : tensors) {
		for (double& v : t->data())
			v = r.f64("parameters");
		digest.update(t->data());
	}
	if (hex64(digest.value()) != field(h, "digest"))
		throw DigestError("parameter digest mismatch: stored " + field(h, "digest") + ", computed " +
				hex64(digest.value()));
}

inline std::string read_file(const std::filesystem::path& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in)
		throw FormatError(path.string() + ": cannot open");
	return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
	std::ofstream out(path, std::ios::binary | std::ios::trunc);
	if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
		throw FormatError(path.string() + ": cannot write");
}

} // namespace detail

inline std::string encode_checkpoint(const Model& m) {
	detail::Header h;
	h["kind"] = "checkpoint";
	detail::put_model_spec(h, m.spec(), m.normalization());
	std::size_t n = 0;
	for (const Tensor* t : m.parameters())
		n += t->size();
	h["params"] = std::to_string(n);
	h["digest"] = detail::hex64(model_digest(m));
	detail::ByteWriter w;
	detail::write_prelude(w, h);
	for (const Tensor* t : m.parameters())
		for (double v : t->data())
			w.f64(v);
	return w.take();
}

inline Model decode_checkpoint(std::string_view bytes) {
	detail::ByteReader r(bytes);
	const auto h = detail::read_prelude(r,
			{"kind", "layers", "input_shape", "classes", "seed", "norm_mean", "norm_scale", "params", "digest"},
			"checkpoint");
	Normalization norm;
	Model m = Model::build(detail::get_model_spec(h, norm));
	m.set_normalization(norm);
	detail::read_params(r, h, m.parameters());
	return m;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
	detail::write_file(path, encode_checkpoint(m));
}

inline Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(detail::read_file(path)); }

inline std::uint64_t module_digest(const ModuleSpec& s) {
	Fnv1a h;
	for (std::size_t i = 0; i < s.weights.size(); ++i) {
		h.update(s.weights[i].data());
		h.update(s.biases[i].data());
	}
	return h.value();
}

/// Module files: the checkpoint layout plus provenance keys and the index lists before the parameters.
inline std::string encode_module(const ModuleSpec& s) {
	detail::Header h;
	h["kind"] = "module";
	detail::put_model_spec(h, s.source_spec, s.normalization);
	h["class"] = std::to_string(s.class_id);
	h["tau"] = text::format_double(s.tau);
	h["module_seed"] = std::to_string(s.seed);
	h["source_digest"] = detail::hex64(s.source_digest);
	h["fallback_layers"] = text::join(s.fallback_layers, [](std::size_t v) { return std::to_string(v); });
	h["params"] = std::to_string(s.weight_count());
	h["digest"] = detail::hex64(module_digest(s));
	detail::ByteWriter w;
	detail::write_prelude(w, h);
	for (const auto& list : s.retained) {
		w.u32(static_cast<std::uint32_t>(list.size()));
		for (std::uint32_t i : list)
			w.u32(i);
	}
	for (std::size_t i = 0; i < s.weights.size(); ++i) {
		for (double v : s.weights[i].data())
			w.f64(v);
		for (double v : s.biases[i].data())
			w.f64(v);
	}
	return w.take();
}

inline ModuleSpec decode_module(std::string_view bytes) {
	detail::ByteReader r(bytes);
	const auto h = detail::read_prelude(r,
			{"kind", "layers", "input_shape", "classes", "seed", "norm_mean", "norm_scale", "class", "tau",
			 "module_seed", "source_digest", "fallback_layers", "params", "digest"},
			"module");
	ModuleSpec s;
	s.source_spec = detail::get_model_spec(h, s.normalization);
	s.class_id = static_cast<std::size_t>(text::parse_u64(detail::field(h, "class"), "class"));
	s.tau = text::parse_double(detail::field(h, "tau"), "tau");
	s.seed = text::parse_u64(detail::field(h, "module_seed"), "module_seed");
	s.source_digest = text::parse_u64(detail::field(h, "source_digest"), "source_digest", 16);
	s.fallback_layers = text::parse_size_list(detail::field(h, "fallback_layers"), "fallback_layers");
	if (s.class_id >= s.source_spec.classes)
		throw FormatError("module class " + std::to_string(s.class_id) + " out of range");

	// The source architecture gives the widths the index lists must fit.
	const Model shape_ref = Model::build(s.source_spec);
	for (std::size_t li : shape_ref.participating_layers()) {
		const auto n = r.u32("index list length");
		IndexList list(n);
		for (auto& i : list)
			i = r.u32("index list");
		for (std::size_t k = 0; k < list.size(); ++k)
			if (list[k] >= shape_ref.layer(li).spec.units || (k && list[k] <= list[k - 1]))
				throw ShapeError("module index list for layer " + std::to_string(li) + " is not sorted, unique and in range");
		s.retained.push_back(std::move(list));
	}
	const Model sliced = slice_model(shape_ref, s.retained, IndexList{static_cast<std::uint32_t>(s.class_id)});
	for (const auto& layer : sliced.layers())
		if (layer.spec.has_params()) {
			s.weights.emplace_back(layer.weight.shape());
			s.biases.emplace_back(layer.bias.shape());
		}
	std::vector<Tensor*> tensors;
	for (std::size_t i = 0; i < s.weights.size(); ++i) {
		tensors.push_back(&s.weights[i]);
		tensors.push_back(&s.biases[i]);
	}
	detail::read_params(r, h, tensors);
	return s;
}

inline void save_module(const ModuleSpec& s, const std::filesystem::path& path) {
	detail::write_file(path, encode_module(s));
}

inline ModuleSpec load_module(const std::filesystem::path& path) { return decode_module(detail::read_file(path)); }

/// A module can be used with a model only if it was cut from exactly these weights.
inline bool module_matches(const ModuleSpec& s, const Model& source) {
	return s.source_spec == source.spec() && s.source_digest == model_digest(source);
}

} // namespace moda

#endif // MODA_SERIALIZE_HPP
