#ifndef MODA_TEXT_HPP
#define MODA_TEXT_HPP

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace moda::text {

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
	char buf[64];
	const auto r = std::to_chars(buf, buf + sizeof buf, v);
	return std::string(buf, r.ptr);
}

inline std::string_view trim(std::string_view s) {
	const auto b = s.find_first_not_of(" \t\r\n");
	if (b == std::string_view::npos)
		return {};
	const auto e = s.find_last_not_of(" \t\r\n");
	return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
	std::vector<std::string_view> out;
	if (s.empty())
		return out;
	std::size_t start = 0;
	while (true) {
		const auto p = s.find(sep, start);
		out.push_back(trim(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start)));
		if (p == std::string_view::npos)
			break;
		start = p + 1;
	}
	return out;
}

inline double parse_double(std::string_view s, std::string_view what) {
	s = trim(s);
	double v = 0.0;
	const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
	if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
		throw std::invalid_argument(std::string(what) + ": '" + std::string(s) + "' is not a number");
	return v;
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view what, int base = 10) {
	s = trim(s);
	std::uint64_t v = 0;
	const auto r = std::from_chars(s.data(), s.data() + s.size(), v, base);
	if (s.empty() || r.ec != std::errc{} || r.ptr != s.data() + s.size())
		throw std::invalid_argument(std::string(what) + ": '" + std::string(s) + "' is not a non-negative integer");
	return v;
}

inline bool parse_bool(std::string_view s, std::string_view what) {
	s = trim(s);
	if (s == "true" || s == "1")
		return true;
	if (s == "false" || s == "0")
		return false;
	throw std::invalid_argument(std::string(what) + ": '" + std::string(s) + "' is not true/false");
}

template <class T, class F>
std::string join(const std::vector<T>& v, F&& fmt, char sep = ',') {
	std::string out;
	for (std::size_t i = 0; i < v.size(); ++i) {
		if (i)
			out += sep;
		out += fmt(v[i]);
	}
	return out;
}

inline std::vector<std::size_t> parse_size_list(std::string_view s, std::string_view what, char sep = ',') {
	std::vector<std::size_t> out;
	for (auto part : split(s, sep))
		out.push_back(static_cast<std::size_t>(parse_u64(part, what)));
	return out;
}

inline std::vector<double> parse_double_list(std::string_view s, std::string_view what) {
	std::vector<double> out;
	for (auto part : split(s, ','))
		out.push_back(parse_double(part, what));
	return out;
}

} // namespace moda::text

#endif // MODA_TEXT_HPP
