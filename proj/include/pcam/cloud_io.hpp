#pragma once

// ASCII XYZ clouds ("x y z" per line, '#' comments) and pair meta files
// (12 numbers: row-major R, then t).

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pcam/error.hpp"
#include "pcam/geometry.hpp"

namespace pcam {

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline bool parse_double(std::string_view tok, double& out) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return res.ec == std::errc() && res.ptr == tok.data() + tok.size() && std::isfinite(out);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline PointCloud parse_cloud(std::istream& in, const std::string& origin = "<stream>") {
  std::vector<Vec3> pts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto toks = detail::split_ws(line);
    if (toks.empty() || toks.front().front() == '#') continue;
    Vec3 p;
    if (toks.size() != 3 || !detail::parse_double(toks[0], p.x()) || !detail::parse_double(toks[1], p.y()) ||
        !detail::parse_double(toks[2], p.z())) {
      throw ParseError(origin + ": expected three finite numbers", line_no);
    }
    pts.push_back(p);
  }
  if (pts.empty()) throw ParseError(origin + ": cloud has no points");
  return PointCloud(std::move(pts));
}

inline PointCloud read_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_cloud(in, path.string());
}

inline void write_cloud(const PointCloud& cloud, std::ostream& out) {
  for (const auto& p : cloud) {
    out << detail::format_double(p.x()) << ' ' << detail::format_double(p.y()) << ' '
        << detail::format_double(p.z()) << '\n';
  }
}

inline void write_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_cloud(cloud, out);
  if (!out) throw IoError("write failed for " + path.string());
}

inline RigidTransform read_meta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<double> v;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto toks = detail::split_ws(line);
    if (toks.empty() || toks.front().front() == '#') continue;
    for (auto t : toks) {
      double x = 0.0;
      if (!detail::parse_double(t, x)) throw ParseError(path.string() + ": bad number", line_no);
      v.push_back(x);
    }
  }
  if (v.size() != 12) throw ParseError(path.string() + ": expected 12 numbers, found " + std::to_string(v.size()));
  try {
    return RigidTransform::from_array(v);
  } catch (const ParameterError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline std::string format_transform(const RigidTransform& t) {
  std::string s;
  const auto a = t.to_array();
  for (std::size_t i = 0; i < a.size(); ++i) s += (i ? " " : "") + detail::format_double(a[i]);
  return s;
}

inline void write_meta(const RigidTransform& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << format_transform(t) << '\n';
}

}  // namespace pcam
