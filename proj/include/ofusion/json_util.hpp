#pragma once

// Canonical JSON helpers. Keys come out sorted (nlohmann's default object
// type) and every real is rounded to 9 significant digits before it is
// stored, so write -> read -> write reproduces files byte for byte.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"

namespace ofusion {

using Json = nlohmann::json;

inline double round_sig9(double v) {
  if (!std::isfinite(v)) return v;
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}

inline std::string format_sig9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline Json to_json(const Vec3& v) { return Json::array({round_sig9(v.x()), round_sig9(v.y()), round_sig9(v.z())}); }
inline Json to_json(const Vec2& v) { return Json::array({round_sig9(v.x()), round_sig9(v.y())}); }

inline Json to_json(const Mat3& m) {
  Json a = Json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a.push_back(round_sig9(m(r, c)));
  }
  return a;
}

inline Json to_json(std::span<const Point3> pts) {
  Json a = Json::array();
  for (const auto& p : pts) a.push_back(to_json(p));
  return a;
}

inline Json to_json(const Camera& c) {
  return Json{{"fx", round_sig9(c.fx)}, {"fy", round_sig9(c.fy)}, {"cx", round_sig9(c.cx)},
              {"cy", round_sig9(c.cy)}, {"width", c.width},       {"height", c.height}};
}

inline double json_number(const Json& j, const std::string& what) {
  if (!j.is_number()) fail(ErrorCode::ParseError, what + ": expected a number");
  return j.get<double>();
}

inline Vec3 vec3_from_json(const Json& j, const std::string& what = "vector") {
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::ParseError, what + ": expected [x, y, z]");
  return {json_number(j[0], what), json_number(j[1], what), json_number(j[2], what)};
}

inline Mat3 mat3_from_json(const Json& j, const std::string& what = "matrix") {
  if (!j.is_array() || j.size() != 9) fail(ErrorCode::ParseError, what + ": expected 9 numbers");
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = json_number(j[static_cast<std::size_t>(3 * r + c)], what);
  }
  return m;
}

inline std::vector<Point3> points_from_json(const Json& j, const std::string& what = "points") {
  if (!j.is_array()) fail(ErrorCode::ParseError, what + ": expected an array");
  std::vector<Point3> out;
  out.reserve(j.size());
  for (const auto& e : j) out.push_back(vec3_from_json(e, what));
  return out;
}

inline Camera camera_from_json(const Json& j) {
  Camera c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, std::string("camera: ") + e.what());
  }
  if (!c.is_valid()) fail(ErrorCode::ParseError, "camera: invalid intrinsics");
  return c;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

inline Json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(1) + "\n"); }

}  // namespace ofusion
