#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sqparts/dsq.hpp"
#include "sqparts/fitter.hpp"

namespace sqparts {

constexpr int kMinCloudPoints = 32;

namespace detail {

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

inline bool blank_or_comment(const std::string& s) {
  const size_t at = s.find_first_not_of(" \t");
  return at == std::string::npos || s[at] == '#';
}

[[noreturn]] inline void parse_fail(const std::string& name, long line, const std::string& why) {
  throw std::runtime_error("parse error in " + name + " at line " + std::to_string(line) + ": " +
                           why);
}

inline PointMatrix rows_to_matrix(const std::vector<std::array<double, 3>>& rows) {
  PointMatrix out(static_cast<long>(rows.size()), 3);
  for (size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<long>(i)) << rows[i][0], rows[i][1], rows[i][2];
  return out;
}

}  // namespace detail

// Whitespace-separated coordinates, first three fields per line; '#' lines
// and blank lines are skipped, extra fields ignored.
inline PointMatrix load_xyz(std::istream& in, const std::string& name) {
  std::vector<std::array<double, 3>> rows;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (detail::blank_or_comment(line)) continue;
    std::istringstream ls(line);
    std::array<double, 3> p{};
    if (!(ls >> p[0] >> p[1] >> p[2]))
      detail::parse_fail(name, lineno, "expected at least three numeric fields");
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
      throw std::runtime_error("non-finite coordinate in " + name + " at line " +
                               std::to_string(lineno));
    rows.push_back(p);
  }
  return detail::rows_to_matrix(rows);
}

// Subset of PLY: ascii or binary little-endian, float/double vertex
// coordinates, arbitrary extra properties and elements skipped (including
// list properties in binary payloads).
inline PointMatrix load_ply(std::istream& in, const std::string& name) {
  std::string line;
  long lineno = 0;
  auto next_line = [&]() {
    if (!std::getline(in, line)) detail::parse_fail(name, lineno, "truncated header");
    ++lineno;
    line = detail::strip_cr(line);
  };
  next_line();
  if (line != "ply") detail::parse_fail(name, lineno, "missing ply magic");

  struct Property {
    std::string type, name;
    bool is_list = false;
    std::string count_type, item_type;
  };
  struct Element {
    std::string name;
    long count = 0;
    std::vector<Property> props;
  };
  auto type_size = [&](const std::string& t) -> int {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" ||
        t == "float32")
      return 4;
    if (t == "double" || t == "float64") return 8;
    detail::parse_fail(name, lineno, "unknown property type '" + t + "'");
  };

  bool binary = false;
  std::vector<Element> elements;
  for (;;) {
    next_line();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment" || tok == "obj_info" || tok.empty()) continue;
    if (tok == "format") {
      std::string fmt, ver;
      ls >> fmt >> ver;
      if (fmt == "ascii")
        binary = false;
      else if (fmt == "binary_little_endian")
        binary = true;
      else
        detail::parse_fail(name, lineno, "unsupported format '" + fmt + "'");
    } else if (tok == "element") {
      Element e;
      if (!(ls >> e.name >> e.count)) detail::parse_fail(name, lineno, "bad element line");
      elements.push_back(e);
    } else if (tok == "property") {
      if (elements.empty()) detail::parse_fail(name, lineno, "property before element");
      Property p;
      ls >> p.type;
      if (p.type == "list") {
        p.is_list = true;
        if (!(ls >> p.count_type >> p.item_type >> p.name))
          detail::parse_fail(name, lineno, "bad list property");
        type_size(p.count_type);
        type_size(p.item_type);
      } else {
        if (!(ls >> p.name)) detail::parse_fail(name, lineno, "bad property line");
        type_size(p.type);
      }
      elements.back().props.push_back(p);
    } else if (tok == "end_header") {
      break;
    } else {
      detail::parse_fail(name, lineno, "unexpected header token '" + tok + "'");
    }
  }

  const Element* vertex = nullptr;
  int ix = -1, iy = -1, iz = -1;
  for (const auto& e : elements) {
    if (e.name != "vertex") continue;
    vertex = &e;
    for (size_t k = 0; k < e.props.size(); ++k) {
      if (e.props[k].name == "x") ix = static_cast<int>(k);
      if (e.props[k].name == "y") iy = static_cast<int>(k);
      if (e.props[k].name == "z") iz = static_cast<int>(k);
    }
  }
  if (!vertex || ix < 0 || iy < 0 || iz < 0)
    throw std::runtime_error("parse error in " + name + ": no vertex x/y/z properties");
  for (int k : {ix, iy, iz}) {
    const Property& p = vertex->props[static_cast<size_t>(k)];
    if (p.is_list || type_size(p.type) < 4 || p.type == "int" || p.type == "uint" ||
        p.type == "int32" || p.type == "uint32")
      throw std::runtime_error("parse error in " + name +
                               ": vertex coordinates must be float or double");
  }

  std::vector<std::array<double, 3>> rows;
  if (!binary) {
    for (const auto& e : elements) {
      for (long r = 0; r < e.count; ++r) {
        next_line();
        if (e.name != "vertex") continue;
        std::istringstream ls(line);
        std::vector<double> vals;
        double v;
        while (ls >> v) vals.push_back(v);
        if (static_cast<int>(vals.size()) < static_cast<int>(e.props.size()))
          detail::parse_fail(name, lineno, "vertex row has too few values");
        rows.push_back({vals[ix], vals[iy], vals[iz]});
      }
    }
  } else {
    // host is little-endian; payload bytes map directly
    auto read_scalar = [&](const std::string& t) -> double {
      char buf[8];
      const int sz = type_size(t);
      if (!in.read(buf, sz))
        throw std::runtime_error("parse error in " + name + ": truncated binary payload");
      if (t == "float" || t == "float32") {
        float f;
        std::memcpy(&f, buf, 4);
        return f;
      }
      if (t == "double" || t == "float64") {
        double d;
        std::memcpy(&d, buf, 8);
        return d;
      }
      std::int64_t v = 0;
      std::memcpy(&v, buf, sz);
      if (t == "char" || t == "int8") v = static_cast<std::int8_t>(v);
      if (t == "short" || t == "int16") v = static_cast<std::int16_t>(v);
      if (t == "int" || t == "int32") v = static_cast<std::int32_t>(v);
      return static_cast<double>(v);
    };
    for (const auto& e : elements) {
      for (long r = 0; r < e.count; ++r) {
        std::array<double, 3> p{};
        for (size_t k = 0; k < e.props.size(); ++k) {
          const Property& pr = e.props[k];
          if (pr.is_list) {
            const long cnt = static_cast<long>(read_scalar(pr.count_type));
            for (long c = 0; c < cnt; ++c) read_scalar(pr.item_type);
          } else {
            const double v = read_scalar(pr.type);
            if (static_cast<int>(k) == ix) p[0] = v;
            if (static_cast<int>(k) == iy) p[1] = v;
            if (static_cast<int>(k) == iz) p[2] = v;
          }
        }
        if (e.name == "vertex") rows.push_back(p);
      }
    }
  }
  for (size_t i = 0; i < rows.size(); ++i)
    if (!std::isfinite(rows[i][0]) || !std::isfinite(rows[i][1]) || !std::isfinite(rows[i][2]))
      throw std::runtime_error("non-finite coordinate in " + name + " at vertex " +
                               std::to_string(i));
  return detail::rows_to_matrix(rows);
}

// Vertex records only; everything else in the file is ignored.
inline PointMatrix load_obj(std::istream& in, const std::string& name) {
  std::vector<std::array<double, 3>> rows;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok) || tok != "v") continue;
    std::array<double, 3> p{};
    if (!(ls >> p[0] >> p[1] >> p[2]))
      detail::parse_fail(name, lineno, "vertex record needs three coordinates");
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
      throw std::runtime_error("non-finite coordinate in " + name + " at line " +
                               std::to_string(lineno));
    rows.push_back(p);
  }
  return detail::rows_to_matrix(rows);
}

// Extension-dispatched loader with the minimum-size gate.
inline PointMatrix load_point_cloud(const std::string& path) {
  std::string ext = std::filesystem::path(path).extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  PointMatrix cloud;
  if (ext == ".xyz" || ext == ".txt" || ext == ".pts")
    cloud = load_xyz(in, path);
  else if (ext == ".ply")
    cloud = load_ply(in, path);
  else if (ext == ".obj")
    cloud = load_obj(in, path);
  else
    throw std::runtime_error("unsupported point cloud format: " + path);
  if (cloud.rows() < kMinCloudPoints)
    throw std::runtime_error("too few points in " + path + ": " + std::to_string(cloud.rows()) +
                             " < " + std::to_string(kMinCloudPoints));
  return cloud;
}

inline std::vector<int> load_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::vector<int> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (detail::blank_or_comment(line)) continue;
    std::istringstream ls(line);
    int v;
    if (!(ls >> v)) detail::parse_fail(path, lineno, "expected an integer label");
    out.push_back(v);
  }
  return out;
}

struct NormalizationRecord {
  Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
  double scale = 1.0;
};

// Shifts the centroid to the origin and divides by the largest axis extent.
inline NormalizationRecord normalize_cloud(PointMatrix& cloud) {
  require(cloud.rows() > 0, "empty cloud");
  NormalizationRecord rec;
  rec.centroid = cloud.colwise().mean();
  cloud.rowwise() -= rec.centroid;
  const Eigen::RowVector3d extent = cloud.colwise().maxCoeff() - cloud.colwise().minCoeff();
  rec.scale = extent.maxCoeff();
  require(rec.scale > 1e-12, "degenerate cloud: zero extent");
  cloud /= rec.scale;
  return rec;
}

// Maps fitted parameters back to the input frame. Scale and taper are
// scale-free; bend curvature divides by the scale because the bent offset is
// (1/b - r)(1 - cos(z b)) and all lengths multiply by s exactly when b
// divides by s.
inline DsqParams denormalize_params(const DsqParams& p, const NormalizationRecord& rec) {
  DsqParams out = p;
  for (int j = 0; j < 3; ++j) {
    out.a[j] = p.a[j] * rec.scale;
    out.t[j] = p.t[j] * rec.scale + rec.centroid[j];
  }
  out.b = p.b / rec.scale;
  return out;
}

inline nlohmann::ordered_json params_to_json(const DsqParams& p) {
  nlohmann::ordered_json j;
  j["a"] = {p.a[0], p.a[1], p.a[2]};
  j["eps"] = {p.eps[0], p.eps[1]};
  j["k"] = {p.k[0], p.k[1]};
  j["b"] = p.b;
  j["alpha"] = p.alpha;
  j["t"] = {p.t[0], p.t[1], p.t[2]};
  j["r"] = {p.r[0], p.r[1], p.r[2], p.r[3]};
  return j;
}

inline const char* mirror_name(MirrorPlane p) {
  switch (p) {
    case MirrorPlane::None: return "none";
    case MirrorPlane::XY: return "xy";
    case MirrorPlane::XZ: return "xz";
    default: return "yz";
  }
}

inline const char* backend_name(Backend b) {
  return b == Backend::Direct ? "direct" : "pointwise-mlp";
}

inline const char* stage_name(UnfreezeStage s) {
  switch (s) {
    case UnfreezeStage::CuboidLike: return "cuboid";
    case UnfreezeStage::Superquadric: return "superquadric";
    default: return "deformable";
  }
}

inline nlohmann::ordered_json config_to_json(const FitConfig& cfg) {
  nlohmann::ordered_json j;
  j["max_primitives"] = cfg.max_primitives;
  j["max_semantics"] = cfg.max_semantics;
  j["samples_per_primitive"] = cfg.samples_per_primitive;
  j["feature_dim"] = cfg.feature_dim;
  j["total_steps"] = cfg.total_steps;
  j["seed"] = cfg.seed;
  j["lr_start"] = cfg.lr_start;
  j["lr_end"] = cfg.lr_end;
  j["weight_decay"] = cfg.weight_decay;
  j["gumbel_temperature"] = cfg.gumbel_temperature;
  j["existence_threshold"] = cfg.existence_threshold;
  j["backend"] = backend_name(cfg.backend);
  j["loss"] = {{"lambda_hd", cfg.loss.lambda_hd},
               {"lambda_wd", cfg.loss.lambda_wd},
               {"lambda_compact", cfg.loss.lambda_compact},
               {"lambda_align", cfg.loss.lambda_align},
               {"delta_wd", cfg.loss.delta_wd},
               {"delta_c", cfg.loss.delta_c},
               {"hd_cutoff_frac", cfg.loss.hd_cutoff_frac}};
  return j;
}

// fit_seconds < 0 omits the timings block, keeping same-seed reports
// byte-identical.
inline nlohmann::ordered_json result_to_json(const FitResult& res, const FitConfig& cfg,
                                             const NormalizationRecord& rec, long n_points,
                                             double fit_seconds = -1.0) {
  nlohmann::ordered_json j;
  j["points"] = n_points;
  if (fit_seconds >= 0) j["timings"] = {{"fit_seconds", fit_seconds}};
  j["normalization"] = {{"centroid", {rec.centroid[0], rec.centroid[1], rec.centroid[2]}},
                        {"scale", rec.scale}};
  j["config"] = config_to_json(cfg);
  j["steps_run"] = res.steps_run;
  j["aborted"] = res.aborted;
  j["diagnostic"] = res.diagnostic;
  j["final_loss"] = {{"total", res.final_loss.total},   {"recon", res.final_loss.recon},
                     {"hd", res.final_loss.hd},         {"wd", res.final_loss.wd},
                     {"compact", res.final_loss.compact}, {"align", res.final_loss.align}};
  j["exists"] = res.exists;
  j["instance_counts"] = res.instance_counts;
  j["repeat_map"] = res.repeat_map;
  auto mirrors = nlohmann::ordered_json::array();
  for (MirrorPlane p : res.mirror) mirrors.push_back(mirror_name(p));
  j["mirror"] = mirrors;
  auto dump_set = [&](const std::vector<DsqParams>& set) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : set) arr.push_back(params_to_json(denormalize_params(p, rec)));
    return arr;
  };
  j["instance_primitives"] = dump_set(res.theta_ins);
  j["semantic_primitives"] = dump_set(res.theta_sem);
  j["repeat_primitives"] = dump_set(res.theta_rep);
  auto hist = nlohmann::ordered_json::array();
  for (const auto& e : res.history)
    hist.push_back({{"step", e.step},
                    {"stage", stage_name(e.stage)},
                    {"lr", e.lr},
                    {"total", e.bd.total},
                    {"recon", e.bd.recon},
                    {"hd", e.bd.hd},
                    {"wd", e.bd.wd},
                    {"compact", e.bd.compact},
                    {"align", e.bd.align}});
  j["history"] = hist;
  return j;
}

inline void write_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open file: " + path);
  for (int v : labels) out << v << "\n";
}

// Writes the five output files plus a JSON report next to them:
// instance/semantic label lists and the three primitive meshes (existence
// mask applied, parameters mapped back to the input frame).
inline void export_result(const std::string& dir, const std::string& stem, const FitResult& res,
                          const FitConfig& cfg, const NormalizationRecord& rec, long n_points,
                          double fit_seconds = -1.0) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base = fs::path(dir) / stem;
  write_labels(base.string() + "_labels_instance.txt", res.labels_ins);
  write_labels(base.string() + "_labels_semantic.txt", res.labels_sem);
  auto write_obj = [&](const std::string& suffix, const std::vector<DsqParams>& set) {
    std::ofstream out(base.string() + suffix);
    if (!out) throw std::runtime_error("cannot open file: " + base.string() + suffix);
    std::vector<DsqParams> mapped;
    mapped.reserve(set.size());
    for (const auto& p : set) mapped.push_back(denormalize_params(p, rec));
    write_primitives_obj(out, mapped, res.exists);
  };
  write_obj("_instance.obj", res.theta_ins);
  write_obj("_semantic.obj", res.theta_sem);
  write_obj("_repeat.obj", res.theta_rep);
  std::ofstream rep(base.string() + "_report.json");
  if (!rep) throw std::runtime_error("cannot open file: " + base.string() + "_report.json");
  rep << result_to_json(res, cfg, rec, n_points, fit_seconds).dump(2) << "\n";
}

}  // namespace sqparts
