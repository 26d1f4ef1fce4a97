#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semslam/data.hpp"
#include "semslam/field.hpp"
#include "semslam/loss.hpp"
#include "semslam/render.hpp"
#include "semslam/slam.hpp"

namespace semslam {

inline constexpr const char* kVersion = "0.1.0";

/// Everything one run needs; parsed from a dotted-key config file, finalized
/// (derived values filled in), and written back next to the outputs.
struct RunConfig {
  std::string dataset_path;
  std::string dataset_layout = "synthetic-dump";
  FieldConfig field;
  RenderConfig render;
  LossWeights weights;
  SlamConfig slam;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  int threads = 1;
  bool gt_pose = false;
  int eval_stride = 2;
  int mesh_resolution = 96;
  int mesh_metric_samples = 200000;
  double mesh_threshold_cm = 5.0;
  bool cull_unobserved = true;
  double finest_voxel_m = 0.0;  // when > 0 derives hash.max_resolution

  /// Fills derived values: far plane from the scene diagonal, occupancy
  /// sigma from the truncation distance, hash resolution from voxel size.
  void finalize() {
    field.bounds.validate();
    if (render.far <= 0) render.far = field.bounds.diagonal();
    if (weights.gaussian_sigma <= 0) weights.gaussian_sigma = weights.truncation / 3.0;
    render.truncation = weights.truncation;
    if (finest_voxel_m > 0) {
      const double extent = field.bounds.extent().maxCoeff();
      field.hash.max_resolution =
          std::max(field.hash.base_resolution, static_cast<int>(std::ceil(extent / finest_voxel_m)));
    }
    field.hash.validate();
    field.oneblob.validate();
    render.validate();
    weights.validate();
    slam.validate();
  }
};

namespace detail {

struct ConfigBinder {
  std::map<std::string, std::function<void(const std::string&)>> setters;
  RunConfig* cfg;

  static double to_double(const std::string& v) {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("bad number: " + v);
    return d;
  }
  static int to_int(const std::string& v) { return static_cast<int>(std::llround(to_double(v))); }
  static bool to_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("bad boolean: " + v);
  }
  static Vec3 to_vec3(std::string v) {
    for (char& c : v)
      if (c == '[' || c == ']' || c == ',') c = ' ';
    std::istringstream is(v);
    Vec3 out;
    if (!(is >> out.x() >> out.y() >> out.z())) throw std::invalid_argument("bad vector: " + v);
    return out;
  }
  static std::string to_str(const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    return v;
  }

  void bind_all() {
    auto& c = *cfg;
    auto D = [&](const char* k, double* p) { setters[k] = [p](const std::string& v) { *p = to_double(v); }; };
    auto I = [&](const char* k, int* p) { setters[k] = [p](const std::string& v) { *p = to_int(v); }; };
    auto B = [&](const char* k, bool* p) { setters[k] = [p](const std::string& v) { *p = to_bool(v); }; };
    auto S = [&](const char* k, std::string* p) { setters[k] = [p](const std::string& v) { *p = to_str(v); }; };
    auto V = [&](const char* k, Vec3* p) { setters[k] = [p](const std::string& v) { *p = to_vec3(v); }; };

    S("dataset.path", &c.dataset_path);
    S("dataset.layout", &c.dataset_layout);
    V("scene.bounds_lo", &c.field.bounds.lo);
    V("scene.bounds_hi", &c.field.bounds.hi);
    I("field.latent_dim", &c.field.latent_dim);
    I("field.hidden_width", &c.field.hidden_width);
    I("field.hidden_layers", &c.field.hidden_layers);
    I("field.pooled_dim", &c.field.pooled_dim);
    I("field.image_feature_dim", &c.field.image_feature_dim);
    I("field.oneblob_bins", &c.field.oneblob.bins_per_dim);
    D("field.oneblob_sigma", &c.field.oneblob.kernel_sigma);
    I("field.hash_levels", &c.field.hash.levels);
    I("field.hash_base_resolution", &c.field.hash.base_resolution);
    I("field.hash_max_resolution", &c.field.hash.max_resolution);
    I("field.hash_features_per_level", &c.field.hash.features_per_level);
    I("field.hash_table_size", &c.field.hash.table_size);
    D("field.finest_voxel_m", &c.finest_voxel_m);
    I("render.surface_samples", &c.render.surface_samples);
    I("render.freespace_samples", &c.render.freespace_samples);
    D("render.near", &c.render.near);
    D("render.far", &c.render.far);
    D("loss.lambda_p", &c.weights.lambda_p);
    D("loss.lambda_s", &c.weights.lambda_s);
    D("loss.lambda_l", &c.weights.lambda_l);
    D("loss.lambda_o", &c.weights.lambda_o);
    D("loss.lambda_fs", &c.weights.lambda_fs);
    D("loss.truncation", &c.weights.truncation);
    D("loss.gaussian_sigma", &c.weights.gaussian_sigma);
    I("slam.track_iters", &c.slam.track_iters);
    I("slam.map_iters", &c.slam.map_iters);
    I("slam.ba_every", &c.slam.ba_every);
    I("slam.keyframe_every", &c.slam.keyframe_every);
    I("slam.window", &c.slam.window);
    I("slam.pixels_track", &c.slam.pixels_track);
    I("slam.pixels_map", &c.slam.pixels_map);
    I("slam.init_iters", &c.slam.init_iters);
    I("slam.new_class_iters", &c.slam.new_class_iters);
    D("slam.lr_params", &c.slam.lr_params);
    D("slam.lr_pose_track", &c.slam.lr_pose_track);
    D("slam.lr_pose_map", &c.slam.lr_pose_map);
    I("slam.checkpoint_every", &c.slam.checkpoint_every);
    D("slam.frustum_overlap_threshold", &c.slam.frustum_overlap_threshold);
    setters["run.seed"] = [&c](const std::string& v) { c.seed = std::stoull(v); };
    S("run.out_dir", &c.out_dir);
    I("run.threads", &c.threads);
    B("run.gt_pose", &c.gt_pose);
    I("eval.stride", &c.eval_stride);
    I("eval.mesh_resolution", &c.mesh_resolution);
    I("eval.mesh_samples", &c.mesh_metric_samples);
    D("eval.threshold_cm", &c.mesh_threshold_cm);
    B("eval.cull_unobserved", &c.cull_unobserved);
  }
};

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

/// Dotted-key config text: `section.key = value` lines, optional `[section]`
/// headers, `#` comments. Unknown keys are rejected.
inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  detail::ConfigBinder binder;
  binder.cfg = &base;
  binder.bind_all();
  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    auto it = binder.setters.find(key);
    if (it == binder.setters.end())
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    try {
      it->second(value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + " (" + key + "): " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str());
}

/// The fully resolved configuration, written next to every run's outputs.
inline void write_resolved_config(const RunConfig& c, const std::string& path) {
  std::ofstream os(path);
  os.precision(17);
  os << "# resolved configuration (semslam " << kVersion << ")\n";
  os << "dataset.path = \"" << c.dataset_path << "\"\n";
  os << "dataset.layout = \"" << c.dataset_layout << "\"\n";
  os << "scene.bounds_lo = [" << c.field.bounds.lo.x() << ", " << c.field.bounds.lo.y() << ", "
     << c.field.bounds.lo.z() << "]\n";
  os << "scene.bounds_hi = [" << c.field.bounds.hi.x() << ", " << c.field.bounds.hi.y() << ", "
     << c.field.bounds.hi.z() << "]\n";
  os << "field.latent_dim = " << c.field.latent_dim << "\n";
  os << "field.hidden_width = " << c.field.hidden_width << "\n";
  os << "field.hidden_layers = " << c.field.hidden_layers << "\n";
  os << "field.pooled_dim = " << c.field.pooled_dim << "\n";
  os << "field.image_feature_dim = " << c.field.image_feature_dim << "\n";
  os << "field.oneblob_bins = " << c.field.oneblob.bins_per_dim << "\n";
  os << "field.oneblob_sigma = " << c.field.oneblob.kernel_sigma << "\n";
  os << "field.hash_levels = " << c.field.hash.levels << "\n";
  os << "field.hash_base_resolution = " << c.field.hash.base_resolution << "\n";
  os << "field.hash_max_resolution = " << c.field.hash.max_resolution << "\n";
  os << "field.hash_features_per_level = " << c.field.hash.features_per_level << "\n";
  os << "field.hash_table_size = " << c.field.hash.table_size << "\n";
  os << "render.surface_samples = " << c.render.surface_samples << "\n";
  os << "render.freespace_samples = " << c.render.freespace_samples << "\n";
  os << "render.near = " << c.render.near << "\n";
  os << "render.far = " << c.render.far << "\n";
  os << "loss.lambda_p = " << c.weights.lambda_p << "\n";
  os << "loss.lambda_s = " << c.weights.lambda_s << "\n";
  os << "loss.lambda_l = " << c.weights.lambda_l << "\n";
  os << "loss.lambda_o = " << c.weights.lambda_o << "\n";
  os << "loss.lambda_fs = " << c.weights.lambda_fs << "\n";
  os << "loss.truncation = " << c.weights.truncation << "\n";
  os << "loss.gaussian_sigma = " << c.weights.gaussian_sigma << "\n";
  os << "slam.track_iters = " << c.slam.track_iters << "\n";
  os << "slam.map_iters = " << c.slam.map_iters << "\n";
  os << "slam.ba_every = " << c.slam.ba_every << "\n";
  os << "slam.keyframe_every = " << c.slam.keyframe_every << "\n";
  os << "slam.window = " << c.slam.window << "\n";
  os << "slam.pixels_track = " << c.slam.pixels_track << "\n";
  os << "slam.pixels_map = " << c.slam.pixels_map << "\n";
  os << "slam.init_iters = " << c.slam.init_iters << "\n";
  os << "slam.new_class_iters = " << c.slam.new_class_iters << "\n";
  os << "slam.lr_params = " << c.slam.lr_params << "\n";
  os << "slam.lr_pose_track = " << c.slam.lr_pose_track << "\n";
  os << "slam.lr_pose_map = " << c.slam.lr_pose_map << "\n";
  os << "slam.checkpoint_every = " << c.slam.checkpoint_every << "\n";
  os << "slam.frustum_overlap_threshold = " << c.slam.frustum_overlap_threshold << "\n";
  os << "run.seed = " << c.seed << "\n";
  os << "run.out_dir = \"" << c.out_dir << "\"\n";
  os << "run.threads = " << c.threads << "\n";
  os << "run.gt_pose = " << (c.gt_pose ? "true" : "false") << "\n";
  os << "eval.stride = " << c.eval_stride << "\n";
  os << "eval.mesh_resolution = " << c.mesh_resolution << "\n";
  os << "eval.mesh_samples = " << c.mesh_metric_samples << "\n";
  os << "eval.threshold_cm = " << c.mesh_threshold_cm << "\n";
  os << "eval.cull_unobserved = " << (c.cull_unobserved ? "true" : "false") << "\n";
}

/// A toy-scale preset tuned for minutes-scale CPU runs on the default
/// synthetic scene (3 m room, 80x60 images, 5 classes).
inline RunConfig toy_config() {
  RunConfig c;
  c.field.bounds.lo = Vec3(-1.8, -1.8, -1.8);
  c.field.bounds.hi = Vec3(1.8, 1.8, 1.8);
  c.field.latent_dim = 12;
  c.field.hidden_width = 32;
  c.field.pooled_dim = 12;
  c.field.image_feature_dim = 8;
  c.field.oneblob.bins_per_dim = 16;
  c.field.oneblob.kernel_sigma = 1.0 / 16.0;
  c.field.hash.levels = 6;
  c.field.hash.base_resolution = 8;
  c.field.hash.max_resolution = 128;
  c.field.hash.features_per_level = 2;
  c.field.hash.table_size = 1 << 14;
  c.render.surface_samples = 8;
  c.render.freespace_samples = 12;
  c.slam.track_iters = 20;
  c.slam.map_iters = 60;
  c.slam.ba_every = 5;
  c.slam.keyframe_every = 5;
  c.slam.window = 4;
  c.slam.pixels_track = 120;
  c.slam.pixels_map = 300;
  c.slam.init_iters = 400;
  c.slam.new_class_iters = 100;
  c.slam.lr_params = 0.01;
  c.slam.lr_pose_track = 0.002;
  c.slam.lr_pose_map = 0.001;
  c.eval_stride = 2;
  c.mesh_resolution = 72;
  c.mesh_metric_samples = 40000;
  return c;
}

}  // namespace semslam
