#include "gflow/config.hpp"

#include <fstream>
#include <sstream>

#include "gflow/error.hpp"

namespace gflow {

namespace {

Json vec(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }
Json vec(const Vec2& v) { return Json::array({v.x(), v.y()}); }

Json motion_json(const ClusterMotion& m) {
  return {{"velocity", vec(m.velocity)},
          {"angular_velocity", m.angular_velocity},
          {"scale_rate", m.scale_rate},
          {"pivot", m.pivot ? vec(*m.pivot) : Json(nullptr)}};
}

Json cluster_json(const ClusterSpec& c) {
  return {{"center", vec(c.center)},
          {"count", c.count},
          {"spread", vec(c.spread)},
          {"scale", c.scale},
          {"scale_jitter", c.scale_jitter},
          {"opacity", c.opacity},
          {"color", vec(c.color)},
          {"color_jitter", c.color_jitter},
          {"motion", motion_json(c.motion)}};
}

Json render_json(const RenderConfig& r) {
  return {{"tile_size", r.tile_size},
          {"top_k", r.top_k},
          {"alpha_threshold", r.alpha_threshold},
          {"transmittance_floor", r.transmittance_floor},
          {"background", vec(r.background)},
          {"near", r.near}};
}

const char* norm_name(FlowNorm n) { return n == FlowNorm::L1 ? "l1" : "l2"; }

bool is_cluster_list(const std::string& path) { return path == "scene.clusters"; }

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

Json merge_value(const Json& base, const Json& over, const std::string& path) {
  if (base.is_object()) {
    if (!over.is_object()) throw ConfigError("config: " + path + " must be an object");
    Json out = base;
    for (auto it = over.begin(); it != over.end(); ++it) {
      const std::string key_path = join(path, it.key());
      if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key_path + "'");
      out[it.key()] = merge_value(base[it.key()], it.value(), key_path);
    }
    return out;
  }
  if (is_cluster_list(path)) {
    if (!over.is_array()) throw ConfigError("config: " + path + " must be an array");
    const Json tmpl = cluster_json(ClusterSpec{});
    Json out = Json::array();
    for (std::size_t i = 0; i < over.size(); ++i) out.push_back(merge_value(tmpl, over[i], path + "." + std::to_string(i)));
    return out;
  }
  if (base.is_array()) {
    if (!over.is_array()) throw ConfigError("config: " + path + " must be an array");
    return over;
  }
  if (base.is_null()) {
    // Optional vectors default to null.
    if (!over.is_null() && !over.is_array()) throw ConfigError("config: " + path + " must be null or an array");
    return over;
  }
  if (base.is_boolean() && !over.is_boolean()) throw ConfigError("config: " + path + " must be a boolean");
  if (base.is_number() && !over.is_number()) throw ConfigError("config: " + path + " must be a number");
  if (base.is_string() && !over.is_string()) throw ConfigError("config: " + path + " must be a string");
  return over;
}

// Typed readers over a defaulted tree.

double num(const Json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError("config: " + path + " must be a number");
  return j.get<double>();
}

int integer(const Json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError("config: " + path + " must be an integer");
  return j.get<int>();
}

Vec3 vec3(const Json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("config: " + path + " must be a 3-vector");
  return {num(j[0], path), num(j[1], path), num(j[2], path)};
}

Vec2 vec2(const Json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("config: " + path + " must be a 2-vector");
  return {num(j[0], path), num(j[1], path)};
}

std::vector<int> int_list(const Json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError("config: " + path + " must be an array");
  std::vector<int> out;
  for (const Json& e : j) out.push_back(integer(e, path));
  return out;
}

FlowNorm norm_of(const Json& j, const std::string& path) {
  const std::string s = j.get<std::string>();
  if (s == "l1") return FlowNorm::L1;
  if (s == "l2") return FlowNorm::L2;
  throw ConfigError("config: " + path + " must be \"l1\" or \"l2\"");
}

RenderConfig parse_render(const Json& j) {
  RenderConfig r;
  r.tile_size = integer(j["tile_size"], "render.tile_size");
  r.top_k = integer(j["top_k"], "render.top_k");
  r.alpha_threshold = num(j["alpha_threshold"], "render.alpha_threshold");
  r.transmittance_floor = num(j["transmittance_floor"], "render.transmittance_floor");
  r.background = vec3(j["background"], "render.background");
  r.near = num(j["near"], "render.near");
  try {
    r.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return r;
}

ClusterSpec parse_cluster(const Json& j, const std::string& path) {
  ClusterSpec c;
  c.center = vec3(j["center"], path + ".center");
  c.count = integer(j["count"], path + ".count");
  c.spread = vec2(j["spread"], path + ".spread");
  c.scale = num(j["scale"], path + ".scale");
  c.scale_jitter = num(j["scale_jitter"], path + ".scale_jitter");
  c.opacity = num(j["opacity"], path + ".opacity");
  c.color = vec3(j["color"], path + ".color");
  c.color_jitter = num(j["color_jitter"], path + ".color_jitter");
  const Json& m = j["motion"];
  c.motion.velocity = vec3(m["velocity"], path + ".motion.velocity");
  c.motion.angular_velocity = num(m["angular_velocity"], path + ".motion.angular_velocity");
  c.motion.scale_rate = num(m["scale_rate"], path + ".motion.scale_rate");
  if (!m["pivot"].is_null()) c.motion.pivot = vec3(m["pivot"], path + ".motion.pivot");
  return c;
}

Json base_defaults() {
  const SceneSpec scene;
  const TrainConfig train;
  const GradcheckOptions gc;
  const InitNoise noise;
  Json cameras = Json::array();
  for (const Vec3& c : scene.cameras) cameras.push_back(vec(c));
  return {
      {"seed", 0},
      {"render", render_json(RenderConfig{})},
      {"scene",
       {{"width", scene.width},
        {"height", scene.height},
        {"focal", scene.focal},
        {"last_frame", scene.last_frame},
        {"cameras", cameras},
        {"thickness", scene.thickness},
        {"clusters", Json::array()}}},
      {"init",
       {{"mean", noise.mean},
        {"rotation", noise.rotation},
        {"log_scale", noise.log_scale},
        {"opacity_logit", noise.opacity_logit},
        {"color", noise.color}}},
      {"train",
       {{"iterations", train.iterations},
        {"lambda_flow", train.lambda_flow},
        {"lambda_other", train.lambda_other},
        {"beta1", train.beta1},
        {"beta2", train.beta2},
        {"epsilon", train.epsilon},
        {"norm", norm_name(train.norm)},
        {"isotropic", train.isotropic},
        {"detach_weights", train.detach_weights},
        {"flow_coverage_threshold", train.flow_coverage_threshold},
        {"scale_mean_lr_by_extent", train.scale_mean_lr_by_extent},
        {"lr",
         {{"mean", train.lr.mean},
          {"rotation", train.lr.rotation},
          {"log_scale", train.lr.log_scale},
          {"opacity", train.lr.opacity},
          {"color", train.lr.color},
          {"mean_final_ratio", train.lr.mean_final_ratio},
          {"final_ratio", train.lr.final_ratio}}},
        {"flow_views", Json::array()},
        {"train_views", Json::array()}}},
      {"eval", {{"views", Json::array()}}},
      {"output", {{"preview_every", 50}}},
      {"gradcheck",
       {{"gaussians", gc.gaussians},
        {"width", gc.width},
        {"height", gc.height},
        {"step", gc.step},
        {"tolerance", gc.tolerance},
        {"lambda_flow", gc.lambda_flow},
        {"norm", norm_name(gc.norm)},
        {"isotropic", gc.isotropic},
        {"richardson_step", gc.richardson_step},
        {"scenes", 1}}},
  };
}

}  // namespace

Json default_config() { return preset_config("translate"); }

std::vector<std::string> preset_names() { return {"translate", "rotate", "swap", "nvs"}; }

Json preset_config(std::string_view name) {
  Json c = base_defaults();
  if (name == "translate") {
    // One cluster moving 2 px per frame to the right.
    ClusterSpec cl;
    cl.center = Vec3(-0.25, 0, 4);
    cl.motion.velocity = Vec3(2.0 * 4.0 / 64.0, 0, 0);
    c["scene"]["clusters"] = Json::array({cluster_json(cl)});
    c["init"] = {{"mean", 0.01}, {"rotation", 0.05}, {"log_scale", 0.05}, {"opacity_logit", 0.2}, {"color", 0.03}};
    c["train"]["iterations"] = 300;
    c["train"]["scale_mean_lr_by_extent"] = false;
    c["train"]["lr"]["mean"] = 0.01;
    return c;
  }
  if (name == "rotate") {
    ClusterSpec cl;
    cl.count = 10;
    cl.spread = Vec2(0.5, 0.2);
    cl.motion.angular_velocity = 0.1;
    c["scene"]["clusters"] = Json::array({cluster_json(cl)});
    c["init"] = {{"mean", 0.01}, {"rotation", 0.05}, {"log_scale", 0.05}, {"opacity_logit", 0.2}, {"color", 0.03}};
    return c;
  }
  if (name == "swap") {
    // Two identical blobs that trade places in one frame.
    ClusterSpec a;
    a.count = 1;
    a.spread = Vec2::Zero();
    a.scale = 0.4;
    a.scale_jitter = 0.0;
    a.opacity = 0.98;
    a.color = Vec3(0.9, 0.8, 0.3);
    a.color_jitter = 0.0;
    ClusterSpec b = a;
    a.center = Vec3(-0.5, 0, 4);
    b.center = Vec3(0.5, 0, 4);
    a.motion.velocity = Vec3(1.0, 0, 0);
    b.motion.velocity = Vec3(-1.0, 0, 0);
    c["scene"].update({{"width", 32}, {"height", 32}, {"focal", 32.0}, {"last_frame", 1}});
    c["scene"]["clusters"] = Json::array({cluster_json(a), cluster_json(b)});
    c["init"] = {{"mean", 0.03}, {"rotation", 0.05}, {"log_scale", 0.05}, {"opacity_logit", 0.2}, {"color", 0.05}};
    c["train"]["iterations"] = 600;
    c["train"]["scale_mean_lr_by_extent"] = false;
    c["train"]["lr"].update({{"mean", 0.01}, {"mean_final_ratio", 1.0}, {"opacity", 0.01}, {"log_scale", 0.002}});
    return c;
  }
  if (name == "nvs") {
    // Static backdrop plus one fast cluster, seen by three cameras; the
    // middle camera is held out.
    ClusterSpec bg;
    bg.center = Vec3(0, 0, 7);
    bg.count = 24;
    bg.spread = Vec2(2.0, 2.0);
    bg.scale = 0.5;
    bg.opacity = 0.95;
    bg.color = Vec3(0.3, 0.5, 0.4);
    bg.color_jitter = 0.3;
    ClusterSpec fg;
    fg.center = Vec3(-1.0, 0, 4);
    fg.count = 6;
    fg.spread = Vec2(0.25, 0.25);
    fg.scale = 0.15;
    fg.opacity = 0.95;
    fg.color = Vec3(0.9, 0.7, 0.2);
    fg.color_jitter = 0.1;
    fg.motion.velocity = Vec3(0.7, 0, 0);
    c["scene"].update({{"width", 48}, {"height", 48}, {"focal", 48.0}, {"last_frame", 3}});
    c["scene"]["cameras"] = Json::array({vec(Vec3(-0.5, 0, 0)), vec(Vec3(0, 0, 0)), vec(Vec3(0.5, 0, 0))});
    c["scene"]["clusters"] = Json::array({cluster_json(bg), cluster_json(fg)});
    c["init"] = {{"mean", 0.02}, {"rotation", 0.05}, {"log_scale", 0.05}, {"opacity_logit", 0.2}, {"color", 0.03}};
    c["train"]["iterations"] = 600;
    c["train"]["lambda_flow"] = 0.5;
    c["train"]["scale_mean_lr_by_extent"] = false;
    c["train"]["lr"]["mean"] = 0.01;
    c["train"]["train_views"] = Json::array({0, 2});
    c["eval"]["views"] = Json::array({1});
    return c;
  }
  throw ConfigError("config: unknown preset '" + std::string(name) + "'");
}

Json merge_config(const Json& base, const Json& overrides) { return merge_value(base, overrides, ""); }

void apply_override(Json& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("config: override must look like key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));

  Json* node = &config;
  std::string path;
  std::stringstream parts(key);
  for (std::string part; std::getline(parts, part, '.');) {
    if (part.empty()) throw ConfigError("config: empty segment in '" + key + "'");
    path = join(path, part);
    if (node->is_object()) {
      if (!node->contains(part)) throw ConfigError("config: unknown key '" + path + "'");
      node = &(*node)[part];
    } else if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(part, &used);
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw ConfigError("config: '" + path + "' needs a numeric index");
      }
      if (idx >= node->size()) throw ConfigError("config: index out of range in '" + path + "'");
      node = &(*node)[idx];
    } else {
      throw ConfigError("config: '" + path + "' is not a container");
    }
  }
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = merge_value(*node, value, path);
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: " + path.string() + " is not valid JSON");
  return j;
}

Json load_config(const std::filesystem::path& path) { return merge_config(default_config(), read_json(path)); }

RunConfig parse_run_config(const Json& config) {
  // Completes partial trees so callers may hand in the raw file contents.
  const Json c = merge_config(default_config(), config);
  RunConfig rc;
  rc.tree = c;
  if (!c["seed"].is_number_integer() || c["seed"].get<std::int64_t>() < 0) throw ConfigError("config: seed must be a non-negative integer");
  rc.seed = c["seed"].get<std::uint64_t>();

  const RenderConfig render = parse_render(c["render"]);
  const Json& s = c["scene"];
  rc.scene.width = integer(s["width"], "scene.width");
  rc.scene.height = integer(s["height"], "scene.height");
  rc.scene.focal = num(s["focal"], "scene.focal");
  rc.scene.last_frame = integer(s["last_frame"], "scene.last_frame");
  rc.scene.thickness = num(s["thickness"], "scene.thickness");
  rc.scene.cameras.clear();
  for (const Json& cam : s["cameras"]) rc.scene.cameras.push_back(vec3(cam, "scene.cameras"));
  for (std::size_t i = 0; i < s["clusters"].size(); ++i)
    rc.scene.clusters.push_back(parse_cluster(s["clusters"][i], "scene.clusters." + std::to_string(i)));
  rc.scene.render = render;
  rc.scene.validate();

  const Json& in = c["init"];
  rc.init_noise.mean = num(in["mean"], "init.mean");
  rc.init_noise.rotation = num(in["rotation"], "init.rotation");
  rc.init_noise.log_scale = num(in["log_scale"], "init.log_scale");
  rc.init_noise.opacity_logit = num(in["opacity_logit"], "init.opacity_logit");
  rc.init_noise.color = num(in["color"], "init.color");

  const Json& t = c["train"];
  TrainConfig& tc = rc.train;
  tc.iterations = integer(t["iterations"], "train.iterations");
  tc.lambda_flow = num(t["lambda_flow"], "train.lambda_flow");
  tc.lambda_other = num(t["lambda_other"], "train.lambda_other");
  tc.beta1 = num(t["beta1"], "train.beta1");
  tc.beta2 = num(t["beta2"], "train.beta2");
  tc.epsilon = num(t["epsilon"], "train.epsilon");
  tc.norm = norm_of(t["norm"], "train.norm");
  tc.isotropic = t["isotropic"].get<bool>();
  tc.detach_weights = t["detach_weights"].get<bool>();
  tc.flow_coverage_threshold = num(t["flow_coverage_threshold"], "train.flow_coverage_threshold");
  tc.scale_mean_lr_by_extent = t["scale_mean_lr_by_extent"].get<bool>();
  const Json& lr = t["lr"];
  tc.lr.mean = num(lr["mean"], "train.lr.mean");
  tc.lr.rotation = num(lr["rotation"], "train.lr.rotation");
  tc.lr.log_scale = num(lr["log_scale"], "train.lr.log_scale");
  tc.lr.opacity = num(lr["opacity"], "train.lr.opacity");
  tc.lr.color = num(lr["color"], "train.lr.color");
  tc.lr.mean_final_ratio = num(lr["mean_final_ratio"], "train.lr.mean_final_ratio");
  tc.lr.final_ratio = num(lr["final_ratio"], "train.lr.final_ratio");
  tc.flow_views = int_list(t["flow_views"], "train.flow_views");
  tc.train_views = int_list(t["train_views"], "train.train_views");
  tc.seed = rc.seed;
  tc.render = render;
  tc.validate();

  const int views = static_cast<int>(rc.scene.cameras.size());
  auto check_views = [&](const std::vector<int>& list, const std::string& path) {
    for (const int v : list)
      if (v < 0 || v >= views) throw ConfigError("config: " + path + " names a camera that does not exist");
  };
  check_views(tc.flow_views, "train.flow_views");
  check_views(tc.train_views, "train.train_views");
  rc.eval_views = int_list(c["eval"]["views"], "eval.views");
  check_views(rc.eval_views, "eval.views");

  rc.preview_every = integer(c["output"]["preview_every"], "output.preview_every");
  if (rc.preview_every < 0) throw ConfigError("config: output.preview_every must be >= 0");

  const Json& g = c["gradcheck"];
  GradcheckOptions& go = rc.gradcheck;
  go.gaussians = integer(g["gaussians"], "gradcheck.gaussians");
  go.width = integer(g["width"], "gradcheck.width");
  go.height = integer(g["height"], "gradcheck.height");
  go.step = num(g["step"], "gradcheck.step");
  go.tolerance = num(g["tolerance"], "gradcheck.tolerance");
  go.lambda_flow = num(g["lambda_flow"], "gradcheck.lambda_flow");
  go.norm = norm_of(g["norm"], "gradcheck.norm");
  go.isotropic = g["isotropic"].get<bool>();
  go.richardson_step = num(g["richardson_step"], "gradcheck.richardson_step");
  rc.gradcheck_scenes = integer(g["scenes"], "gradcheck.scenes");
  if (go.gaussians < 1 || go.width < 1 || go.height < 1 || !(go.step > 0.0) || !(go.tolerance > 0.0) ||
      rc.gradcheck_scenes < 1)
    throw ConfigError("config: gradcheck sizes, step, tolerance and scenes must be positive");
  return rc;
}

std::string config_echo(const Json& config) { return config.dump(); }

}  // namespace gflow
