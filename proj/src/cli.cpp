#include "gflow/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "gflow/config.hpp"
#include "gflow/dynamics.hpp"
#include "gflow/error.hpp"
#include "gflow/flow.hpp"
#include "gflow/gradcheck.hpp"
#include "gflow/io.hpp"

namespace fs = std::filesystem;

namespace gflow::cli {

namespace {

/// Raised for a gradcheck tolerance breach.
class ToleranceBreach : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config;
  std::string preset;
  std::vector<std::string> overrides;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string checkpoint;
  bool isotropic = false;
};

struct Context {
  CommonOptions opts;
  RunConfig rc;
  fs::path out;
};

std::string numbered(const char* stem, int k, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", stem, k, ext);
  return buf;
}

/// View 0 writes to the output root, view v > 0 to view_XX/.
fs::path view_dir(const fs::path& root, std::size_t view) {
  if (view == 0) return root;
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%02zu", view);
  return root / buf;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

Context make_context(const CommonOptions& opts, bool writes) {
  Context ctx;
  ctx.opts = opts;
  Json tree = opts.preset.empty() ? default_config() : preset_config(opts.preset);
  if (!opts.config.empty()) tree = merge_config(tree, read_json(opts.config));
  for (const std::string& o : opts.overrides) apply_override(tree, o);
  if (opts.seed) tree["seed"] = *opts.seed;
  ctx.rc = parse_run_config(tree);
  if (opts.threads < 0) throw ConfigError("--threads must be >= 0");
  ctx.rc.scene.render.threads = opts.threads;
  ctx.rc.train.render.threads = opts.threads;
  if (opts.isotropic) ctx.rc.train.isotropic = ctx.rc.gradcheck.isotropic = true;
  ctx.out = opts.out;
  if (writes) fs::create_directories(ctx.out);
  return ctx;
}

Json meta_base(const Context& ctx, const std::string& command) {
  return {{"command", command},
          {"seed", ctx.rc.seed},
          {"threads", ctx.opts.threads},
          {"isotropic", ctx.rc.train.isotropic},
          {"config", ctx.rc.tree}};
}

void write_json(const fs::path& path, const Json& j) {
  const std::string s = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

void write_text(const fs::path& path, const std::string& s) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

DynamicField load_field(const Context& ctx, int last_frame) {
  if (ctx.opts.checkpoint.empty()) throw ConfigError("--checkpoint is required for this command");
  Checkpoint ck = load_checkpoint(ctx.opts.checkpoint);
  if (ck.field.last_frame() != last_frame)
    throw ConfigError("checkpoint has " + std::to_string(ck.field.frames()) + " frames but the scene has " +
                      std::to_string(last_frame + 1));
  return std::move(ck.field);
}

FlowField field_flow(const DynamicField& field, int k, const Camera& cam, const RenderConfig& render_cfg,
                     bool isotropic) {
  const DynamicsPair pair = make_pair(field_at(field, k), cam, field_at(field, k + 1), cam, render_cfg);
  return isotropic ? gaussian_flow_isotropic(pair) : gaussian_flow(pair);
}

std::vector<SceneSequence> select(const std::vector<SceneSequence>& views, const std::vector<int>& ids) {
  if (ids.empty()) return views;
  std::vector<SceneSequence> out;
  for (const int v : ids) out.push_back(views[v]);
  return out;
}

Json report_json(const EvalReport& r) {
  return {{"psnr", r.psnr},
          {"psnr_dynamic", r.psnr_dynamic},
          {"epe", r.epe},
          {"epe_dynamic", r.epe_dynamic},
          {"dynamic_pixels", r.dynamic_pixels}};
}

/// Metrics shared by fit's summary and eval.
Json metrics(const Context& ctx, const DynamicField& field, const GeneratedScene& scene) {
  const RenderConfig& render_cfg = ctx.rc.train.render;
  const bool iso = ctx.rc.train.isotropic;
  Json m;
  m["eval"] = report_json(evaluate(field, select(scene.views, ctx.rc.eval_views), render_cfg, iso));
  m["train"] = report_json(evaluate(field, select(scene.views, ctx.rc.train.train_views), render_cfg, iso));
  m["motion_epe"] = motion_endpoint_error(field, scene.truth, scene.views[0].cameras[0], render_cfg.near);
  return m;
}

void print_metrics(std::ostream& out, const Json& m) {
  out << std::fixed << std::setprecision(4);
  out << "split   psnr      psnr_dyn  epe       epe_dyn   dyn_px\n";
  for (const char* split : {"train", "eval"}) {
    const Json& r = m[split];
    out << std::left << std::setw(8) << split << std::setw(10) << r["psnr"].get<double>() << std::setw(10)
        << r["psnr_dynamic"].get<double>() << std::setw(10) << r["epe"].get<double>() << std::setw(10)
        << r["epe_dynamic"].get<double>() << r["dynamic_pixels"].get<long>() << "\n";
  }
  out << "motion endpoint error " << m["motion_epe"].get<double>() << " px\n";
  out.unsetf(std::ios::floatfield);
}

/// Target | render | Gaussian flow 0 -> 1, side by side.
Image preview_strip(const DynamicField& field, const SceneSequence& seq, const RenderConfig& render_cfg,
                    bool isotropic) {
  const Camera& cam = seq.cameras[0];
  const Image target = clamp01(seq.frames[0]);
  const Image rendered = clamp01(render(field_at(field, 0), cam, render_cfg).image);
  Image flow_img(cam.width, cam.height, Vec3::Ones());
  if (field.last_frame() >= 1) flow_img = flow_to_color(field_flow(field, 0, cam, render_cfg, isotropic));
  Image strip(3 * cam.width, cam.height);
  const Image* parts[3] = {&target, &rendered, &flow_img};
  for (int r = 0; r < cam.height; ++r)
    for (int p = 0; p < 3; ++p)
      for (int c = 0; c < cam.width; ++c)
        strip.rgb.row(r * strip.width + p * cam.width + c) = parts[p]->rgb.row(r * cam.width + c);
  return strip;
}

int cmd_gen_scene(const Context& ctx, std::ostream& out) {
  const GeneratedScene scene = generate_scene(ctx.rc.scene, ctx.rc.seed);
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    const fs::path dir = view_dir(ctx.out, v);
    fs::create_directories(dir);
    const SceneSequence& seq = scene.views[v];
    for (int k = 0; k <= seq.last_frame(); ++k) write_png(clamp01(seq.frames[k]), dir / numbered("frame", k, "png"));
    for (int k = 0; k < seq.last_frame(); ++k) write_flo(seq.flows[k], dir / numbered("flow", k, "flo"));
  }
  save_checkpoint({scene.truth, config_echo(ctx.rc.tree), ctx.rc.seed}, ctx.out / "ckpt.bin");
  Json meta = meta_base(ctx, "gen-scene");
  meta["gaussians"] = scene.truth.size();
  meta["views"] = scene.views.size();
  meta["frames"] = scene.truth.frames();
  write_json(ctx.out / "meta.json", meta);
  out << "generated " << scene.truth.size() << " Gaussians, " << scene.views.size() << " view(s), "
      << scene.truth.frames() << " frames in " << ctx.out.string() << "\n";
  return kExitOk;
}

int cmd_render(const Context& ctx, std::ostream& out) {
  const GeneratedScene scene = generate_scene(ctx.rc.scene, ctx.rc.seed);
  const DynamicField field = load_field(ctx, ctx.rc.scene.last_frame);
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    const fs::path dir = view_dir(ctx.out, v);
    fs::create_directories(dir);
    for (int k = 0; k < field.frames(); ++k) {
      const RenderOutput r = render(field_at(field, k), scene.views[v].cameras[k], ctx.rc.train.render);
      write_png(clamp01(r.image), dir / numbered("frame", k, "png"));
    }
  }
  write_json(ctx.out / "meta.json", meta_base(ctx, "render"));
  out << "rendered " << field.frames() << " frames x " << scene.views.size() << " view(s)\n";
  return kExitOk;
}

int cmd_flow(const Context& ctx, std::ostream& out) {
  const GeneratedScene scene = generate_scene(ctx.rc.scene, ctx.rc.seed);
  const DynamicField field = load_field(ctx, ctx.rc.scene.last_frame);
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    const fs::path dir = view_dir(ctx.out, v);
    fs::create_directories(dir);
    for (int k = 0; k < field.last_frame(); ++k) {
      const FlowField f = field_flow(field, k, scene.views[v].cameras[k], ctx.rc.train.render, ctx.rc.train.isotropic);
      write_flo(f, dir / numbered("flow", k, "flo"));
      write_png(flow_to_color(f), dir / numbered("flow", k, "png"));
    }
  }
  write_json(ctx.out / "meta.json", meta_base(ctx, "flow"));
  out << "wrote " << field.last_frame() << " flow pair(s) x " << scene.views.size() << " view(s) ("
      << (ctx.rc.train.isotropic ? "isotropic" : "full") << ")\n";
  return kExitOk;
}

int cmd_fit(const Context& ctx, std::ostream& out) {
  const GeneratedScene scene = generate_scene(ctx.rc.scene, ctx.rc.seed);
  DynamicField init = ctx.opts.checkpoint.empty()
                          ? initialize_field(scene.truth, ctx.rc.init_noise, ctx.rc.init_seed())
                          : load_field(ctx, ctx.rc.scene.last_frame);
  const SceneSequence& preview_view = scene.views[ctx.rc.eval_views.empty() ? 0 : ctx.rc.eval_views[0]];
  const int every = ctx.rc.preview_every;
  const FitCallback preview = [&](int it, const LossBreakdown&, const DynamicField& f) {
    if (every > 0 && it % every == 0)
      write_png(preview_strip(f, preview_view, ctx.rc.train.render, ctx.rc.train.isotropic),
                ctx.out / numbered("preview", it, "png"));
  };
  const FitResult result = fit(scene.views, std::move(init), ctx.rc.train, preview);

  std::ostringstream csv;
  csv << "# config: " << config_echo(ctx.rc.tree) << "\n";
  csv << "# seed: " << ctx.rc.seed << " threads: " << ctx.opts.threads << "\n";
  csv << "iteration,photometric,flow,other,total\n";
  auto row = [&](int it, const LossBreakdown& l) {
    csv << it << "," << fmt(l.photometric) << "," << fmt(l.flow) << "," << fmt(l.other) << "," << fmt(l.total) << "\n";
  };
  for (const LossRecord& r : result.log) row(r.iteration, r.loss);
  row(ctx.rc.train.iterations, result.final_loss);
  write_text(ctx.out / "loss.csv", csv.str());
  save_checkpoint({result.field, config_echo(ctx.rc.tree), ctx.rc.seed}, ctx.out / "ckpt.bin");

  const Json m = metrics(ctx, result.field, scene);
  Json meta = meta_base(ctx, "fit");
  meta["iterations"] = ctx.rc.train.iterations;
  meta["final_loss"] = {{"photometric", result.final_loss.photometric},
                        {"flow", result.final_loss.flow},
                        {"other", result.final_loss.other},
                        {"total", result.final_loss.total}};
  meta["metrics"] = m;
  write_json(ctx.out / "meta.json", meta);
  out << "fit " << ctx.rc.train.iterations << " iterations, final loss " << fmt(result.final_loss.total) << "\n";
  print_metrics(out, m);
  return kExitOk;
}

int cmd_eval(const Context& ctx, std::ostream& out) {
  const GeneratedScene scene = generate_scene(ctx.rc.scene, ctx.rc.seed);
  const DynamicField field = load_field(ctx, ctx.rc.scene.last_frame);
  const Json m = metrics(ctx, field, scene);
  Json meta = meta_base(ctx, "eval");
  meta["metrics"] = m;
  write_json(ctx.out / "eval.json", meta);
  print_metrics(out, m);
  return kExitOk;
}

int cmd_gradcheck(const Context& ctx, std::ostream& out) {
  const GradcheckOptions& go = ctx.rc.gradcheck;
  Json reports = Json::array();
  double worst = 0.0;
  for (int s = 0; s < ctx.rc.gradcheck_scenes; ++s) {
    const std::uint64_t seed = ctx.rc.seed + static_cast<std::uint64_t>(s);
    const GradcheckReport rep = gradcheck(seed, go);
    out << "scene seed " << seed << "\n";
    out << "  loss         t  block          max_rel_err  checked  skipped\n";
    Json blocks = Json::array();
    for (const BlockReport& b : rep.blocks) {
      char line[160];
      std::snprintf(line, sizeof line, "  %-12s %d  %-13s  %.3e    %7d  %7d\n", to_string(b.loss).c_str(), b.timestep,
                    b.block.c_str(), b.max_rel_error, b.checked, b.skipped);
      out << line;
      blocks.push_back({{"loss", to_string(b.loss)},
                        {"timestep", b.timestep},
                        {"block", b.block},
                        {"max_rel_error", b.max_rel_error},
                        {"checked", b.checked},
                        {"skipped", b.skipped}});
    }
    out << "  richardson ratio " << rep.richardson_ratio << "\n";
    worst = std::max(worst, rep.max_rel_error);
    reports.push_back({{"seed", seed},
                       {"max_rel_error", rep.max_rel_error},
                       {"richardson_ratio", rep.richardson_ratio},
                       {"blocks", blocks}});
  }
  const bool ok = worst < go.tolerance;
  out << "max rel err " << std::scientific << std::setprecision(3) << worst << " (tolerance " << go.tolerance << ") "
      << (ok ? "PASS" : "FAIL") << "\n";
  out.unsetf(std::ios::floatfield);
  Json meta = meta_base(ctx, "gradcheck");
  meta["max_rel_error"] = worst;
  meta["passed"] = ok;
  meta["scenes"] = reports;
  write_json(ctx.out / "report.json", meta);
  if (!ok) throw ToleranceBreach("gradcheck: max relative error exceeds tolerance");
  return kExitOk;
}

int cmd_config(const Context& ctx, std::ostream& out) {
  out << ctx.rc.tree.dump(2) << "\n";
  return kExitOk;
}

void add_common(CLI::App* sub, CommonOptions& o, bool needs_checkpoint, bool flow_flag) {
  sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--preset", o.preset, "start from a named preset (translate, rotate, swap, nvs)");
  sub->add_option("--set", o.overrides, "dotted override key=value (repeatable)");
  sub->add_option("--out", o.out, "output directory")->capture_default_str();
  sub->add_option("--seed", o.seed, "overrides the config seed");
  sub->add_option("--threads", o.threads, "rasterizer workers; 1 is serial, 0 all cores")->capture_default_str();
  if (needs_checkpoint) sub->add_option("--checkpoint", o.checkpoint, "field checkpoint")->check(CLI::ExistingFile);
  if (flow_flag) sub->add_flag("--isotropic", o.isotropic, "translation-only Gaussian flow");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gaussian splatting with Gaussian flow: render, supervise and fit 4D fields"};
  app.require_subcommand(1);
  CommonOptions opts;
  struct Entry {
    const char* name;
    const char* help;
    bool checkpoint;
    bool flow;
    bool writes;
    int (*fn)(const Context&, std::ostream&);
  };
  const Entry entries[] = {
      {"gen-scene", "generate a synthetic scene: frames, reference flow, ground-truth checkpoint", false, false, true,
       cmd_gen_scene},
      {"render", "render every frame of a checkpoint", true, false, true, cmd_render},
      {"flow", "Gaussian flow and colorwheel images of a checkpoint", true, true, true, cmd_flow},
      {"fit", "fit a 4D field to a generated scene", true, true, true, cmd_fit},
      {"gradcheck", "finite-difference check of the analytic gradients", false, true, true, cmd_gradcheck},
      {"eval", "PSNR and flow error of a checkpoint", true, true, true, cmd_eval},
      {"config", "print the fully resolved configuration", false, false, false, cmd_config},
  };
  std::vector<CLI::App*> subs;
  for (const Entry& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    add_common(sub, opts, e.checkpoint, e.flow);
    subs.push_back(sub);
  }

  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      const Context ctx = make_context(opts, entries[i].writes);
      return entries[i].fn(ctx, out);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ToleranceBreach& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DegenerateInput& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitUsage;
}

}  // namespace gflow::cli
