#include "infusion/cli.hpp"

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "infusion/checkpoint.hpp"
#include "infusion/errors.hpp"
#include "infusion/experiment.hpp"
#include "infusion/svg.hpp"

namespace infusion {

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;
  std::optional<std::size_t> steps;
  std::optional<double> guidance;
  std::optional<std::string> preset;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--method", f.method, "infusion | full-finetune | token-inversion");
  cmd->add_option("--steps", f.steps, "training steps (sampler steps for 'sample')");
  cmd->add_option("--guidance", f.guidance, "classifier-free guidance scale");
  cmd->add_option("--preset", f.preset, "toy | paper-sd15");
}

ExperimentConfig resolve_config(const Flags& f, const std::string& command) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_experiment_config(f.config);
  if (f.preset) c.apply_preset(find_preset(*f.preset));
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out_dir = *f.out;
  if (f.method) c.methods = {parse_method(*f.method)};
  if (f.guidance) c.sampler.guidance = *f.guidance;
  if (f.steps) {
    if (command == "sample") {
      c.sampler.steps = static_cast<int>(*f.steps);
    } else if (command == "train-base") {
      c.base.steps = *f.steps;
    } else {
      c.customize_steps = *f.steps;
    }
  }
  return c;
}

std::string losses_csv(const std::vector<double>& losses, const std::string& hash) {
  std::string s = "# config_sha256=" + hash + "\nstep,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, losses[i]);
    s += buf;
  }
  return s;
}

Bounds plot_bounds(const ConceptWorld& world) {
  Bounds b{1e300, -1e300, 1e300, -1e300, true};
  for (const auto& c : world.all_modality_centers()) {
    b.xmin = std::min(b.xmin, c[0]);
    b.xmax = std::max(b.xmax, c[0]);
    b.ymin = std::min(b.ymin, c[1]);
    b.ymax = std::max(b.ymax, c[1]);
  }
  const double pad = 1.0;
  return {b.xmin - pad, b.xmax + pad, b.ymin - pad, b.ymax + pad, true};
}

void run_command(const std::string& cmd, Experiment& ex, std::ostream& out) {
  const std::string& hash = ex.config_hash();
  auto wrote = [&](const std::filesystem::path& p) { out << "wrote " << p.string() << "\n"; };

  if (cmd == "gen-world") {
    nlohmann::json doc = world_to_json(ex.world());
    doc["config_sha256"] = hash;
    write_file_atomic(ex.path("world.json"), doc.dump(1) + "\n");
    wrote(ex.path("world.json"));
  } else if (cmd == "train-base") {
    write_file_atomic(ex.path("base/loss.csv"), losses_csv(ex.base_losses(), hash));
    wrote(ex.path("base/weights.json"));
    wrote(ex.path("base/loss.csv"));
  } else if (cmd == "customize") {
    for (Method m : ex.config().methods) {
      const auto p = ex.path(to_string(m) + "/loss.csv");
      write_file_atomic(p, losses_csv(ex.customization_losses(m), hash));
      wrote(p);
    }
  } else if (cmd == "sample") {
    for (Method m : ex.config().methods) {
      const PointSet pts = ex.sample(ex.final_model(m), ex.customized_prompt(m), ex.config().eval_samples);
      const auto p = ex.path("samples_" + to_string(m) + ".csv");
      write_file_atomic(p, points_to_csv(pts, hash));
      wrote(p);
    }
  } else if (cmd == "eval") {
    std::vector<MethodCheckpoints> finals;
    for (Method m : ex.config().methods) {
      const MethodCheckpoints& all = ex.customized(m);
      finals.push_back({all.method, all.prompt, {all.checkpoints.back()}});
    }
    const auto curves = overfitting_curves(ex.base(), finals, ex.curve_config(), ex.schedule());
    nlohmann::json doc = {{"format_version", 1}, {"config_sha256", hash}, {"methods", nlohmann::json::object()}};
    for (const auto& c : curves) {
      const CurvePoint& pt = c.points.back();
      doc["methods"][c.method] = {
          {"step", pt.step}, {"fisher", pt.fisher}, {"w2", pt.w2}, {"coverage", pt.coverage}};
    }
    write_file_atomic(ex.path("eval.json"), doc.dump(1) + "\n");
    wrote(ex.path("eval.json"));
  } else if (cmd == "curves") {
    const auto p = ex.path("curves.csv");
    write_file_atomic(p, "# config_sha256=" + hash + "\n" + curves_to_csv(ex.curves()));
    wrote(p);
  } else if (cmd == "plot") {
    const std::size_t n = ex.config().eval_samples;
    const PointSet reference = ex.sample_base(ex.reference_prompt(), n);
    const Bounds bounds = plot_bounds(ex.world());
    for (Method m : ex.config().methods) {
      const PointSet pts = ex.sample(ex.final_model(m), ex.customized_prompt(m), n);
      std::vector<PlotLayer> layers{
          {reference, {"base", "#9a9a9a", 1.4, 0.5}},
          {ex.training_data(), {"training data", "#ff7f0e", 1.4, 0.7}},
          {pts, {to_string(m), "#1f77b4", 1.6, 0.6}},
      };
      const auto p = ex.path("plot_" + to_string(m) + ".svg");
      write_scatter_svg(layers, bounds, p, {480, to_string(m), hash});
      wrote(p);
    }
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Residual value embedding experiments on 2-D concept worlds", "infusion"};
  app.require_subcommand(1, 1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-world", "write the concept world as JSON"},
      {"train-base", "train (or load) the base denoiser"},
      {"customize", "train customization checkpoints for each method"},
      {"sample", "draw samples from each customized model"},
      {"eval", "Fisher, W2 and coverage at the final checkpoint"},
      {"curves", "metric curves across checkpoint steps (CSV)"},
      {"plot", "scatter plots of base, training data and samples (SVG)"},
  };
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help), flags);

  std::vector<std::string> storage{"infusion"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    Experiment ex(resolve_config(flags, cmd));
    run_command(cmd, ex, out);
    return 0;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    err << "integrity failure: " << e.what() << "\n";
    return 2;
  } catch (const MigrationError& e) {
    err << "migration required: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "integrity failure: " << e.what() << "\n";
    return 2;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace infusion
