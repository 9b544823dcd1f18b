// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Experiments run in fresh directories.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "infusion/checkpoint.hpp"
#include "infusion/cli.hpp"
#include "infusion/errors.hpp"
#include "infusion/experiment.hpp"
#include "support.hpp"

using namespace infusion;
namespace fs = std::filesystem;

namespace {

const fs::path kSourceDir = INFUSION_SOURCE_DIR;
const fs::path kWorkDir = INFUSION_ACCEPTANCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Loads a shipped config and redirects its output under the work directory.
ExperimentConfig fixture(const std::string& name) {
  ExperimentConfig c = load_experiment_config(kSourceDir / "configs" / (name + ".json"));
  const fs::path out = kWorkDir / name;
  fs::remove_all(out);
  c.out_dir = out.string();
  return c;
}

Experiment& four_peak() {
  static Experiment e(fixture("four_peak"));
  return e;
}

Experiment& grid25() {
  static Experiment e(fixture("grid25"));
  return e;
}

ScoreModel score(const CheckpointModel& m) {
  return {&m.weights, m.residuals.empty() ? nullptr : &m.residuals, m.dual_stream};
}

std::vector<int> random_timesteps(Rng& rng, std::size_t n) {
  std::vector<int> t(n);
  for (int& v : t) v = static_cast<int>(rng.uniform_int(1, 1000));
  return t;
}

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) worst = std::max(worst, testing::RandomGraph(1000 + seed).check(1e-5));
  const double elapsed = seconds_since(t0);
  return {worst <= 1e-4 && elapsed < 60.0, fmt("50 graphs, max rel err %.3e (<= 1e-4), %.1fs (< 60s)", worst, elapsed)};
}

Outcome attention_decomposition() {
  Rng rng(2);
  const DenoiserConfig dc;
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = dc.query_slots * static_cast<std::size_t>(rng.uniform_int(1, 8));
    const std::size_t len = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const Tensor q = testing::random_matrix(rng, rows, dc.d_model);
    const Tensor k = testing::random_matrix(rng, len, dc.d_model);
    const Tensor v = testing::random_matrix(rng, len, dc.d_model);
    const CrossAttentionResult r = cross_attention(q, k, v);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t c = 0; c < dc.d_model; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < len; ++j) s += r.map(i, j) * v(j, c);
        mismatches += r.output(i, c) == s ? 0 : 1;
      }
    }
  }
  return {mismatches == 0, fmt("100 layer inputs, %zu non-identical entries", mismatches)};
}

Outcome own_trace_identity() {
  Rng rng(3);
  const DenoiserWeights w = init_denoiser({}, 3);
  const ResidualSet zero{
      ResidualConceptEmbedding::zeros("<obj1>", w.config.layers, w.config.d_model, w.fingerprint())};
  const std::vector<std::string> vocab{kPhotoOfToken, "A", "B", "C", "D"};
  std::size_t failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const std::size_t len = static_cast<std::size_t>(rng.uniform_int(1, 5));
    std::vector<std::string> tokens;
    for (std::size_t i = 0; i < len; ++i) tokens.push_back(vocab[static_cast<std::size_t>(rng.uniform_int(0, 4))]);
    const std::size_t slot = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(len) - 1));
    const PromptSpec prompt = customization_prompt(tokens, slot, "<obj1>");
    const Tensor z = testing::random_matrix(rng, n, 2, 1.5);
    const auto t = random_timesteps(rng, n);
    const DenoiseResult plain = denoise_forward(w, z, t, prompt);
    const DenoiseResult dual = denoise_forward(w, z, t, prompt, &zero, &plain.trace);
    failures += (dual.eps == plain.eps && dual.trace == plain.trace) ? 0 : 1;
  }
  return {failures == 0, fmt("100 triples, %zu mismatches", failures)};
}

Outcome infusion_transparency() {
  Experiment& e = four_peak();
  const CheckpointModel base{0, e.base(), {}, false};
  const CurveEvalConfig cc = e.curve_config();
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t step = 100; step <= 2000; step += 100) {
    const CheckpointModel m = e.model_at(Method::infusion, step);
    const double f = latent_fisher_divergence(score(base), score(m), cc.fisher_latents, cc.fisher_prompts,
                                              e.schedule(), cc.n_t, cc.seed)
                         .value;
    worst = std::max(worst, f);
    ++checked;
  }
  return {checked == 20 && worst == 0.0, fmt("%zu checkpoints, max Fisher %.3e (== 0)", checked, worst)};
}

Outcome fisher_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<CurveSeries> curves = four_peak().curves();
  std::map<std::string, std::vector<CurvePoint>> by;
  for (const auto& s : curves) by[s.method] = s.points;
  const auto& ft = by.at("full-finetune");
  const auto& inf = by.at("infusion");
  bool positive = true, above = ft.size() == inf.size();
  std::size_t dips = 0;
  double worst_dip = 0.0;
  std::string series;
  for (std::size_t i = 0; i < ft.size(); ++i) {
    positive &= ft[i].fisher > 0.0;
    if (i < inf.size()) above &= ft[i].fisher > inf[i].fisher && inf[i].fisher == 0.0;
    if (i > 0 && ft[i].fisher < ft[i - 1].fisher) {
      ++dips;
      worst_dip = std::max(worst_dip, 1.0 - ft[i].fisher / ft[i - 1].fisher);
    }
    series += fmt("%s%zu:%.4g", i ? " " : "", ft[i].step, ft[i].fisher);
  }
  const double elapsed = seconds_since(t0);
  const bool monotone = dips == 0 || (dips == 1 && worst_dip <= 0.10);
  return {positive && above && monotone && ft.size() == 5 && elapsed < 1800.0,
          fmt("full-finetune Fisher [%s], dips %zu (max %.1f%%), infusion 0 at all steps: %s, %.0fs", series.c_str(),
              dips, 100.0 * worst_dip, above ? "yes" : "no", elapsed)};
}

Outcome coverage_and_w2() {
  Experiment& e = grid25();
  const std::size_t n = e.config().eval_samples;
  const std::vector<Point2> centers = e.centers();
  const MomentPair reference = gaussian_fit(e.sample_base(e.reference_prompt(), n));
  const auto eval = [&](Method m) {
    const PointSet s = e.sample(e.final_model(m), e.customized_prompt(m), n);
    return std::pair{mode_coverage(s, centers, e.config().coverage_radius, e.config().coverage_quorum),
                     w2_gaussian(gaussian_fit(s), reference).value};
  };
  const auto [cov_inf, w2_inf] = eval(Method::infusion);
  const auto [cov_ft, w2_ft] = eval(Method::full_finetune);
  const double modes = static_cast<double>(centers.size());
  const bool ordering = cov_inf > cov_ft && w2_inf < w2_ft;
  const bool thresholds = cov_ft * modes <= 7.0 + 1e-9 && cov_inf * modes >= 15.0 - 1e-9 && w2_inf <= 0.5 * w2_ft;
  return {ordering && thresholds,
          fmt("coverage full-finetune %.0f/25 (<= 7), infusion %.0f/25 (>= 15); W2 infusion %.3f vs "
              "full-finetune %.3f, ratio %.3f (<= 0.5); ordering %s, thresholds %s",
              cov_ft * modes, cov_inf * modes, w2_inf, w2_ft, w2_inf / w2_ft, ordering ? "holds" : "violated",
              thresholds ? "met" : "missed")};
}

Outcome wasserstein_correctness() {
  const bool shift = w2_gaussian({{0, 0}, {1, 0, 0, 1}}, {{1, 0}, {1, 0, 0, 1}}).value == 1.0;
  const bool scale = w2_gaussian({{0, 0}, {1, 0, 0, 0}}, {{0, 0}, {4, 0, 0, 0}}).value == 1.0;
  Rng rng(7);
  const auto draw_cov = [&] {
    const double l00 = 0.3 + rng.uniform(), l10 = rng.normal() * 0.5, l11 = 0.3 + rng.uniform();
    return std::pair{Mat2{l00 * l00, l00 * l10, l00 * l10, l10 * l10 + l11 * l11}, Mat2{l00, 0.0, l10, l11}};
  };
  const auto draw = [&](const Point2& m, const Mat2& l) {
    PointSet p;
    for (int i = 0; i < 256; ++i) {
      const double a = rng.normal(), b = rng.normal();
      p.points.push_back({m[0] + l[0] * a, m[1] + l[2] * a + l[3] * b});
    }
    return p;
  };
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Point2 m1{rng.normal() * 2, rng.normal() * 2}, m2{rng.normal() * 2, rng.normal() * 2};
    const auto [c1, l1] = draw_cov();
    const auto [c2, l2] = draw_cov();
    const double exact = w2_gaussian({m1, c1}, {m2, c2}).value;
    const double oracle = w2_empirical_oracle(draw(m1, l1), draw(m2, l2)).value;
    worst = std::max(worst, std::abs(oracle - exact) / exact);
  }
  return {shift && scale && worst <= 0.15,
          fmt("mean shift exact: %s, 1-D scale exact: %s, oracle max rel dev %.3f (<= 0.15)", shift ? "yes" : "no",
              scale ? "yes" : "no", worst)};
}

Outcome compactness() {
  Experiment& e = four_peak();
  e.customized(Method::infusion);
  const auto residual_size = fs::file_size(e.path("infusion/step_002000.json"));
  const auto weights_size = fs::file_size(e.path("base/weights.json"));
  const double ratio = static_cast<double>(residual_size) / static_cast<double>(weights_size);

  const Checkpoint c = load_checkpoint(e.path("infusion/step_002000.json"));
  const ResidualConceptEmbedding r = residual_from_json(c.payload);
  check_compatible(r, e.base());
  const PromptSpec prompt = e.customized_prompt(Method::infusion);
  const SamplerConfig sc = e.config().sampler;
  const auto draw = [&](const ResidualSet* res) {
    Rng rng(11);
    return ddim_sample(e.base(), prompt, e.schedule(), sc, 256, rng, res, res != nullptr).points.points;
  };
  const auto before = draw(nullptr);
  const ResidualSet loaded{r};
  const auto applied = draw(&loaded);
  const auto removed = draw(nullptr);
  const bool restores = removed == before && applied != before;
  return {ratio <= 0.01 && restores, fmt("residual %ju B / base %ju B = %.4f (<= 0.01); removal restores sampling: %s",
                                         static_cast<std::uintmax_t>(residual_size),
                                         static_cast<std::uintmax_t>(weights_size), ratio, restores ? "yes" : "no")};
}

Outcome multi_concept_locality() {
  Experiment& e = four_peak();
  const DenoiserWeights& base = e.base();
  const ResidualConceptEmbedding first = e.final_model(Method::infusion).residuals.at(0);

  // A second concept, C, trained under its own placeholder.
  LinearTarget target;
  target.carriers = {2};
  Rng data_rng(stage_seed(e.config().seed, SeedStage::data) + 1);
  const PointSet data = sample_custom_target(target, e.world(), e.config().data_size, data_rng);
  CustomizeConfig cc = e.config().customize;
  cc.seed = stage_seed(e.config().seed, SeedStage::customize) + 1;
  cc.checkpoint_every = 0;
  const auto second =
      train_infusion(base, data, customization_prompt({kPhotoOfToken, "C"}, 1, "<obj2>"), 500, cc, e.schedule());

  const ResidualSet both{first, second.result};
  const PromptSpec prompt = PromptSpec::of({kPhotoOfToken, "A", kPhotoOfToken, "C"}, {{1, "<obj1>"}, {3, "<obj2>"}});
  Rng rng(13);
  std::size_t violations = 0, slot_rows_changed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = testing::random_matrix(rng, 4, 2, 1.5);
    const auto t = random_timesteps(rng, 4);
    const DenoiseResult plain = denoise_forward(base, z, t, prompt);
    const DenoiseResult infused = denoise_forward(base, z, t, prompt, &both, &plain.trace);
    for (std::size_t l = 0; l < base.config.layers; ++l) {
      for (std::size_t row = 0; row < prompt.length(); ++row) {
        bool same = true;
        for (std::size_t c = 0; c < base.config.d_model; ++c) same &= infused.values[l](row, c) == plain.values[l](row, c);
        const bool slot = row == 1 || row == 3;
        if (slot && !same) ++slot_rows_changed;
        if (!slot && !same) ++violations;
      }
    }
  }
  const auto draw = [&] {
    Rng r(17);
    return ddim_sample(base, prompt, e.schedule(), e.config().sampler, 256, r, &both, true).points.points;
  };
  const auto a = draw(), b = draw();
  bool finite = true;
  for (const auto& p : a) finite &= std::isfinite(p[0]) && std::isfinite(p[1]);
  const std::size_t expected = 20 * 2 * base.config.layers;
  return {violations == 0 && slot_rows_changed == expected && a == b && finite,
          fmt("non-slot rows changed %zu (== 0), slot rows changed %zu/%zu; sampling deterministic: %s, finite: %s",
              violations, slot_rows_changed, expected, a == b ? "yes" : "no", finite ? "yes" : "no")};
}

std::map<std::string, std::string> run_all_subcommands(const fs::path& config, const fs::path& out) {
  fs::remove_all(out);
  for (const std::vector<std::string>& args :
       std::vector<std::vector<std::string>>{{"gen-world"},
                                             {"train-base"},
                                             {"customize"},
                                             {"sample", "--method", "infusion"},
                                             {"sample", "--method", "full-finetune"},
                                             {"eval"},
                                             {"curves"},
                                             {"plot"}}) {
    std::vector<std::string> full = args;
    full.insert(full.end(), {"--config", config.string(), "--out", out.string()});
    std::ostringstream o, err;
    if (run_cli(full, o, err) != 0) throw ContractError("cli " + args[0] + " failed: " + err.str());
  }
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(out)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".csv" || ext == ".json" || ext == ".svg") {
      files[fs::relative(entry.path(), out).string()] = read_file(entry.path());
    }
  }
  return files;
}

Outcome reproducibility() {
  const fs::path config = kSourceDir / "configs" / "smoke.json";
  const fs::path out = kWorkDir / "repro";
  const auto first = run_all_subcommands(config, out);
  const auto second = run_all_subcommands(config, out);
  std::size_t differing = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    differing += (it == second.end() || it->second != bytes) ? 1 : 0;
  }
  differing += second.size() > first.size() ? second.size() - first.size() : 0;
  return {differing == 0 && !first.empty(), fmt("%zu output files, %zu differ", first.size(), differing)};
}

}  // namespace

int main() {
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  fs::create_directories(kWorkDir);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"attention decomposition identity", attention_decomposition},
      {"zero-residual own-trace identity", own_trace_identity},
      {"infusion transparency", infusion_transparency},
      {"fisher ordering on four-peak", fisher_ordering},
      {"mode coverage and W2 on grid25", coverage_and_w2},
      {"wasserstein correctness", wasserstein_correctness},
      {"plug-and-play compactness", compactness},
      {"multi-concept locality", multi_concept_locality},
      {"end-to-end reproducibility", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s %2zu %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0));
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed == 0 ? 0 : 1;
}
