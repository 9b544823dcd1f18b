#include <cmath>

#include "doctest.h"
#include "infusion/diffusion.hpp"
#include "infusion/errors.hpp"
#include "support.hpp"

using namespace infusion;

namespace {

const NoiseSchedule& schedule() {
  static const NoiseSchedule s = make_schedule();
  return s;
}

// Four-peak base trained with the default configuration, shared by the slow cases.
const BaseTrainResult& trained_four_peak() {
  static const BaseTrainResult r = [] {
    TrainConfig config;
    config.seed = 1;
    return train_base(build_four_peak_world(), config, schedule());
  }();
  return r;
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

}  // namespace

TEST_CASE("schedule with a single step") {
  const NoiseSchedule s = make_schedule(1, 0.5, 0.5);
  CHECK(s.alpha_bar(1) == 0.5);
  CHECK(s.alpha_bar(0) == 1.0);
}

TEST_CASE("default schedule") {
  const NoiseSchedule& s = schedule();
  REQUIRE(s.steps() == 1000);
  CHECK(s.beta(1) == 1e-4);
  CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-15));
  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK(s.alpha_bar(1000) < 1e-4);
  CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), ContractError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), ContractError);
}

TEST_CASE("q_sample limits") {
  const NoiseSchedule tiny = make_schedule(10, 1e-12, 1e-12);
  const Point2 z0{0.7, -1.2};
  const Point2 zt = q_sample(z0, 1, {0.3, 0.4}, tiny);
  CHECK(std::abs(zt[0] - z0[0]) <= 1e-5);
  CHECK(std::abs(zt[1] - z0[1]) <= 1e-5);

  const double s = std::sqrt(1.0 - schedule().alpha_bar(400));
  const Point2 origin = q_sample({0.0, 0.0}, 400, {1.5, -0.5}, schedule());
  CHECK(origin[0] == s * 1.5);
  CHECK(origin[1] == s * -0.5);

  CHECK_THROWS_AS(q_sample(z0, 0, {0, 0}, schedule()), ContractError);
  CHECK_THROWS_AS(q_sample(z0, 1001, {0, 0}, schedule()), ContractError);
}

TEST_CASE("q_sample mean") {
  const Point2 z0{2.0, -1.0};
  const int t = 300;
  Rng rng(4);
  const std::size_t n = 10000;
  Point2 mean{0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 z = q_sample(z0, t, {rng.normal(), rng.normal()}, schedule());
    mean[0] += z[0] / n;
    mean[1] += z[1] / n;
  }
  const double a = std::sqrt(schedule().alpha_bar(t));
  const double tol = 4.0 * std::sqrt(1.0 - schedule().alpha_bar(t)) / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(mean[0] - a * z0[0]) <= tol);
  CHECK(std::abs(mean[1] - a * z0[1]) <= tol);
}

TEST_CASE("diffusion loss with an oracle denoiser is zero") {
  const Point2 z0{0.5, -1.0};
  PointSet batch{std::vector<Point2>(64, z0), {}};
  const NoiseSchedule& s = schedule();
  Rng rng(5);
  Tape tape;
  const Var loss = diffusion_loss(tape, batch, concept_prompt("A"), s, 0.1, rng,
                                  [&](Tape& tp, const Tensor& z, std::span<const int> t, const PromptSpec&) {
                                    Tensor eps = Tensor::zeros(z.rows(), 2);
                                    for (std::size_t i = 0; i < z.rows(); ++i) {
                                      const double a = std::sqrt(s.alpha_bar(t[i]));
                                      const double b = std::sqrt(1.0 - s.alpha_bar(t[i]));
                                      for (int k = 0; k < 2; ++k) eps(i, k) = (z(i, k) - a * z0[k]) / b;
                                    }
                                    return tp.constant(eps);
                                  });
  CHECK(loss.value().item() <= 1e-12);
}

TEST_CASE("diffusion loss with a zero predictor is about two") {
  PointSet batch;
  Rng data(6);
  for (int i = 0; i < 20000; ++i) batch.points.push_back({data.normal(), data.normal()});
  auto zero = [](Tape& tp, const Tensor& z, std::span<const int>, const PromptSpec&) {
    return tp.constant(Tensor::zeros(z.rows(), 2));
  };
  Rng rng(7);
  Tape tape;
  const double value = diffusion_loss(tape, batch, concept_prompt("A"), schedule(), 0.1, rng, zero).value().item();
  CHECK(std::abs(value - 2.0) <= 0.1);

  Tape empty_tape;
  CHECK_THROWS_AS(diffusion_loss(empty_tape, PointSet{}, concept_prompt("A"), schedule(), 0.1, rng, zero),
                  ContractError);
}

TEST_CASE("diffusion loss is deterministic under a fixed seed") {
  const DenoiserWeights w = init_denoiser({}, 3);
  Rng d(8);
  const PointSet batch = sample_concept(build_four_peak_world(), "B", 32, d);
  Rng r1(9), r2(9);
  CHECK(diffusion_loss(batch, concept_prompt("B"), w, schedule(), 0.1, r1) ==
        diffusion_loss(batch, concept_prompt("B"), w, schedule(), 0.1, r2));
}

TEST_CASE("zero training steps return the initialization") {
  TrainConfig config;
  config.steps = 0;
  config.seed = 11;
  const BaseTrainResult r = train_base(build_four_peak_world(), config, schedule());
  CHECK(r.weights.fingerprint() == init_denoiser(config.denoiser, 11).fingerprint());
  CHECK(r.losses.empty());
}

TEST_CASE("training is seed-deterministic and emits checkpoints") {
  TrainConfig config;
  config.steps = 20;
  config.seed = 12;
  config.checkpoint_every = 10;
  const BaseTrainResult a = train_base(build_four_peak_world(), config, schedule());
  const BaseTrainResult b = train_base(build_four_peak_world(), config, schedule());
  CHECK(a.weights.fingerprint() == b.weights.fingerprint());
  CHECK(a.losses == b.losses);
  REQUIRE(a.checkpoints.size() == 2);
  CHECK(a.checkpoints[0].first == 10);
  CHECK(a.checkpoints[1].second.fingerprint() == a.weights.fingerprint());
}

TEST_CASE("divergent training reports the step") {
  TrainConfig config;
  config.steps = 50;
  config.lr = 1e200;
  bool thrown = false;
  try {
    train_base(build_four_peak_world(), config, schedule());
  } catch (const TrainingError& e) {
    thrown = true;
    CHECK(e.step() >= 1);
  }
  CHECK(thrown);
}

TEST_CASE("default four-peak training reduces the loss") {
  const auto& losses = trained_four_peak().losses;
  REQUIRE(losses.size() == 8000);
  CHECK(mean_of(losses, losses.size() - 100, losses.size()) < 0.25 * mean_of(losses, 0, 100));
}

TEST_CASE("trained four-peak model samples concept A near its peak") {
  Rng rng(13);
  const PointSet s = ddim_sample(trained_four_peak().weights, concept_prompt("A"), schedule(), {}, 1000, rng).points;
  std::size_t near = 0;
  for (const auto& p : s.points) near += std::hypot(p[0] + 2.0, p[1] - 2.0) <= 0.6 ? 1 : 0;
  CHECK(near >= 950);
}

TEST_CASE("guidance collapses for the null prompt") {
  const DenoiserWeights w = init_denoiser({}, 14);
  SampleOptions options;
  options.record_guided_eps = true;
  Rng r1(15), r2(15);
  const SampleOutput a = ddim_sample(w, PromptSpec::null(2), schedule(), {10, 3.0, 0.0}, 16, r1, nullptr, false, options);
  const SampleOutput b = ddim_sample(w, PromptSpec::null(2), schedule(), {10, 1.0, 0.0}, 16, r2, nullptr, false, options);
  CHECK(a.guided_eps_log == b.guided_eps_log);
  CHECK(a.points.points == b.points.points);
}

TEST_CASE("dual stream with zero residuals matches single stream") {
  const DenoiserWeights w = init_denoiser({}, 16);
  const PromptSpec prompt = PromptSpec::of({kPhotoOfToken, "A"}, {{1, "<obj1>"}});
  const ResidualSet zero{ResidualConceptEmbedding::zeros("<obj1>", w.config.layers, w.config.d_model, w.fingerprint())};
  Rng r1(17), r2(17);
  const PointSet single = ddim_sample(w, prompt, schedule(), {20, 2.0, 0.0}, 32, r1).points;
  const PointSet dual = ddim_sample(w, prompt, schedule(), {20, 2.0, 0.0}, 32, r2, &zero, true).points;
  CHECK(single.points == dual.points);
  Rng r3(17);
  CHECK_THROWS_AS(ddim_sample(w, prompt, schedule(), {}, 4, r3, nullptr, true), ContractError);
}

TEST_CASE("dual stream keeps the foundational pipeline pure") {
  const DenoiserWeights w = init_denoiser({}, 18);
  const PromptSpec prompt = PromptSpec::of({kPhotoOfToken, "B"}, {{1, "<obj1>"}});
  auto res = ResidualConceptEmbedding::zeros("<obj1>", w.config.layers, w.config.d_model, w.fingerprint());
  Rng d(19);
  for (auto& layer : res.deltas)
    for (double& v : layer) v = d.normal();
  const ResidualSet set{res};
  SampleOptions options;
  options.record_traces = true;
  Rng r1(20), r2(20);
  const SampleOutput plain = ddim_sample(w, prompt, schedule(), {15, 2.0, 0.0}, 8, r1, nullptr, false, options);
  const SampleOutput dual = ddim_sample(w, prompt, schedule(), {15, 2.0, 0.0}, 8, r2, &set, true, options);
  CHECK(dual.trace_log == plain.trace_log);
  CHECK(dual.points.points != plain.points.points);
}

TEST_CASE("deterministic sampling with eta zero") {
  const DenoiserWeights w = init_denoiser({}, 21);
  Rng r1(22), r2(22);
  CHECK(ddim_sample(w, concept_prompt("C"), schedule(), {}, 16, r1).points.points ==
        ddim_sample(w, concept_prompt("C"), schedule(), {}, 16, r2).points.points);
}

TEST_CASE("sampler validation") {
  const DenoiserWeights w = init_denoiser({}, 23);
  Rng rng(0);
  CHECK_THROWS_AS(ddim_sample(w, concept_prompt("A"), schedule(), {0, 2.0, 0.0}, 4, rng), ContractError);
  CHECK_THROWS_AS(ddim_sample(w, concept_prompt("A"), schedule(), {1001, 2.0, 0.0}, 4, rng), ContractError);
  CHECK_THROWS_AS(ddim_sample(w, concept_prompt("A"), schedule(), {10, -1.0, 0.0}, 4, rng), ContractError);
  CHECK_THROWS_AS(ddim_sample(w, concept_prompt("A"), schedule(), {10, 2.0, 1.5}, 4, rng), ContractError);
  const auto ts = ddim_timesteps(1000, 50);
  CHECK(ts.size() == 50);
  CHECK(ts.front() == 20);
  CHECK(ts.back() == 1000);
}

TEST_CASE("stochastic sampling with eta one stays finite") {
  const DenoiserWeights w = init_denoiser({}, 24);
  Rng rng(25);
  const PointSet s = ddim_sample(w, concept_prompt("D"), schedule(), {10, 2.0, 1.0}, 16, rng).points;
  for (const auto& p : s.points) CHECK((std::isfinite(p[0]) && std::isfinite(p[1])));
}
