#include <cmath>

#include "doctest.h"
#include "infusion/checkpoint.hpp"
#include "infusion/customization.hpp"
#include "infusion/errors.hpp"
#include "support.hpp"

using namespace infusion;

namespace {

const NoiseSchedule& schedule() {
  static const NoiseSchedule s = make_schedule();
  return s;
}

// Briefly trained base so customization gradients are not degenerate.
const DenoiserWeights& base() {
  static const DenoiserWeights w = [] {
    TrainConfig c;
    c.steps = 200;
    c.seed = 2;
    return train_base(build_four_peak_world(), c, schedule()).weights;
  }();
  return w;
}

const PointSet& data() {
  static const PointSet d = [] {
    const ConceptWorld w = build_four_peak_world();
    LinearTarget t;
    t.carriers = {0};
    Rng rng(3);
    return sample_custom_target(t, w, 128, rng);
  }();
  return d;
}

PromptSpec slot_prompt() { return customization_prompt({kPhotoOfToken, "A"}, 1, "<obj1>"); }

CustomizeConfig config() {
  CustomizeConfig c;
  c.seed = 4;
  c.checkpoint_every = 5;
  c.init_token = "A";
  return c;
}

}  // namespace

TEST_CASE("customization defaults") {
  const CustomizeConfig c;
  CHECK(c.lr == 0.01);
  CHECK(c.checkpoint_every == 100);
  CHECK(parse_method("infusion") == Method::infusion);
  CHECK(parse_method("full-finetune") == Method::full_finetune);
  CHECK(parse_method("token-inversion") == Method::token_inversion);
  CHECK_THROWS_AS(parse_method("lora"), ContractError);
}

TEST_CASE("infusion with zero steps keeps zero residuals") {
  const auto run = train_infusion(base(), data(), slot_prompt(), 0, config(), schedule());
  for (const auto& layer : run.result.deltas)
    for (double v : layer) CHECK(v == 0.0);
  REQUIRE(run.checkpoints.size() == 1);
  CHECK(run.checkpoints[0].first == 0);
  const ResidualSet set{run.result};
  Rng rng(5);
  const Tensor z = testing::random_matrix(rng, 8, 2);
  const std::vector<int> t(8, 250);
  const ScoreModel f{&base(), nullptr, false}, c{&base(), &set, true};
  CHECK(predict_noise(c, z, t, slot_prompt()) == predict_noise(f, z, t, slot_prompt()));
}

TEST_CASE("infusion trains only the residuals") {
  const std::string before = base().fingerprint();
  const auto run = train_infusion(base(), data(), slot_prompt(), 10, config(), schedule());
  CHECK(base().fingerprint() == before);
  CHECK(run.result.base_fingerprint == before);
  CHECK(run.result.concept_token == "<obj1>");
  CHECK(run.result.steps == 10);
  REQUIRE(run.result.deltas.size() == base().config.layers);
  double norm = 0.0;
  for (const auto& layer : run.result.deltas) {
    CHECK(layer.size() == base().config.d_model);
    for (double v : layer) norm += v * v;
  }
  CHECK(norm > 0.0);
  CHECK(run.losses.size() == 10);
  std::vector<std::size_t> steps;
  for (const auto& [s, r] : run.checkpoints) steps.push_back(s);
  CHECK(steps == std::vector<std::size_t>{0, 5, 10});
}

TEST_CASE("customization requires exactly one concept slot") {
  CHECK_THROWS_AS(train_infusion(base(), data(), concept_prompt("A"), 1, config(), schedule()), ContractError);
  const PromptSpec two = PromptSpec::of({kPhotoOfToken, "A", "B"}, {{1, "<obj1>"}, {2, "<obj2>"}});
  CHECK_THROWS_AS(train_infusion(base(), data(), two, 1, config(), schedule()), ContractError);
  CHECK_THROWS_AS(train_full_finetune(base(), data(), concept_prompt("A"), 1, config(), schedule()),
                  ContractError);
}

TEST_CASE("full fine-tune") {
  const auto zero = train_full_finetune(base(), data(), slot_prompt(), 0, config(), schedule());
  CHECK(zero.result.fingerprint() == base().fingerprint());
  const auto a = train_full_finetune(base(), data(), slot_prompt(), 6, config(), schedule());
  const auto b = train_full_finetune(base(), data(), slot_prompt(), 6, config(), schedule());
  CHECK(a.result.fingerprint() != base().fingerprint());
  REQUIRE(a.checkpoints.size() == b.checkpoints.size());
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) {
    CHECK(a.checkpoints[i].first == b.checkpoints[i].first);
    CHECK(a.checkpoints[i].second.fingerprint() == b.checkpoints[i].second.fingerprint());
  }
  // The token table is not a network parameter.
  CHECK(a.result.tokens.entries == base().tokens.entries);
}

TEST_CASE("token inversion") {
  const PromptSpec prompt = customization_prompt({kPhotoOfToken, "<obj1>"}, 1, "<obj1>");
  const auto zero = train_token_inversion(base(), data(), "<obj1>", prompt, 0, config(), schedule());
  CHECK(zero.result == base().tokens.at("A"));

  const auto run = train_token_inversion(base(), data(), "<obj1>", prompt, 8, config(), schedule());
  CHECK(run.result != base().tokens.at("A"));
  const DenoiserWeights tuned = with_token_embedding(base(), "<obj1>", run.result);
  CHECK(tuned.network_parameters() == base().network_parameters());
  CHECK(tuned.tokens.at("<obj1>") == run.result);

  CHECK_THROWS_AS(train_token_inversion(base(), data(), "A", concept_prompt("A"), 1, config(), schedule()),
                  ContractError);
  CHECK_THROWS_AS(train_token_inversion(base(), data(), "<obj2>", prompt, 1, config(), schedule()), ContractError);
  CustomizeConfig no_init = config();
  no_init.init_token.clear();
  CHECK_THROWS_AS(train_token_inversion(base(), data(), "<obj1>", prompt, 1, no_init, schedule()), ContractError);
}

TEST_CASE("token inversion leaves denoiser gradients at zero") {
  // Under this parameterization the denoiser weights are constants on the
  // tape, so a backward pass reports gradients only for the embedding.
  const DenoiserWeights& w = base();
  Tape tape;
  const DenoiserVars net = bind_constants(tape, w);
  const Var emb = tape.parameter("embedding", Tensor::row(w.tokens.at("A")));
  const Var tokens = stack_rows({tape.constant(Tensor::row(w.tokens.at(kPhotoOfToken))), emb});
  const std::vector<int> t{100, 700};
  ForwardRequest req{tape.constant(Tensor::matrix(2, 2, {0.1, 0.2, -0.3, 0.4})), t, tokens, {}, nullptr, nullptr,
                     "p"};
  const GradientMap g = tape.backward(sum_squares(denoise_forward(tape, net, w.config, req).eps));
  CHECK(g.size() == 1);
  CHECK(g.count("embedding") == 1);
}

TEST_CASE("apply_residuals") {
  Rng rng(6);
  const Tensor v = testing::random_matrix(rng, 6, 4);
  const PromptSpec prompt = PromptSpec::of({"a", "b", "c", "d", "e", "f"}, {{2, "<obj1>"}, {5, "<obj2>"}});
  CHECK(apply_residuals(v, prompt, {}, 0) == v);

  ResidualSet set;
  for (const char* token : {"<obj1>", "<obj2>"}) {
    auto r = ResidualConceptEmbedding::zeros(token, 2, 4, "fp");
    for (auto& layer : r.deltas)
      for (double& x : layer) x = rng.normal();
    set.push_back(r);
  }
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const Tensor vbar = apply_residuals(v, prompt, set, layer);
    for (std::size_t row = 0; row < 6; ++row) {
      bool same = true;
      for (std::size_t c = 0; c < 4; ++c) same &= vbar(row, c) == v(row, c);
      CHECK(same == (row != 2 && row != 5));
    }
    // Subtracting the same deltas recovers v up to rounding of the addition.
    ResidualSet negated = set;
    for (auto& r : negated)
      for (auto& l : r.deltas)
        for (double& x : l) x = -x;
    const Tensor back = apply_residuals(vbar, prompt, negated, layer);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(back[i] - v[i]) <= 1e-15 * (1.0 + std::abs(v[i]) * 8));
    // Removing the residuals from the set restores v exactly.
    CHECK(apply_residuals(v, prompt, {}, layer) == v);
  }
  const ResidualSet narrow{ResidualConceptEmbedding::zeros("<obj1>", 2, 3, "fp")};
  CHECK_THROWS_AS(apply_residuals(v, prompt, narrow, 0), ShapeError);
}

TEST_CASE("residual serialization round trip") {
  const auto run = train_infusion(base(), data(), slot_prompt(), 5, config(), schedule());
  const nlohmann::json j = residual_to_json(run.result);
  const ResidualConceptEmbedding back = residual_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.deltas == run.result.deltas);
  CHECK(back.base_fingerprint == run.result.base_fingerprint);
  CHECK(back.concept_token == run.result.concept_token);
  CHECK(back.steps == run.result.steps);
  CHECK_NOTHROW(check_compatible(back, base()));
  CHECK_THROWS_AS(check_compatible(back, init_denoiser({}, 99)), ContractError);

  nlohmann::json future = j;
  future["format_version"] = 2;
  CHECK_THROWS_AS(residual_from_json(future), MigrationError);
  nlohmann::json ragged = j;
  ragged["deltas"][0].erase(0);
  CHECK_THROWS_AS(residual_from_json(ragged), IntegrityError);

  // Plug-and-play: the deserialized residual samples exactly like the in-memory one.
  const ResidualSet mem{run.result}, loaded{back};
  Rng r1(7), r2(7);
  CHECK(ddim_sample(base(), slot_prompt(), schedule(), {10, 2.0, 0.0}, 16, r1, &mem, true).points.points ==
        ddim_sample(base(), slot_prompt(), schedule(), {10, 2.0, 0.0}, 16, r2, &loaded, true).points.points);
}

TEST_CASE("residual checkpoints are compact") {
  const auto r = ResidualConceptEmbedding::zeros("<obj1>", base().config.layers, base().config.d_model,
                                                 base().fingerprint());
  const std::string residual = serialize_checkpoint(make_checkpoint(CheckpointKind::residual, residual_to_json(r), {}));
  const std::string weights =
      serialize_checkpoint(make_checkpoint(CheckpointKind::base_weights, weights_to_payload(base()), {}));
  CHECK(static_cast<double>(residual.size()) <= 0.01 * static_cast<double>(weights.size()));
}

TEST_CASE("customization loss is deterministic") {
  const ScoreModel m{&base(), nullptr, false};
  CHECK(customization_loss(m, data(), slot_prompt(), schedule(), 8) ==
        customization_loss(m, data(), slot_prompt(), schedule(), 8));
}

TEST_CASE("infusion lowers the customization loss") {
  const auto run = train_infusion(base(), data(), slot_prompt(), 300, config(), schedule());
  const ResidualSet set{run.result};
  const ScoreModel before{&base(), nullptr, false}, after{&base(), &set, true};
  CHECK(customization_loss(after, data(), slot_prompt(), schedule(), 31) <
        customization_loss(before, data(), slot_prompt(), schedule(), 31));
}
