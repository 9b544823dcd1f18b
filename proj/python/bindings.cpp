#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "infusion/checkpoint.hpp"
#include "infusion/cli.hpp"
#include "infusion/customization.hpp"
#include "infusion/errors.hpp"
#include "infusion/metrics.hpp"

namespace py = pybind11;
using namespace infusion;

namespace {

const NoiseSchedule& schedule() {
  static const NoiseSchedule s = make_schedule();
  return s;
}

PointSet to_points(const std::vector<Point2>& pts) { return PointSet{pts, {}}; }

PromptSpec slot_prompt(const std::string& concept_token, const std::string& placeholder) {
  return customization_prompt({kPhotoOfToken, concept_token}, 1, placeholder);
}

}  // namespace

PYBIND11_MODULE(_infusion, m) {
  m.doc() = "Residual value-embedding customization of a toy 2-D diffusion model";

  auto contract = py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", contract.ptr());
  py::register_exception<LookupError>(m, "LookupError", contract.ptr());
  auto numeric = py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<TrainingError>(m, "TrainingError", numeric.ptr());
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
  py::register_exception<MigrationError>(m, "MigrationError", PyExc_RuntimeError);

  py::class_<DenoiserWeights>(m, "DenoiserWeights")
      .def("fingerprint", &DenoiserWeights::fingerprint)
      .def("to_json", [](const DenoiserWeights& w) { return weights_to_payload(w).dump(); })
      .def_static("from_json",
                  [](const std::string& s) { return weights_from_payload(nlohmann::json::parse(s)); });

  py::class_<ResidualConceptEmbedding>(m, "Residual")
      .def_readonly("concept_token", &ResidualConceptEmbedding::concept_token)
      .def_readonly("deltas", &ResidualConceptEmbedding::deltas)
      .def_readonly("base_fingerprint", &ResidualConceptEmbedding::base_fingerprint)
      .def("to_json", [](const ResidualConceptEmbedding& r) { return residual_to_json(r).dump(); })
      .def_static("from_json",
                  [](const std::string& s) { return residual_from_json(nlohmann::json::parse(s)); });

  m.def("world_concepts", [](const std::string& world) { return build_world(world).tokens(); }, py::arg("world"));
  m.def("modality_centers",
        [](const std::string& world, const std::string& concept_token) {
          return build_world(world).modality_centers(concept_token);
        },
        py::arg("world"), py::arg("concept"));

  m.def("train_base",
        [](const std::string& world, std::size_t steps, std::size_t batch, double lr, std::uint64_t seed) {
          TrainConfig c;
          c.steps = steps;
          c.batch = batch;
          c.lr = lr;
          c.seed = seed;
          py::gil_scoped_release release;
          BaseTrainResult r = train_base(build_world(world), c, schedule());
          return std::pair{std::move(r.weights), std::move(r.losses)};
        },
        py::arg("world") = "four-peak", py::arg("steps") = 8000, py::arg("batch") = 32, py::arg("lr") = 2e-3,
        py::arg("seed") = 0);

  m.def("train_infusion",
        [](const DenoiserWeights& base, const std::string& world, const std::string& concept_token, std::size_t steps,
           double lr, std::uint64_t seed, const std::string& placeholder) {
          const ConceptWorld w = build_world(world);
          LinearTarget target = world == "grid25" ? grid25_diagonal_target() : LinearTarget{};
          if (world != "grid25") {
            const auto all = w.all_modality_centers();
            for (const Point2& c : w.modality_centers(concept_token))
              for (std::size_t i = 0; i < all.size(); ++i)
                if (all[i] == c) target.carriers.push_back(i);
          }
          Rng rng(seed);
          const PointSet data = sample_custom_target(target, w, 512, rng);
          CustomizeConfig c;
          c.lr = lr;
          c.seed = seed;
          c.checkpoint_every = 0;
          py::gil_scoped_release release;
          auto run = train_infusion(base, data, slot_prompt(concept_token, placeholder), steps, c, schedule());
          return std::pair{std::move(run.result), std::move(run.losses)};
        },
        py::arg("base"), py::arg("world"), py::arg("concept"), py::arg("steps") = 2000, py::arg("lr") = 0.01,
        py::arg("seed") = 0, py::arg("placeholder") = "<obj1>");

  m.def("sample",
        [](const DenoiserWeights& weights, const std::string& concept_token, std::size_t n, std::uint64_t seed,
           int steps, double guidance, const ResidualConceptEmbedding* residual) {
          Rng rng(seed);
          const SamplerConfig sc{steps, guidance, 0.0};
          py::gil_scoped_release release;
          if (residual == nullptr) {
            return ddim_sample(weights, concept_prompt(concept_token), schedule(), sc, n, rng).points.points;
          }
          const ResidualSet set{*residual};
          return ddim_sample(weights, slot_prompt(concept_token, residual->concept_token), schedule(), sc, n, rng,
                             &set, true)
              .points.points;
        },
        py::arg("weights"), py::arg("concept"), py::arg("n"), py::arg("seed") = 0, py::arg("steps") = 50,
        py::arg("guidance") = 2.0, py::arg("residual") = nullptr);

  m.def("w2_gaussian",
        [](const std::vector<Point2>& a, const std::vector<Point2>& b) {
          return w2_gaussian(gaussian_fit(to_points(a)), gaussian_fit(to_points(b))).value;
        },
        py::arg("a"), py::arg("b"));
  m.def("w2_empirical_oracle",
        [](const std::vector<Point2>& a, const std::vector<Point2>& b) {
          return w2_empirical_oracle(to_points(a), to_points(b)).value;
        },
        py::arg("a"), py::arg("b"));
  m.def("mode_coverage",
        [](const std::vector<Point2>& points, const std::vector<Point2>& centers, double radius, std::size_t quorum) {
          return mode_coverage(to_points(points), centers, radius, quorum);
        },
        py::arg("points"), py::arg("centers"), py::arg("radius") = kDefaultCoverageRadius,
        py::arg("quorum") = kDefaultQuorum);

  m.def("latent_fisher_divergence",
        [](const DenoiserWeights& base, const DenoiserWeights& other, const ResidualConceptEmbedding* residual,
           const std::vector<std::string>& concepts, const std::vector<Point2>& latents, int n_t,
           std::uint64_t seed) {
          std::vector<PromptSpec> prompts;
          for (const auto& c : concepts) prompts.push_back(concept_prompt(c));
          const ResidualSet set = residual ? ResidualSet{*residual} : ResidualSet{};
          const ScoreModel a{&base, nullptr, false};
          const ScoreModel b{&other, residual ? &set : nullptr, residual != nullptr};
          py::gil_scoped_release release;
          return latent_fisher_divergence(a, b, to_points(latents), prompts, schedule(), n_t, seed).value;
        },
        py::arg("base"), py::arg("other"), py::arg("residual") = nullptr, py::arg("concepts"), py::arg("latents"),
        py::arg("n_t") = 8, py::arg("seed") = 0);

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code = 0;
          {
            py::gil_scoped_release release;
            code = run_cli(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
