import json
import math

import pytest

import infusion_lab as inf


@pytest.fixture(scope="module")
def base():
    weights, losses = inf.train_base("four-peak", steps=300, batch=16, seed=3)
    assert len(losses) == 300
    return weights


def test_world_layout():
    assert inf.world_concepts("four-peak") == ["A", "B", "C", "D"]
    assert inf.modality_centers("four-peak", "A") == [[-2.0, 2.0]]
    assert len(inf.modality_centers("grid25", "super")) == 25


def test_contract_errors_map_to_value_error():
    with pytest.raises(ValueError):
        inf.world_concepts("moon")
    with pytest.raises(inf.ContractError):
        inf.train_base("four-peak", steps=1, batch=0)


def test_w2_shift():
    a = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    b = [[x + 3.0, y] for x, y in a]
    assert inf.w2_gaussian(a, b) == pytest.approx(3.0, abs=1e-12)
    assert inf.w2_empirical_oracle(a, b) == pytest.approx(3.0, abs=1e-12)


def test_coverage():
    centers = inf.modality_centers("four-peak", "A")
    assert inf.mode_coverage([[-2.0, 2.0]] * 5, centers) == 1.0
    assert inf.mode_coverage([[-2.0, 2.0]] * 4, centers) == 0.0


def test_sampling_is_deterministic(base):
    a = inf.sample(base, "A", 32, seed=5, steps=10)
    b = inf.sample(base, "A", 32, seed=5, steps=10)
    assert a == b
    assert all(math.isfinite(x) and math.isfinite(y) for x, y in a)


def test_infusion_round_trip(base):
    residual, losses = inf.train_infusion(base, "four-peak", "A", steps=20, seed=1)
    assert len(losses) == 20
    assert residual.concept_token == "<obj1>"
    assert residual.base_fingerprint == base.fingerprint()
    back = inf.Residual.from_json(residual.to_json())
    assert back.deltas == residual.deltas
    assert inf.sample(base, "A", 16, seed=2, steps=10, residual=back) == inf.sample(
        base, "A", 16, seed=2, steps=10, residual=residual
    )
    latents = inf.sample(base, "B", 64, seed=9, steps=10)
    assert inf.latent_fisher_divergence(base, base, residual, concepts=["B", "C", "D"], latents=latents) == 0.0


def test_weights_round_trip(base):
    back = inf.DenoiserWeights.from_json(base.to_json())
    assert back.fingerprint() == base.fingerprint()


def test_cli_usage():
    code, out, err = inf.run_cli([])
    assert code == 1
    assert "Usage" in err


def test_cli_gen_world(tmp_path):
    code, out, err = inf.run_cli(["gen-world", "--out", str(tmp_path), "--seed", "1"])
    assert code == 0, err
    doc = json.loads((tmp_path / "world.json").read_text())
    assert "config_sha256" in json.dumps(doc)
