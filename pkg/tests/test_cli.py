import json

import numpy as np
import pytest
import yaml

from bchm.boundary import load_model
from bchm.cli import main

SMALL = {"n_design": 30, "prior_draws": 50_000, "mc_points": 3_000, "m_samples": 20,
         "n_restarts": 1}


def write_config(path, **doc):
    doc.setdefault("seed", 1)
    doc.setdefault("history", SMALL)
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def error_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "cfg.yaml", out="run")
    for cmd in ("synthetic", "fit-temporal", "fit-spatial"):
        assert main([cmd, "--config", cfg]) == 0
    return d, cfg


def test_fit_writes_three_periods_of_two_temporal_and_two_spatial(fitted):
    d, _ = fitted
    model = load_model(d / "run" / "model")
    assert len(model.periods) == 3
    assert np.bincount(model.temporal_period).tolist() == [2, 2, 2]
    plain = [p for p, e in zip(model.spatial_period, model.spatial_expert) if not e]
    assert np.bincount(plain).tolist() == [2, 2, 2]
    assert sum(model.spatial_expert) == 1


def test_fit_rerun_is_byte_identical(fitted, tmp_path):
    d, cfg = fitted
    before = (d / "run" / "model" / "manifest.json").read_bytes()
    spatial = (d / "run" / "model" / "spatial.csv").read_bytes()
    assert main(["fit-temporal", "--config", cfg]) == 0
    assert main(["fit-spatial", "--config", cfg]) == 0
    assert (d / "run" / "model" / "manifest.json").read_bytes() == before
    assert (d / "run" / "model" / "spatial.csv").read_bytes() == spatial


def test_missing_observation_file_exits_2_with_path(tmp_path, fitted, capsys):
    d, _ = fitted
    missing = tmp_path / "nowhere" / "obs.csv"
    cfg = write_config(tmp_path / "c.yaml", out=str(d / "run"),
                       inputs={"ensemble": str(d / "run" / "inputs" / "ensemble.csv"),
                               "observations": str(missing)})
    assert main(["fit-temporal", "--config", cfg]) == 2
    err = error_json(capsys)
    assert err["exit_code"] == 2 and str(missing) in err["message"]


def test_generate_writes_full_field(fitted):
    d, cfg = fitted
    assert main(["generate", "--config", cfg]) == 0
    lines = (d / "run" / "boundary.csv").read_text().splitlines()
    model = load_model(d / "run" / "model")
    assert len(lines) == 1 + model.ell


def test_always_true_spec_keeps_everything(tmp_path):
    outputs = [{"id": "vol21", "kind": "scalar", "waves": [1], "sigma_e": 4.0, "bound": "1e12"}]
    cfg = write_config(tmp_path / "c.yaml", out="run", outputs=outputs,
                       waves=[{"combine": "all"}])
    for cmd in ("synthetic", "fit-temporal", "fit-spatial", "prior-space"):
        assert main([cmd, "--config", cfg]) == 0
    for cmd in ("design", "simulate", "wave"):
        assert main([cmd, "--config", cfg, "--wave", "1"]) == 0
    report = json.loads((tmp_path / "run" / "wave_1" / "report.json").read_text())
    assert report["rule_out_rates"] == {"vol21": 0.0}
    assert report["n_pool_kept"] > 0
    prior = json.loads((tmp_path / "run" / "prior" / "summary.json").read_text())
    assert report["fraction"] == pytest.approx(prior["acceptance"], rel=1e-12)
    assert (tmp_path / "run" / "wave_1" / "volume_fan.png").stat().st_size > 0


def test_malformed_bound_names_the_spec(tmp_path, fitted, capsys):
    d, _ = fitted
    outputs = [{"id": "vol21", "kind": "scalar", "waves": [1], "bound": "3^^2"}]
    cfg = write_config(tmp_path / "c.yaml", out=str(d / "run"), outputs=outputs)
    assert main(["prior-space", "--config", cfg]) == 22
    err = error_json(capsys)
    assert err["error"] == "ConfigError" and "vol21" in err["message"]


@pytest.mark.parametrize("doc, code", [
    ({"history": {"n_design": "many"}}, 22),
    ({"unknown_key": 1}, 22),
])
def test_schema_violations_are_config_errors(tmp_path, capsys, doc, code):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(doc))
    assert main(["fit-temporal", "--config", str(cfg)]) == code
    assert error_json(capsys)["exit_code"] == code


def test_failure_paths_have_distinct_codes(tmp_path, capsys):
    bad_yaml = tmp_path / "bad.yaml"
    bad_yaml.write_text("seed: [1,\n")
    codes = {
        "usage": main(["no-such-command"]),
        "missing_config": main(["fit-temporal", "--config", str(tmp_path / "absent.yaml")]),
        "bad_yaml": main(["fit-temporal", "--config", str(bad_yaml)]),
        "wave_missing_index": main(["wave"]),
    }
    assert codes == {"usage": 64, "missing_config": 2, "bad_yaml": 22, "wave_missing_index": 64}
    lines = capsys.readouterr().err.strip().splitlines()
    assert all("exit_code" in json.loads(line) for line in lines)


def test_missing_model_before_fit(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", out="run")
    assert main(["synthetic", "--config", cfg]) == 0
    assert main(["prior-space", "--config", cfg]) == 2
    assert "manifest.json" in error_json(capsys)["message"]
