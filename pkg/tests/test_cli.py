import csv
import json
from pathlib import Path

import pytest

from cvsi.cli import main, write_csv
from cvsi.config import ConfigError, RunConfig, config_from_dict, parse_config

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def minimal(**extra):
    cfg = {"experiment": "variance-profile", "seed": 1, "target": {"kind": "random-gmm", "n_components": 3}}
    cfg.update(extra)
    return cfg


def write(tmp_path, cfg, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_minimal_config_gets_defaults():
    cfg = config_from_dict(minimal())
    assert isinstance(cfg, RunConfig)
    assert cfg.schedule.kind == "vp-linear"
    assert cfg.schedule.sigma_max == "auto"
    assert cfg.t_grid_num == 32 and cfg.k_values == [10]
    assert cfg.mcmc.burn_in == 100_000


@pytest.mark.parametrize(
    "cfg, key",
    [
        (minimal(estmator=["dsi"]), "estmator"),
        (minimal(k_values=[-5]), "k_values[0]"),
        (minimal(k_values=[1.5]), "k_values[0]"),
        (minimal(schedule={"kind": "vp-linear", "betamax": 3}), "schedule.betamax"),
        (minimal(schedule={"kind": "vp-linear", "t_min": 0.7}), "schedule.t_min"),
        (minimal(estimators=["dsi", "nope"]), "estimators[1]"),
        (minimal(experiment="bogus"), "experiment"),
        (minimal(n_chains=0), "n_chains"),
        (minimal(clip_c="yes"), "clip_c"),
        ({"experiment": "sample", "target": {"kind": "gaussian"}}, "seed"),
        (minimal(target={"kind": "gmm-file", "path": "/does/not/exist.json"}), "target.path"),
        (minimal(target={"kind": "dw4"}), "target.kind"),
        ({**minimal(), "experiment": "nll"}, "dims"),
    ],
)
def test_config_errors_name_the_key(cfg, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(cfg)
    assert info.value.key == key
    assert key in str(info.value)


def test_relative_paths_resolve_against_config_file(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "g.json").write_text(
        json.dumps({"weights": [1.0], "means": [[0.0]], "covariances": [[1.0]]})
    )
    path = write(tmp_path / "sub", minimal(experiment="posterior-check", target={"kind": "gmm-file", "path": "g.json"}))
    cfg = parse_config(path)
    assert Path(cfg.target.path).is_file()


def test_exit_code_2_on_bad_config(tmp_path, capsys):
    assert main(["run", str(write(tmp_path, minimal(estmator=1)))]) == 2
    assert "estmator" in capsys.readouterr().err
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_exit_code_1_on_runtime_failure(tmp_path, capsys):
    cfg = minimal(experiment="posterior-check", target={"kind": "random-gmm", "n_components": 2, "dim": 2})
    assert main(["run", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 1
    assert "one-dimensional" in capsys.readouterr().err


def test_variance_profile_run_writes_rows(tmp_path):
    cfg = minimal(t_grid_num=4, n_xt=2, k_values=[8])
    assert main(["run", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.reader(open(tmp_path / "o" / "variance_profile_K8.csv")))
    assert rows[0][:2] == ["t", "var_dsi"]
    assert len(rows) == 1 + 4
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert {"numpy", "scipy", "cvsi"} <= set(manifest["versions"])
    assert manifest["wall_time_s"] > 0
    assert manifest["config"]["experiment"] == "variance-profile"


def test_sample_run_reports_nll(tmp_path, monkeypatch):
    cfg = {
        "experiment": "sample",
        "seed": 3,
        "target": {"kind": "random-gmm", "n_components": 2, "dim": 2},
        "estimators": ["exact", "cvsi"],
        "k_values": [4],
        "n_chains": 50,
        "n_steps": 20,
        "n_reference": 1000,
    }
    monkeypatch.setenv("CVSI_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["run", str(write(tmp_path, cfg))]) == 0
    manifest = json.loads((tmp_path / "env_out" / "manifest.json").read_text())
    assert set(manifest["summary"]["nll"]) == {"exact_K0", "cvsi_K4"}
    assert isinstance(manifest["summary"]["ground_truth_nll"], float)
    assert (tmp_path / "env_out" / "samples_cvsi_K4.csv").exists()
    assert (tmp_path / "env_out" / "diagnostics_cvsi_K4.json").exists()


def test_seed_flag_and_threads_keep_outputs_deterministic(tmp_path):
    cfg = minimal(experiment="coeff-profile", t_grid_num=3, n_xt=2, k_values=[8])
    path = write(tmp_path, cfg)
    outs = []
    for name, threads in (("a", "1"), ("b", "2")):
        assert main(["run", str(path), "--seed", "9", "--threads", threads, "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "coeff_profile_K8.csv").read_bytes())
    assert outs[0] == outs[1]
    assert main(["run", str(path), "--seed", "10", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "coeff_profile_K8.csv").read_bytes() != outs[0]


def test_csv_float_format(tmp_path):
    write_csv(tmp_path / "x.csv", ["a", "b"], [[0.1, None], [1e-300, 3]])
    assert (tmp_path / "x.csv").read_text() == "a,b\n0.1,\n1e-300,3\n"


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.name)
def test_bundled_configs_parse(path):
    if path.name.startswith("gmm_"):
        pytest.skip("mixture parameter file, not a run config")
    parse_config(path)
