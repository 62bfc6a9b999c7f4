import csv
import json

import pytest
import yaml

from spmp import __version__
from spmp.cli import main
from spmp.config import ConfigError, ExperimentConfig, load_config

TINY = {
    "n_modes": 16,
    "n_steps": 64,
    "rate_steps": 256,
    "eps_values": [0.25, 0.125, 0.0625, 0.03125, 0.015625],
    "n_outer": 60,
    "n_inner": 8,
    "final_duality_samples": 20,
    "mp_knots": 2,
    "mp_outer": 2,
    "bdg_samples": 100,
    "oracle_samples": 10,
    "chunk": 25,
}


def write_config(path, **changes):
    data = {**TINY, **changes}
    path.write_text(yaml.safe_dump(data))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = ExperimentConfig().validate()
    assert cfg.n_points == 2 * cfg.n_modes
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert load_config(write_config(tmp_path / "c.yaml")).n_modes == 16
    assert load_config(None).to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "changes,key",
    [
        ({"n_steps": 0}, "n_steps"),
        ({"n_points": 40}, "n_points"),
        ({"master_seed": -1}, "master_seed"),
        ({"scenario": "nope"}, "scenario"),
        ({"eps_values": [0.25, 0.125, 0.0625]}, "eps_values"),
        ({"eps_values": [0.25, 0.125, 0.0625, 0.001]}, "eps_values"),
        ({"spike_t0": 0.9}, "spike_t0"),
        ({"spike_v": 0.3}, "spike_v"),
        ({"tolerances": {"bogus": 1}}, "tolerances"),
        ({"model_params": {"bogus": 1}}, "model_params"),
        ({"no_such_key": 1}, "no_such_key"),
    ],
)
def test_invalid_configuration_names_the_key(tmp_path, capsys, changes, key):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict({**TINY, **changes}).validate()
    assert info.value.key == key
    code = main(["simulate", "--config", str(write_config(tmp_path / "bad.yaml", **changes)),
                 "--out", str(tmp_path / "out")])
    assert code == 2
    assert key in capsys.readouterr().err


def test_missing_config_file_is_a_config_error(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "absent.yaml")]) == 2


def test_simulate_writes_tables_and_manifest(tmp_path):
    cfg_path = write_config(tmp_path / "c.yaml", scenario="lq", model_params={}, spike_v=1.0, base_control=-1.0)
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(out), "--seed", "3"]) == 0
    rows = read_csv(out / "state_summary.csv")
    assert len(rows) == 65 and float(rows[0]["t"]) == 0.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["version"] == __version__
    assert manifest["config"]["master_seed"] == 3
    assert set(manifest["files"]) == {"state_summary.csv", "schema.json", "report.json"}
    ExperimentConfig.from_dict(manifest["config"]).validate()
    schema = json.loads((out / "schema.json").read_text())
    assert schema["schema_version"] == 1
    assert all(schema["tables"]["state_summary.csv"].values())
    report = json.loads((out / "report.json").read_text())
    assert report["schema_version"] == 1 and report["checks"][0]["summary"]["J"] > 0


def test_simulation_is_deterministic_across_threads(tmp_path):
    cfg_path = write_config(tmp_path / "c.yaml")
    hashes = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        assert main(["simulate", "--config", str(cfg_path), "--out", str(out), "--threads", str(threads)]) == 0
        hashes.append(json.loads((out / "manifest.json").read_text())["files"])
    assert hashes[0] == hashes[1]


def test_rates_subcommand_writes_fits(tmp_path, capsys):
    out = tmp_path / "rates"
    code = main(["rates", "--config", str(write_config(tmp_path / "c.yaml")), "--out", str(out)])
    assert code in (0, 1)
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split()[2] for line in lines] == ["1", "2", "3", "4"]
    assert all(line.startswith(("[PASS]", "[FAIL]")) for line in lines)
    rows = read_csv(out / "rates.csv")
    assert [float(r["epsilon"]) for r in rows] == TINY["eps_values"]
    fits = {r["quantity"] for r in read_csv(out / "rate_fits.csv")}
    assert {"norm_Y_4", "norm_Z_2", "residual"} <= fits


def test_accept_compare_detects_identical_runs(tmp_path, capsys):
    cfg_path = write_config(tmp_path / "c.yaml")
    first, second = tmp_path / "a", tmp_path / "b"
    main(["oracle", "--config", str(cfg_path), "--out", str(first)])
    assert main(["oracle", "--config", str(cfg_path), "--out", str(second), "--threads", "2"]) == 0
    a = json.loads((first / "manifest.json").read_text())["files"]
    b = json.loads((second / "manifest.json").read_text())["files"]
    assert a == b
