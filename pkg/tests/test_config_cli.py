import hashlib
import json
import subprocess
import sys

import pytest

from mpo_sim.cli import main
from mpo_sim.config import ConfigError, apply_overrides, default_config_path, load_config, observable

CFG = default_config_path()


def small_cfg(tmp_path, **run):
    raw = json.loads(CFG.read_text())
    raw["layout"]["trunc"] = [4, 4, 3]
    raw["initial_state"]["basis"] = [1, 1, 0]
    raw["run"].update({"t_final": 1.0, "dt": 0.05, "grid_step": 0.5, "n_traj": 16, "seed": 5})
    raw["run"].update(run)
    raw["tolerances"]["leak_tol"] = 1.0
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw, indent=2))
    return p


def test_default_config_loads():
    cfg = load_config(CFG)
    assert cfg.layout.trunc == (12, 12, 8)
    assert cfg.run.mode == "master"
    assert list(cfg.t_grid()) == [float(i) for i in range(11)]
    assert set(cfg.observable_ops()) == {"n_a1", "n_a2", "n_b1", "quad_a1@0.0"}


def test_observable_names():
    cfg = load_config(CFG)
    q = observable("quad_a1@0.5", cfg.layout)
    assert (q - q.dag()).max_abs() < 1e-14
    with pytest.raises(ValueError):
        observable("x_a1", cfg.layout)


def test_overrides():
    raw = {"a": {"b": 1}}
    assert apply_overrides(raw, ["a.b=2", "a.c=[1,2]", "d=hello"]) == {"a": {"b": 2, "c": [1, 2]}, "d": "hello"}
    assert raw == {"a": {"b": 1}}
    with pytest.raises(ConfigError):
        apply_overrides(raw, ["nokey"])


@pytest.mark.parametrize(
    "override, field",
    [
        ("model.wp=[2.5]", "model.wp"),
        ("run.mode=\"bogus\"", "run.mode"),
        ("run.dt=0.3", "run.t_final"),
        ("run.grid_step=0.12", "run.grid_step"),
        ("model.g=0", "model.g"),
        ("run.frame=\"tilted\"", "run.frame"),
        ("initial_state.basis=[12,0,0]", "initial_state"),
        ("run.observables=[\"n_c1\"]", "run.observables"),
    ],
)
def test_config_errors_are_anchored(override, field):
    with pytest.raises(ConfigError) as ei:
        load_config(CFG, [override])
    assert ei.value.field == field
    assert ei.value.line is not None and ei.value.path == str(CFG)


def test_stochastic_needs_seed(tmp_path):
    raw = json.loads(CFG.read_text())
    raw["run"]["mode"] = "jump"
    del raw["run"]["seed"]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw))
    with pytest.raises(ConfigError, match="seed"):
        load_config(p)


def test_unknown_top_level_key_rejected(tmp_path):
    raw = json.loads(CFG.read_text())
    raw["tolerance"] = {"leak_tol": 1e-3}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw, indent=2))
    with pytest.raises(ConfigError, match="unknown top-level") as ei:
        load_config(p)
    assert ei.value.field == "tolerance" and ei.value.line is not None
    # underscore-prefixed keys are free-form notes
    assert load_config(CFG, ["_author=\"x\""]).raw["_author"] == "x"


@pytest.mark.parametrize(
    "override, match",
    [
        ("run.counting=[1,99]", "distinct flat indices"),
        ("run.counting=[1,1]", "distinct flat indices"),
        ("run.homodyne=[1]", "homodyne detection"),
    ],
)
def test_detector_assignment_validated(override, match):
    with pytest.raises(ConfigError, match=match) as ei:
        load_config(CFG, [override])
    assert ei.value.field == override.split("=")[0]
    with pytest.raises(ConfigError, match="both counted and homodyned"):
        load_config(CFG, ["run.counting=[4]", "run.homodyne=[4,5]"])


def test_cli_detector_override(tmp_path):
    cfg = small_cfg(tmp_path, mode="homodyne", dt=0.01, counting=[1], homodyne=[4, 5])
    out = tmp_path / "o"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    rec = json.loads((out / "records.jsonl").read_text().splitlines()[0])
    assert set(rec["jumps"]) == {"1"} and set(rec["homodyne"]) == {"4", "5"}
    names = {line.split(", ")[1] for line in (out / "stats.csv").read_text().splitlines()[1:]}
    assert {"rate_1", "signal_4", "signal_5"} <= names and "rate_2" not in names


def test_parse_error_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "layout": {\n    "n": 2,,\n  }\n}\n')
    with pytest.raises(ConfigError) as ei:
        load_config(p)
    assert ei.value.line == 3


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_cli_master_run(tmp_path, capsys):
    cfg = small_cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["files"]) == {"timeseries.csv", "summary.json"}
    for name, digest in man["files"].items():
        assert _sha(out / name) == digest
    assert man["exit_code"] == 0 and man["config"]["run"]["mode"] == "master"
    assert "numpy" in man["versions"]
    header = (out / "timeseries.csv").read_text().splitlines()[0]
    assert header == "t, trace_err, pos_err, edge_leak, n_a1, n_a2, n_b1, quad_a1@0.0"


@pytest.mark.parametrize("mode", ["jump", "homodyne"])
def test_cli_stochastic_run_is_reproducible(tmp_path, mode):
    cfg = small_cfg(tmp_path, mode=mode, dt=0.01)
    digests = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert main(["run", str(cfg), "--out", str(out)]) == 0
        digests.append(_sha(out / "records.jsonl"))
        assert (out / "stats.csv").read_text().startswith("t, obs, mean, se\n")
    assert digests[0] == digests[1]


def test_cli_exit_codes(tmp_path, capsys):
    cfg = small_cfg(tmp_path)
    assert main(["run", str(cfg), "--out", str(tmp_path / "e"), "--override", "model.wp=[3]"]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["field"] == "model.wp"
    assert main(["run", str(cfg), "--out", str(tmp_path / "g"), "--override", "tolerances.leak_tol=1e-30"]) == 3
    assert json.loads((tmp_path / "g" / "error.json").read_text())["error"] == "numerical_guard"
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_cli_verify_json_and_exit(tmp_path, capsys):
    cfg = small_cfg(tmp_path)
    code = main(["verify", str(cfg), "--out", str(tmp_path / "v")])
    data = json.loads(capsys.readouterr().out)
    names = {d["name"]: d for d in data}
    assert "scriptL_bound" in names and "HN_commute" in names
    all_pass = all(d["status"] == "pass" for d in data)
    assert code == (0 if all_pass else 4)
    assert json.loads((tmp_path / "v" / "report.json").read_text()) == data


def test_console_script_entry_point(tmp_path):
    cfg = small_cfg(tmp_path)
    r = subprocess.run([sys.executable, "-m", "mpo_sim", "run", str(cfg), "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "m" / "manifest.json").exists()
