import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dpbilevel import cli
from dpbilevel.core import NumericalError
from dpbilevel.privacy import BudgetExceededError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def small_bilevel(tmp_path, seed=0):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps({"family": "quadratic",
                                    "params": {"d_x": 2, "d_y": 2, "A_norm": 0.5, "A_seed": 1, "n": 20000}}))
    return write(tmp_path, {"kind": "bilevel_full", "problem": {"manifest": "m.json"}, "run": {"seed": seed},
                            "outer_overrides": {"T": 5}, "inner_overrides": {"T_cap": 50}})


def test_leak_demo_reports_dataset_mean(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(CONFIGS / "leak_demo.json"), "--out-dir", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["result"]["dataset_mean"] == [2.0, 0.0]
    assert np.allclose(rep["result"]["hypergradient"], [2.0, 0.0], rtol=0, atol=1e-12)
    for name in ("trajectory.csv", "ledger.json", "timing.json"):
        assert (out / name).exists()


def test_missing_dataset_exits_2_naming_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    cfg = write(tmp_path, {"kind": "leak_demo", "dataset": str(missing)})
    assert cli.main(["run", str(cfg), "--out-dir", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["path"] == str(missing)
    assert json.loads((tmp_path / "o" / "error.json").read_text())["path"] == str(missing)


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "absent.json")]) == 2


@pytest.mark.parametrize("cfg", [
    {"kind": "nonsense"},
    {"kind": "leak_demo", "budget": {"epsilon": -1}},
    {"kind": "leak_demo", "settings": {"unknown_key": 1}},
    {"kind": "leak_demo", "problem": {"family": "quadratic"}},
    {"kind": "bilevel_full", "run": {"b_out": 10}},
    {"kind": "bilevel_full", "outer_overrides": {"T": "many"}},
])
def test_invalid_config_exits_2(tmp_path, capsys, cfg):
    assert cli.main(["run", str(write(tmp_path, cfg)), "--out-dir", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["message"]


@pytest.mark.parametrize("exc,code", [(BudgetExceededError("over"), 3), (NumericalError("nan"), 4)])
def test_failure_classes_map_to_exit_codes(tmp_path, capsys, monkeypatch, exc, code):
    def boom(cfg):
        raise exc
    monkeypatch.setitem(cli.RUNNERS, "leak_demo", boom)
    assert cli.main(["run", str(CONFIGS / "leak_demo.json"), "--out-dir", str(tmp_path)]) == code
    assert json.loads((tmp_path / "error.json").read_text())["exit_code"] == code


def test_same_seed_gives_byte_identical_report(tmp_path, capsys):
    cfg = small_bilevel(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(cfg), "--out-dir", str(a)]) == 0
    assert cli.main(["run", str(cfg), "--out-dir", str(b)]) == 0
    for name in ("report.json", "trajectory.csv", "ledger.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    assert cli.main(["run", str(cfg), "--seed", "1", "--out-dir", str(c)]) == 0
    assert (a / "report.json").read_bytes() != (c / "report.json").read_bytes()


def test_report_embeds_resolved_parameters(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["run", str(small_bilevel(tmp_path)), "--out-dir", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    conf = rep["config"]
    assert conf["problem"]["params"]["n"] == 20000 and conf["problem"]["params"]["r_a"] == 1.0
    assert conf["outer_overrides"] == {"T": 5} and conf["inner_overrides"] == {"T_cap": 50}
    params = rep["result"]["params"]
    assert params["T"] == 5 and {"lam", "eta", "sigma2", "alpha", "constants"} <= set(params)
    ledger = json.loads((out / "ledger.json").read_text())
    assert ledger["total"]["epsilon"] <= 1.0 and ledger["total"]["delta"] <= 1e-6


def test_print_defaults(capsys):
    assert cli.main(["--print-defaults"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert "settings_by_kind" in d and "params_by_family" in d
    assert cli.main(["--print-defaults", "scaling_sweep"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["kind"] == "scaling_sweep" and d["settings"]["ns"][0] == 1024


def test_out_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(["run", str(CONFIGS / "leak_demo.json")]) == 0
    assert (tmp_path / "env" / "report.json").exists()


def test_verify_passes(capsys):
    assert cli.main(["verify", "--quick"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_verify_pattern_is_seed_robust(capsys):
    cli.main(["verify", "--quick", "--seed", "0"])
    a = [ln.split()[:2] for ln in capsys.readouterr().out.splitlines()[2:-1]]
    cli.main(["verify", "--quick", "--seed", "7"])
    b = [ln.split()[:2] for ln in capsys.readouterr().out.splitlines()[2:-1]]
    assert a == b


def test_verify_halved_lipschitz_constant_fails_by_name(capsys):
    assert cli.main(["verify", "--quick", "--scale", "L0f=0.5"]) == 1
    fails = [ln for ln in capsys.readouterr().out.splitlines() if "FAIL" in ln]
    assert fails and all("L0f" in ln for ln in fails)


def test_console_script_module_entry(tmp_path):
    env = {**os.environ, cli.OUT_DIR_ENV: str(tmp_path)}
    res = subprocess.run([sys.executable, "-m", "dpbilevel.cli", "run", str(CONFIGS / "leak_demo.json")],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0 and json.loads(res.stdout)["status"] == "ok"
