import json
import subprocess
import sys
from pathlib import Path

import pytest

from gbaseg.config import load_config
from gbaseg.gba import load_rules

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"


def run(name, *args):
    return subprocess.run([sys.executable, str(SCRIPTS / name), *args], capture_output=True, text=True, timeout=600)


@pytest.mark.parametrize("name", sorted(p.name for p in SCRIPTS.glob("run_*.py")))
def test_help(name):
    res = run(name, "--help")
    assert res.returncode == 0, res.stderr
    assert "usage" in res.stdout


def test_van_cittert_script(tmp_path):
    res = run("run_van_cittert.py", "--n", "2", "--iterations", "3", "--out", str(tmp_path / "vc.json"))
    assert res.returncode == 0, res.stderr
    out = json.loads((tmp_path / "vc.json").read_text())
    assert len(out["cases"]) == 2 and json.loads(res.stdout) == out


@pytest.mark.parametrize("name", ["pipeline.toml", "smoke.toml"])
def test_example_configs_load(name):
    cfg = load_config(SCRIPTS / "configs" / name)
    assert load_rules(SCRIPTS.parent / cfg.gba.rules)
