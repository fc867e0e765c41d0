import json

import pytest

from gbaseg.config import from_dict


def tiny_config_dict(root, seed=0, **overrides):
    """A pipeline that runs end to end in well under a minute."""
    rules = root / "rules.json"
    rules.write_text(json.dumps({"rules": [{"lambdas": [0.7, 1.3], "k_stars": [1], "volume_max": 1e9, "name": "all"}]}))
    d = {
        "seed": seed,
        "fmt": "raw",
        "paths": {"data": str(root / "data"), "out": str(root / "out")},
        "phantom": {"n_source": 3, "n_target": 2, "n_val": 2, "n_test": 2, "shape": [40, 40, 10], "fmt": "raw"},
        "preprocess": {"crop_xy": 32},
        "i2i": {"epochs": 1, "batch_size": 4, "ngf": 4, "ndf": 4, "n_blocks": 1},
        "translate": {"iterations": 2},
        "singan": {"steps_per_scale": 1, "nfc": 4, "r": 0.7},
        "gba": {"rules": str(rules)},
        "selftrain": {
            "max_iters": 2, "folds": 1, "epochs": 1, "iters_per_epoch": 2, "batch_size": 4, "base": 4,
            "failure_gate": -1.0, "eps": 0.0,
        },
    }
    for k, v in overrides.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    return d


@pytest.fixture
def tiny_config(tmp_path):
    def make(**overrides):
        return from_dict(tiny_config_dict(tmp_path, **overrides))

    return make


# ---------------------------------------------------------------- acceptance report

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        measured = {k: v for k, v in item.user_properties}
        _CRITERIA[name] = ("PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL", measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, measured) in _CRITERIA.items():
        detail = ", ".join(f"{k}={_short(v)}" for k, v in measured.items())
        terminalreporter.write_line(f"{status} {name}: {detail}")


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
