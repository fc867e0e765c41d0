import json

import pytest

from conftest import tiny_config_dict
from gbaseg import pipeline as pl
from gbaseg.cli import main
from gbaseg.config import PipelineConfig, from_dict, load_config, section_names
from gbaseg.errors import ConfigError, NumericalDivergenceError
from gbaseg.io import load_volume
from gbaseg.singan import SinGANModel


def to_toml(d, prefix=""):
    """Minimal TOML writer for the flat two-level config dicts used here."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k} = {val(v)}" for k, v in d.items() if not isinstance(v, dict) and v is not None]
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines += [f"{kk} = {val(vv)}" for kk, vv in v.items() if vv is not None]
    return "\n".join(lines) + "\n"


@pytest.fixture
def toml_config(tmp_path):
    def make(**overrides):
        path = tmp_path / "config.toml"
        path.write_text(to_toml(tiny_config_dict(tmp_path, **overrides)))
        return path

    return make


# ---------------------------------------------------------------- config


def test_defaults_valid_and_round_trip():
    cfg = PipelineConfig()
    assert from_dict(cfg.to_dict()) == cfg
    assert cfg.selftrain.max_iters == 3 and cfg.selftrain.eps == 0.003 and cfg.i2i.mu_cyc == 10.0
    assert cfg.i2i.centers == "A"
    assert {"preprocess", "i2i", "singan", "gba", "selftrain", "evaluate", "seed", "paths"} <= set(section_names())


def test_load_and_override(toml_config, tmp_path):
    cfg = load_config(toml_config(), seed=7, out=str(tmp_path / "o"))
    assert cfg.seed == 7 and cfg.paths.out == str(tmp_path / "o") and cfg.phantom.n_source == 3


@pytest.mark.parametrize(
    "bad",
    [{"nope": 1}, {"i2i": {"epochs": -1}}, {"i2i": {"centers": "C"}}, {"gba": {"method": "magic"}}, {"seed": "x"}],
)
def test_schema_rejects(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    (tmp_path / "broken.toml").write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.toml")
    (tmp_path / "rules.toml").write_text('[gba]\nrules = "no_such_rules.json"\n')
    with pytest.raises(ConfigError):
        load_config(tmp_path / "rules.toml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "rules.toml", check_paths=True)


def test_replace_does_not_mutate():
    cfg = PipelineConfig()
    sub = cfg.replace(gba={"method": "naive"})
    assert sub.gba.method == "naive" and cfg.gba.method == "gba"


# ---------------------------------------------------------------- CLI exit codes


def test_exit_zero_full_run(toml_config, capsys):
    assert main(["run", "--config", str(toml_config()), "--settings", "none,gba"]) == 0
    assert "| iteration | none | gba |" in capsys.readouterr().out


def test_exit_two(toml_config, tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.toml")]) == 2
    assert main(["no-such-verb"]) == 2
    assert main(["evaluate", "--config", str(toml_config())]) == 2  # --model missing
    (tmp_path / "bad.toml").write_text("[i2i]\nepochs = -3\n")
    assert main(["run", "--config", str(tmp_path / "bad.toml")]) == 2


def test_exit_three_on_numerical_failure(toml_config, monkeypatch):
    def boom(*a, **k):
        raise NumericalDivergenceError("non-finite loss")

    monkeypatch.setattr(pl, "train_cyclegan", boom)
    assert main(["run", "--config", str(toml_config())]) == 3


def test_exit_four_on_failure_gate(toml_config):
    # every teacher scores at most 1.0, so a gate at 1.0 always fires
    assert main(["run", "--config", str(toml_config(selftrain={"failure_gate": 1.0}))]) == 4


def test_verbs_chain(toml_config, tmp_path, capsys):
    cfg = str(toml_config())
    c = ["--config", cfg]
    data, work = tmp_path / "bench", tmp_path / "w"
    assert main(["phantoms", *c, "--out", str(data)]) == 0
    for split in ("source_train", "target_train", "val", "test"):
        args = ["preprocess", *c, "--cases", str(data / split), "--out", str(work / split)]
        assert main(args + (["--no-masks"] if split == "target_train" else [])) == 0
    assert main(["train-i2i", *c, "--source", str(work / "source_train"), "--target", str(work / "target_train"),
                 "--out", str(work / "i2i")]) == 0
    assert main(["translate", *c, "--model", str(work / "i2i"), "--cases", str(work / "source_train"),
                 "--out", str(work / "pseudo")]) == 0
    assert main(["train-singan", *c, "--cases", str(work / "pseudo"), "--out", str(work / "singan")]) == 0
    models = sorted(p.name for p in (work / "singan").iterdir())
    assert len(models) == 3
    assert main(["augment", *c, "--cases", str(work / "pseudo"), "--models", str(work / "singan"),
                 "--out", str(work / "aug")]) == 0
    assert len(json.loads((work / "aug" / "augment_manifest.json").read_text())["augmentations"]) == 6
    assert main(["selftrain", *c, "--train", str(work / "pseudo"), str(work / "aug"), "--targets",
                 str(work / "target_train"), "--val", str(work / "val"), "--out", str(work / "st")]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["status"] == "max_iters"
    for it in (0, 2):
        assert main(["evaluate", *c, "--model", str(work / "st" / f"iter_{it}" / "model"), "--cases",
                     str(work / "test"), "--out", str(work / f"eval{it}")]) == 0
    capsys.readouterr()
    assert main(["rank", "--scores", str(work / "eval0" / "scores.csv"), str(work / "eval2" / "scores.csv")]) == 0
    ranks = json.loads(capsys.readouterr().out)
    assert set(ranks) == {str(work / "eval0" / "scores.csv"), str(work / "eval2" / "scores.csv")}
    assert sum(ranks.values()) == pytest.approx(3.0)
    img = next((work / "pseudo" / "images").iterdir())
    assert main(["harmonize", "--model", str(work / "singan" / models[0]), "--image", str(img),
                 "--out", str(work / "harm")]) == 0
    assert main(["plot", "--pseudo", str(work / "pseudo"), "--augmented", str(work / "aug"), "--targets",
                 str(work / "val"), "--out", str(work / "plots")]) == 0
    assert (work / "plots" / "kde_tumor_distribution.svg").exists()

    # single-file forms
    src_img = next((work / "source_train" / "images").iterdir())
    assert main(["translate", *c, "--model", str(work / "i2i"), "--in", str(src_img), "--out", str(work / "one.raw")]) == 0
    one = load_volume(work / "one.raw")
    assert one.shape == load_volume(src_img).shape and 0 <= one.data.min() and one.data.max() <= 1
    assert main(["train-singan", *c, "--slice", str(work / "one.raw"), "--r", "0.7", "--steps", "1",
                 "--out", str(work / "one_singan")]) == 0
    m = SinGANModel.load(work / "one_singan")
    assert m.schedule.r == pytest.approx(0.7) and m.schedule.sizes[0] == one.shape[:2]
    assert main(["harmonize", "--model", str(work / "one_singan"), "--in", str(work / "one.raw"), "--kstar", "1",
                 "--out", str(work / "one_h.nii.gz")]) == 0
    assert load_volume(work / "one_h.nii.gz").shape == one.shape
    assert main(["train-singan", *c, "--slice", str(work / "one.raw"), "--r", "1.5", "--out", str(work / "bad")]) == 2
