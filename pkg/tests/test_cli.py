import csv
import json
import subprocess
import sys

import pytest

from qbsdej.cli import main
from qbsdej.config import gaussian_entropic_oracle, parse_config
from qbsdej.errors import ConfigurationError

MODEL = {"T": 1, "N": 4, "d": 1, "marks": [{"x": 1, "lambda": 0.5}]}


def _write(tmp_path, kind, generator=None, terminal=None, **extra):
    cfg = {
        "model": dict(MODEL),
        "generator": generator or {"kind": "entropic", "gamma": 1},
        "terminal": terminal or {"kind": "random", "low": -0.4, "high": 0.4},
        "study": {"kind": kind, **extra.pop("study", {})},
        **extra,
    }
    path = tmp_path / f"{kind}.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(args):
    return main([str(a) for a in args])


def test_entropic_convergence_pass(tmp_path):
    cfg = _write(tmp_path, "entropic-convergence",
                 terminal={"kind": "state", "brownian": 1, "clip": [-0.3, 0.3]},
                 model={**MODEL, "layout": "recombining"})
    out = tmp_path / "out"
    assert _run(["entropic-convergence", "--config", cfg, "--out", out, "--quiet"]) == 0
    rows = list(csv.DictReader((out / "entropic-convergence.csv").open()))
    errs = [float(r["abs_error"]) for r in rows]
    assert [int(r["N"]) for r in rows] == [4, 8, 16, 32]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    summary = json.loads((out / "summary.json").read_text())
    assert summary["pass"] and summary["prng"] == "numpy.PCG64"


def test_contraction_rows(tmp_path):
    cfg = _write(tmp_path, "contraction", terminal={"kind": "state", "brownian": 1, "transform": "tanh"})
    out = tmp_path / "out"
    assert _run(["contraction", "--config", cfg, "--out", out, "--quiet"]) == 0
    rows = list(csv.DictReader((out / "contraction.csv").open()))
    d = [float(r["ball_distance"]) for r in rows]
    assert d[-1] < 1e-12 and all(b < a for a, b in zip(d, d[1:]))


def test_missing_gamma_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, "contraction", generator={"kind": "entropic"})
    assert _run(["contraction", "--config", cfg, "--out", tmp_path]) == 2
    assert "generator.entropic.gamma" in capsys.readouterr().err


@pytest.mark.parametrize("mutate", [
    lambda c: c["model"].update(N=0),
    lambda c: c["model"]["marks"][0].update(**{"lambda": 5}),
    lambda c: c["study"].update(kind="splitting"),
    lambda c: c.update(extra=1),
    lambda c: c["generator"].update(kind="cubic"),
])
def test_invalid_configs_exit_2(tmp_path, mutate):
    path = _write(tmp_path, "contraction")
    cfg = json.loads(path.read_text())
    mutate(cfg)
    path.write_text(json.dumps(cfg))
    assert _run(["contraction", "--config", path, "--out", tmp_path, "--quiet"]) == 2


def test_malformed_json_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert _run(["stability", "--config", path]) == 2
    assert "invalid JSON" in capsys.readouterr().err
    assert _run(["stability", "--config", tmp_path / "absent.json"]) == 2


def test_divergence_exit_1_with_report(tmp_path):
    cfg = _write(tmp_path, "contraction", study={"max_iters": 1})
    out = tmp_path / "out"
    assert _run(["contraction", "--config", cfg, "--out", out, "--quiet"]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert not summary["pass"]
    assert summary["divergence"]["error"] == "PicardDivergence"
    assert len(summary["divergence"]["trace"]["distances"]) == 1


def test_property_failure_exit_1(tmp_path):
    cfg = _write(tmp_path, "entropic-convergence",
                 terminal={"kind": "state", "brownian": 1, "clip": [-0.3, 0.3]},
                 model={**MODEL, "layout": "recombining"}, study={"N_list": [4, 8], "min_order": 5})
    assert _run(["entropic-convergence", "--config", cfg, "--out", tmp_path, "--quiet"]) == 1


def test_seeded_runs_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, "stability", study={"trials": 5}, seed=11)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out in (a, b):
        assert _run(["stability", "--config", cfg, "--out", out, "--quiet"]) == 0
    assert (a / "stability.csv").read_bytes() == (b / "stability.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    assert _run(["stability", "--config", cfg, "--out", c, "--seed", "12", "--quiet"]) == 0
    assert (a / "stability.csv").read_bytes() != (c / "stability.csv").read_bytes()
    assert json.loads((c / "summary.json").read_text())["seed"] == 12


def test_comparison_and_splitting_studies(tmp_path):
    cfg = _write(tmp_path, "comparison",
                 generator={"kind": "royer", "gamma": 1, "jump_coef": 0.5, "a": 0.2}, study={"trials": 10})
    assert _run(["comparison", "--config", cfg, "--out", tmp_path / "c", "--quiet"]) == 0
    cfg = _write(tmp_path, "splitting", terminal={"kind": "state", "brownian": 1, "transform": "sin", "offset": 0.3})
    assert _run(["splitting", "--config", cfg, "--out", tmp_path / "s", "--quiet"]) == 0
    summary = json.loads((tmp_path / "s" / "summary.json").read_text())
    assert summary["key_metrics"]["n"] == 10


def test_seed_flag_validation(tmp_path):
    cfg = _write(tmp_path, "stability")
    with pytest.raises(SystemExit):
        main(["stability", "--config", str(cfg), "--seed", "-1"])


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, "stability", study={"trials": 2})
    proc = subprocess.run([sys.executable, "-m", "qbsdej", "stability", "--config", str(cfg),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["study"] == "stability"


def test_parse_config_paths():
    with pytest.raises(ConfigurationError, match="model.T"):
        parse_config({"model": {"N": 2}, "generator": {"kind": "zero"},
                      "terminal": {"kind": "constant", "value": 1}, "study": {"kind": "stability"}})


def test_gaussian_oracle_limits():
    # without clipping the entropic value of a Gaussian is the mean plus gamma var / 2
    assert gaussian_entropic_oracle(2.0, 1.5, 0.1, 1.0, None) == pytest.approx(0.1 + 1.5)
    # an extremely narrow clip pins the value to the clip level
    assert gaussian_entropic_oracle(1.0, 1.0, 5.0, 1.0, (-0.01, -0.01)) == pytest.approx(-0.01)
