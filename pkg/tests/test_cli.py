import csv
import json
import subprocess
import sys
import time

import pytest

from drcee.cli import excludes_zero, format_effect, load_config, main
from drcee.data import write_csv
from drcee.errors import ConfigError
from drcee.simulation import SimScenario, generate_panel


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    write_csv(generate_panel(SimScenario(n=80, T=12, seed=21), 0).panel, d / "panel.csv")
    return d / "panel.csv"


def _estimate_cfg(tmp_path, data, **extra):
    lines = ["[estimate]", f'data = "{data}"', 'f_spec = "1 + z"', 'e_formula = "r ~ z + t"',
             'mu_formula = "y ~ a*(z) + z"', "ptilde = 0.4"]
    lines += [f"{k} = {json.dumps(v)}" for k, v in extra.items()]
    p = tmp_path / "est.toml"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_estimate_glm_parametric(tmp_path, panel_csv, capsys):
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(_estimate_cfg(tmp_path, panel_csv)), "--out-dir", str(out)]) == 0
    d = json.loads((out / "estimate.json").read_text())
    assert d["variance_mode"] == "parametric"
    assert d["feature_names"] == ["(Intercept)", "z"]
    assert len(d["beta"]) == 2 and len(d["vcov"]) == 2
    assert d["metadata"]["config_hash"]
    assert "coefficient" in (out / "estimate.txt").read_text()
    assert "variance: parametric" in capsys.readouterr().out


def test_estimate_gam_nonparametric(tmp_path, panel_csv):
    cfg = _estimate_cfg(tmp_path, panel_csv, engine="gam")
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert json.loads((out / "estimate.json").read_text())["variance_mode"] == "nonparametric"


def test_flag_overrides_config(tmp_path, panel_csv):
    cfg = _estimate_cfg(tmp_path, panel_csv, engine="gam")
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(cfg), "--engine", "glm", "--out-dir", str(out)]) == 0
    assert json.loads((out / "estimate.json").read_text())["variance_mode"] == "parametric"


def test_relative_data_path(tmp_path, panel_csv):
    (tmp_path / "panel.csv").write_bytes(panel_csv.read_bytes())
    cfg = _estimate_cfg(tmp_path, "panel.csv")
    assert main(["estimate", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 0


def test_missing_column_exit_3(tmp_path, panel_csv):
    lines = panel_csv.read_text().splitlines()
    header = lines[0].split(",")
    k = header.index("prob_treat")
    bad = "\n".join(",".join(c for j, c in enumerate(line.split(",")) if j != k) for line in lines) + "\n"
    (tmp_path / "bad.csv").write_text(bad)
    out = tmp_path / "out"
    code = main(["estimate", "--config", str(_estimate_cfg(tmp_path, tmp_path / "bad.csv")), "--out-dir", str(out)])
    assert code == 3
    err = json.loads((out / "error.json").read_text())
    assert err["kind"] == "data" and "prob_treat" in err["message"]


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[estimate]\nbogus = 1\n")
    assert main(["estimate", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
    assert json.loads((tmp_path / "error.json").read_text())["exit_code"] == 2


def test_config_needs_one_block(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[estimate]\n[report]\n")
    with pytest.raises(ConfigError):
        load_config(p, "estimate")


def _simulate(tmp_path, name, *extra):
    out = tmp_path / name
    args = ["simulate", "--n", "60", "--n-reps", "2", "--seed", "5", "--implementations", "A", "B", "C", "D",
            "--parallelism", "1", "--out-dir", str(out), *extra]
    assert main(args) == 0
    return out


def test_simulate_small_and_deterministic(tmp_path):
    t0 = time.perf_counter()
    a = _simulate(tmp_path, "a")
    assert time.perf_counter() - t0 < 60
    b = _simulate(tmp_path, "b")
    for f in ("metrics.csv", "plot.csv", "metadata.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    rows = list(csv.DictReader(open(a / "metrics.csv")))
    assert len(rows) == 4 * 2
    meta = json.loads((a / "metadata.json").read_text())
    assert meta["seed"] == 5 and meta["failures"] == []


def test_simulate_grid_rows(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text("[simulate]\nn = [40, 50, 60, 70]\nn_reps = 1\nT = 12\nseed = 2\nparallelism = 1\n")
    out = tmp_path / "grid"
    assert main(["simulate", "--config", str(p), "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 32
    assert {int(r["n"]) for r in rows} == {40, 50, 60, 70}


def test_format_effect_examples():
    assert format_effect(0.47, 0.18, 0.76) == "0.47 (0.18, 0.76)*"
    assert format_effect(0.14, -0.01, 0.29) == "0.14 (-0.01, 0.29)"
    assert excludes_zero(-0.5, -0.1) and not excludes_zero(0.0, 1.0)


def _estimate_json(path, lo, hi):
    path.write_text(json.dumps({"feature_names": ["(Intercept)"], "beta": [(lo + hi) / 2], "ci_low": [lo],
                                "ci_high": [hi]}))
    return path


def test_report_stars(tmp_path, capsys):
    a = _estimate_json(tmp_path / "sig.json", 0.18, 0.76)
    b = _estimate_json(tmp_path / "flat.json", -0.01, 0.29)
    assert main(["report", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    assert "0.47 (0.18, 0.76)*" in out
    assert "0.14 (-0.01, 0.29)" in out and "0.29)*" not in out


def test_report_csv_and_json(tmp_path, capsys):
    a = _estimate_json(tmp_path / "sig.json", 0.18, 0.76)
    assert main(["report", str(a), "--format", "csv"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[1][-1] == "1"
    assert main(["report", str(a), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["estimates"][0]["significant"] is True


def test_report_metrics_csv(tmp_path, capsys):
    out = _simulate(tmp_path, "m")
    assert main(["report", str(out / "metrics.csv")]) == 0
    assert "coverage" in capsys.readouterr().out


def test_report_empty_input(tmp_path, caplog):
    assert main(["report", "--out-dir", str(tmp_path)]) == 0
    assert "no inputs" in caplog.text


def test_report_malformed(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    assert main(["report", str(p), "--out-dir", str(tmp_path)]) == 3


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "drcee.cli", "report", "--format", "json"], capture_output=True,
                       text=True, cwd=tmp_path)
    assert r.returncode == 0
    assert json.loads(r.stdout) == {"estimates": [], "metrics": []}
