"""Command line front end: ``estimate``, ``simulate`` and ``report``.

Every command reads an optional TOML config with one block named after the
command; scalar fields may be overridden by flags. Relative paths in a config
resolve against the config file's directory. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numerical error. A non-zero exit always leaves an
``error.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import load_csv, validate_positivity
from .errors import CeeError, ConfigError, DataError
from .estimator import CeeModel, Stage1Config, estimate_cee, resolve_variance_mode
from .nuisance import DEFAULT_LAMBDA_GRID
from .simulation import (
    IMPLEMENTATIONS,
    SimScenario,
    read_metrics_csv,
    run_study,
    write_metrics_csv,
    write_plot_csv,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("drcee")

COMMANDS = ("estimate", "simulate", "report")
_ESTIMATE_KEYS = {
    "data", "schema", "covariates", "link", "f_spec", "delta", "pi_mode", "pi_value", "ptilde", "e_formula",
    "mu_formula", "mu_family", "engine", "variance", "lambda_grid", "level", "out_dir",
}
_SIMULATE_KEYS = {
    "pattern_e", "pattern_mu0", "T", "p_treat", "beta_true", "n", "n_reps", "seed", "link", "implementations",
    "parallelism", "engine", "level", "out_dir",
}
_REPORT_KEYS = {"inputs", "format", "level", "out_dir"}


# --- config ----------------------------------------------------------------------


def load_config(path: str | Path | None, command: str) -> tuple[dict, Path]:
    """Return the command block and the directory relative paths resolve against."""
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    blocks = [k for k in raw if k in COMMANDS]
    stray = [k for k in raw if k not in COMMANDS]
    if stray:
        raise ConfigError(f"unknown top-level keys in {path}: {stray}")
    if blocks != [command]:
        raise ConfigError(f"{path} must contain exactly one [{command}] block, found {blocks or 'none'}")
    block = raw[command]
    allowed = {"estimate": _ESTIMATE_KEYS, "simulate": _SIMULATE_KEYS, "report": _REPORT_KEYS}[command]
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{command}]: {unknown}")
    return dict(block), path.resolve().parent


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# settings that do not change results stay out of the recorded config
_RUNTIME_KEYS = {"out_dir", "parallelism"}


def metadata(command: str, cfg: dict, seed=None) -> dict:
    core = {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS}
    return {
        "command": command,
        "config": core,
        "config_hash": config_hash(core),
        "seed": seed,
        "versions": {
            "drcee": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# --- tables ---------------------------------------------------------------------


def _num(x, digits=3):
    return f"{x:.{digits}f}" if isinstance(x, (int, float)) and np.isfinite(x) else "nan"


def excludes_zero(lo, hi) -> bool:
    return lo > 0 or hi < 0


def format_effect(est, lo, hi, digits=2) -> str:
    """``0.47 (0.18, 0.76)*`` style cell; the star marks a CI excluding zero."""
    star = "*" if excludes_zero(lo, hi) else ""
    return f"{est:.{digits}f} ({lo:.{digits}f}, {hi:.{digits}f}){star}"


def align(header, rows) -> str:
    cols = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[j]) for r in cols) for j in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cols]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def coefficient_table(result: dict) -> str:
    rows = []
    for j, name in enumerate(result["feature_names"]):
        lo, hi = result["ci_low"][j], result["ci_high"][j]
        rows.append([name, _num(result["beta"][j], 4), _num(result["se"][j], 4), _num(lo, 4), _num(hi, 4),
                     "*" if excludes_zero(lo, hi) else ""])
    level = int(round(100 * result.get("ci_level", 0.95)))
    return align(["coefficient", "estimate", "se", f"ci{level}_low", f"ci{level}_high", ""], rows)


# --- commands ------------------------------------------------------------------


def cmd_estimate(cfg: dict, base: Path, out_dir: Path) -> dict:
    if "data" not in cfg:
        raise ConfigError("estimate needs a data path")
    if "f_spec" not in cfg:
        raise ConfigError("estimate needs an f_spec, e.g. \"1 + t\"")
    data_path = _resolve(base, cfg["data"])
    if not data_path.exists():
        raise ConfigError(f"data file not found: {data_path}")
    schema = cfg.get("schema")
    if schema is not None and not isinstance(schema, dict):
        raise ConfigError("schema must be a table mapping roles to column names")
    delta = int(cfg.get("delta", 1))
    panel = load_csv(data_path, schema=schema, delta=delta, covariates=cfg.get("covariates"))
    pos = validate_positivity(panel)
    if not pos.ok:
        warnings.warn(f"{len(pos)} available decision points violate positivity margin {pos.margin}",
                      RuntimeWarning, stacklevel=2)
    model = CeeModel.from_text(cfg["f_spec"], link=cfg.get("link", "identity"), delta=delta,
                               pi_mode=cfg.get("pi_mode"), pi_value=cfg.get("pi_value"))
    link = model.link
    stage1 = Stage1Config(
        e_formula=cfg.get("e_formula"),
        mu_formula=cfg.get("mu_formula"),
        ptilde=cfg.get("ptilde"),
        engine=cfg.get("engine", "glm"),
        mu_family=cfg.get("mu_family", "gaussian" if link == "identity" else "binomial"),
        lambda_grid=tuple(cfg.get("lambda_grid", DEFAULT_LAMBDA_GRID)),
        variance=cfg.get("variance", "auto"),
    )
    level = float(cfg.get("level", 0.95))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = estimate_cee(panel, model, stage1)
    result = est.to_dict(level)
    result["warnings"] = [str(w.message) for w in caught]
    result["positivity_violations"] = len(pos)
    result["metadata"] = metadata("estimate", cfg)
    _write_json(out_dir / "estimate.json", result)
    table = coefficient_table(result)
    (out_dir / "estimate.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    print(f"variance: {result['variance_mode']}  n = {result['n']}  min e-hat = {result['min_e']:.4g}")
    for w in result["warnings"]:
        log.warning(w)
    return result


def _scenario(cfg: dict) -> tuple[SimScenario, tuple]:
    n = cfg.get("n", 200)
    n_values = tuple(int(x) for x in (n if isinstance(n, list) else [n]))
    fields = {k: cfg[k] for k in ("pattern_e", "pattern_mu0", "T", "p_treat", "n_reps", "seed", "link") if k in cfg}
    if "beta_true" in cfg:
        fields["beta_true"] = tuple(float(b) for b in cfg["beta_true"])
    try:
        sc = SimScenario(n=max(n_values), **fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return sc, n_values


def cmd_simulate(cfg: dict, base: Path, out_dir: Path) -> dict:
    scenario, n_values = _scenario(cfg)
    impls = tuple(cfg.get("implementations", IMPLEMENTATIONS))
    parallelism = int(cfg.get("parallelism", os.cpu_count() or 1))
    res = run_study(scenario, impls, n_values, parallelism=parallelism, engine=cfg.get("engine", "gam"),
                    level=float(cfg.get("level", 0.95)))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(res.metrics, out_dir / "metrics.csv")
    write_plot_csv(res.metrics, out_dir / "plot.csv")
    failures = [{"implementation": r.implementation, "n": r.n, "rep": r.rep, "error": r.error}
                for r in res.reps if r.error]
    meta = metadata("simulate", cfg, seed=scenario.seed)
    meta["flagged_cells"] = [list(c) for c in res.flagged]
    meta["failures"] = failures
    _write_json(out_dir / "metadata.json", meta)
    print(metrics_table(res.metrics))
    if res.flagged:
        log.warning("failure rate above 5%% in %s", res.flagged)
    return meta


def metrics_table(metrics) -> str:
    rows = [[m.implementation, m.n, m.coefficient, _num(m.bias, 4), _num(m.mse, 4), _num(m.coverage, 3),
             _num(m.mean_se, 4), _num(m.mc_sd, 4), m.n_failed] for m in metrics]
    return align(["impl", "n", "coefficient", "bias", "mse", "coverage", "mean_se", "mc_sd", "failed"], rows)


def _report_rows(paths):
    est_rows, sim_rows = [], []
    for p in paths:
        if p.suffix == ".json":
            try:
                d = json.loads(p.read_text(encoding="utf-8"))
                for j, name in enumerate(d["feature_names"]):
                    est_rows.append({
                        "source": p.stem if p.stem != "estimate" else p.parent.name, "coefficient": name,
                        "estimate": d["beta"][j], "ci_low": d["ci_low"][j], "ci_high": d["ci_high"][j],
                    })
            except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                raise DataError(f"malformed estimate file {p}: {exc}") from None
        elif p.suffix == ".csv":
            try:
                sim_rows.extend(read_metrics_csv(p))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"malformed metrics file {p}: {exc}") from None
        else:
            raise ConfigError(f"report inputs must be .json estimates or .csv metrics, got {p}")
    for r in est_rows:
        r["significant"] = excludes_zero(r["ci_low"], r["ci_high"])
        r["cell"] = format_effect(r["estimate"], r["ci_low"], r["ci_high"])
    return est_rows, sim_rows


def cmd_report(cfg: dict, base: Path, out_dir: Path) -> str:
    inputs = [_resolve(base, p) for p in cfg.get("inputs", [])]
    for p in inputs:
        if not p.exists():
            raise ConfigError(f"report input not found: {p}")
    fmt = cfg.get("format", "text")
    if fmt not in ("text", "csv", "json"):
        raise ConfigError(f"format must be text, csv or json, got {fmt!r}")
    if not inputs:
        log.warning("report: no inputs given; rendering an empty table")
    est_rows, sim_rows = _report_rows(inputs)
    if fmt == "json":
        out = json.dumps({"estimates": est_rows, "metrics": [m.__dict__ for m in sim_rows]}, indent=2)
    elif fmt == "csv":
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "coefficient", "estimate", "ci_low", "ci_high", "significant"])
        for r in est_rows:
            w.writerow([r["source"], r["coefficient"], repr(r["estimate"]), repr(r["ci_low"]), repr(r["ci_high"]),
                        int(r["significant"])])
        if sim_rows:
            w.writerow([])
            w.writerow(["implementation", "n", "coefficient", "bias", "mse", "coverage", "mean_se", "mc_sd",
                        "n_failed"])
            for m in sim_rows:
                w.writerow([m.implementation, m.n, m.coefficient, repr(m.bias), repr(m.mse), repr(m.coverage),
                            repr(m.mean_se), repr(m.mc_sd), m.n_failed])
        out = buf.getvalue().rstrip("\n")
    else:
        parts = [align(["source", "coefficient", "estimate (95% CI)"],
                       [[r["source"], r["coefficient"], r["cell"]] for r in est_rows])]
        if sim_rows:
            parts.append(metrics_table(sim_rows))
        parts.append("* confidence interval excludes zero")
        out = "\n\n".join(parts)
    print(out)
    if "out_dir" in cfg:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"report.{'txt' if fmt == 'text' else fmt}").write_text(out + "\n", encoding="utf-8")
    return out


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drcee", description="Doubly robust causal excursion effects with missing "
                                                           "outcomes in micro-randomized trials.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate a causal excursion effect from a CSV panel")
    e.add_argument("--config", help="TOML file with an [estimate] block")
    e.add_argument("--data")
    e.add_argument("--f-spec", dest="f_spec")
    e.add_argument("--link", choices=("identity", "log"))
    e.add_argument("--engine", choices=("glm", "gam"))
    e.add_argument("--variance", choices=("auto", "parametric", "nonparametric"))
    e.add_argument("--level", type=float)
    e.add_argument("--out-dir", dest="out_dir")

    s = sub.add_parser("simulate", help="run the Monte Carlo study")
    s.add_argument("--config", help="TOML file with a [simulate] block")
    s.add_argument("--n", type=int, nargs="+")
    s.add_argument("--n-reps", dest="n_reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--parallelism", type=int)
    s.add_argument("--implementations", nargs="+", choices=IMPLEMENTATIONS)
    s.add_argument("--link", choices=("identity", "log"))
    s.add_argument("--engine", choices=("glm", "gam"))
    s.add_argument("--out-dir", dest="out_dir")

    r = sub.add_parser("report", help="render estimate JSON and metrics CSV files as tables")
    r.add_argument("inputs", nargs="*")
    r.add_argument("--config", help="TOML file with a [report] block")
    r.add_argument("--format", choices=("text", "csv", "json"))
    r.add_argument("--out-dir", dest="out_dir")
    return ap


_SKIP = {"command", "config", "verbose", "inputs"}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    out_dir = Path(args.out_dir) if getattr(args, "out_dir", None) else Path.cwd()
    try:
        cfg, base = load_config(args.config, args.command)
        for k, v in vars(args).items():
            if k not in _SKIP and v is not None:
                cfg[k] = v
        if args.command == "report" and args.inputs:
            cfg["inputs"] = [str(Path(p).resolve()) for p in args.inputs]
        if args.out_dir is None and "out_dir" in cfg:
            out_dir = _resolve(base, cfg["out_dir"])
        if args.command == "simulate" and "n" in cfg and isinstance(cfg["n"], list) and len(cfg["n"]) == 1:
            cfg["n"] = cfg["n"][0]
        handler = {"estimate": cmd_estimate, "simulate": cmd_simulate, "report": cmd_report}[args.command]
        handler(cfg, base, out_dir)
    except CeeError as exc:
        return _fail(exc, exc.to_dict(), exc.exit_code, out_dir)
    except (OSError, ValueError) as exc:
        # anything the library did not classify: treat as a data problem
        code = DataError.exit_code if isinstance(exc, ValueError) else ConfigError.exit_code
        info = {"kind": "data" if code == 3 else "config", "type": type(exc).__name__, "message": str(exc)}
        return _fail(exc, info, code, out_dir)
    except ArithmeticError as exc:
        return _fail(exc, {"kind": "numerical", "type": type(exc).__name__, "message": str(exc)}, 4, out_dir)
    return 0


def _fail(exc, info, code, out_dir: Path) -> int:
    info = dict(info, exit_code=code)
    try:
        _write_json(out_dir / "error.json", info)
    except OSError:
        _write_json(Path.cwd() / "error.json", info)
    print(f"error ({info['kind']}): {info['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
