"""Command-line entry point.

Three modes share one configuration format (a flat YAML mapping whose keys
match the long flag names; flags given on the command line win)::

    calfusion simulate --n 2000 --reps 1000 --estimators MR-1010 MR-1111 --out sim/
    calfusion estimate --config bank.yaml --data survey.csv --out fit/
    calfusion combine  --reports fit1/report.json fit2/report.json --out pooled/

Every run writes a ``log.json`` holding the resolved configuration, the base
seed and whatever diagnostics the estimators produced.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .data import read_fused_csv
from .errors import (
    CalfusionError,
    CalibrationError,
    ConfigError,
    DataError,
    EstimationError,
    InferenceError,
    ModelError,
)
from .estimators import LINKS, EstimateReport, _jsonable, default_t, get_link
from .inference import rubin_combine
from .models import ModelSpec
from .pipeline import ModelBank, run_estimator
from .simulation import SimConfig, run_monte_carlo

MODES = ("simulate", "estimate", "combine")
ROLES = ("source", "outcome", "common", "auxiliary")

EXIT_CODES = {
    ConfigError: 2,
    DataError: 3,
    ModelError: 4,
    CalibrationError: 5,
    EstimationError: 6,
    InferenceError: 7,
}


@dataclass(frozen=True)
class VarianceMethod:
    kind: str  # "plugin", "bootstrap" or "none"
    arg: int = 1  # 1-based reference propensity model, or bootstrap B

    @classmethod
    def parse(cls, text) -> "VarianceMethod":
        m = re.fullmatch(r"\s*(plugin|bootstrap|none)\s*(?:\(\s*(\d+)\s*\))?\s*", str(text))
        if not m:
            raise ConfigError(f"variance: expected plugin(k), bootstrap(B) or none, got {text!r}")
        kind, arg = m.group(1), m.group(2)
        if kind == "none":
            return cls("none", 0)
        default = 1 if kind == "plugin" else 500
        value = default if arg is None else int(arg)
        if value < 1:
            raise ConfigError(f"variance: argument of {kind} must be >= 1")
        return cls(kind, value)

    def __str__(self):
        return "none" if self.kind == "none" else f"{self.kind}({self.arg})"


@dataclass(frozen=True)
class RunConfig:
    mode: str
    seed: int = 20240501
    D: int = 100
    level: float = 0.95
    out: Optional[str] = None
    variance: VarianceMethod = VarianceMethod("plugin", 1)
    # simulate
    n: Optional[int] = None
    reps: Optional[int] = None
    estimators: tuple[str, ...] = ("MR-1111",)
    y_noise: str = "variance"
    workers: int = 1
    # estimate
    data: tuple[str, ...] = ()
    schema: dict = field(default_factory=dict)
    propensity: tuple[str, ...] = ()
    imputation: tuple[str, ...] = ()
    link: str = "identity"
    t: Optional[str] = None
    method: str = "MR"
    # combine
    reports: tuple[str, ...] = ()

    @property
    def M(self) -> int:
        """Number of replicate analyses that will be pooled."""
        return len(self.data) if self.mode == "estimate" else len(self.reports)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variance"] = str(self.variance)
        return d


_KEYS = {f for f in RunConfig.__dataclass_fields__}


def _as_tuple(key, value):
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    raise ConfigError(f"{key}: expected a string or a list, got {type(value).__name__}")


def _as_int(key, value, low=None):
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if out != value and not isinstance(value, str):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if low is not None and out < low:
        raise ConfigError(f"{key}: must be >= {low}, got {out}")
    return out


def _load_schema(value, base: Path) -> dict:
    if isinstance(value, dict):
        schema = {str(k): str(v) for k, v in value.items()}
    elif isinstance(value, str) and "=" in value:
        schema = {}
        for part in value.split(","):
            col, _, role = part.partition("=")
            schema[col.strip()] = role.strip()
    elif isinstance(value, str):
        path = Path(value)
        if not path.is_absolute():
            path = base / path
        try:
            schema = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"schema: cannot read {value}: {exc}") from None
        if not isinstance(schema, dict):
            raise ConfigError("schema: file must hold a column -> role mapping")
        schema = {str(k): str(v) for k, v in schema.items()}
    else:
        raise ConfigError("schema: expected a mapping, a file path or 'col=role,...'")
    bad = {c: r for c, r in schema.items() if r not in ROLES}
    if bad:
        raise ConfigError(f"schema: unknown roles {bad}; roles are {list(ROLES)}")
    return schema


def parse_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a YAML config and apply ``overrides``; fill defaults and validate.

    Raises :class:`ConfigError` naming the offending key.
    """
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: {path} is not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be a mapping")
        raw.update(loaded)
        base = path.parent
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    unknown = sorted(set(raw) - _KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    mode = raw.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode: expected one of {list(MODES)}, got {mode!r}")

    kw: dict = {"mode": mode}
    if "seed" in raw:
        kw["seed"] = _as_int("seed", raw["seed"], 0)
    if "D" in raw:
        kw["D"] = _as_int("D", raw["D"], 1)
    if "level" in raw:
        try:
            level = float(raw["level"])
        except (TypeError, ValueError):
            raise ConfigError(f"level: expected a number, got {raw['level']!r}") from None
        if not 0 < level < 1:
            raise ConfigError(f"level: must lie in (0, 1), got {level}")
        kw["level"] = level
    if "out" in raw:
        kw["out"] = str(raw["out"])
    if "variance" in raw:
        kw["variance"] = VarianceMethod.parse(raw["variance"])

    if mode == "simulate":
        for key in ("n", "reps"):
            if key not in raw:
                raise ConfigError(f"{key}: required for simulate")
        kw["n"] = _as_int("n", raw["n"], 10)
        kw["reps"] = _as_int("reps", raw["reps"], 1)
        if "estimators" in raw:
            kw["estimators"] = _as_tuple("estimators", raw["estimators"])
        if "y_noise" in raw:
            kw["y_noise"] = str(raw["y_noise"])
        if "workers" in raw:
            kw["workers"] = _as_int("workers", raw["workers"], 1)
        cfg = RunConfig(**kw)
        try:
            _sim_config(cfg)
        except ConfigError as exc:
            raise ConfigError(f"estimators: {exc}") from None
        return cfg

    if mode == "combine":
        kw["reports"] = _as_tuple("reports", raw.get("reports"))
        return RunConfig(**kw)

    kw["data"] = _as_tuple("data", raw.get("data"))
    if not kw["data"]:
        raise ConfigError("data: at least one CSV path is required for estimate")
    kw["data"] = tuple(str(p if Path(p).is_absolute() else base / p) for p in kw["data"])
    if "schema" not in raw:
        raise ConfigError("schema: required for estimate")
    kw["schema"] = _load_schema(raw["schema"], base)
    kw["propensity"] = _as_tuple("propensity", raw.get("propensity"))
    kw["imputation"] = _as_tuple("imputation", raw.get("imputation"))
    link = str(raw.get("link", "identity"))
    if link not in LINKS:
        raise ConfigError(f"link: unsupported link {link!r}; supported links: {sorted(LINKS)}")
    kw["link"] = link
    method = str(raw.get("method", "MR")).upper()
    if method not in ("MR", "DR"):
        raise ConfigError(f"method: expected MR or DR, got {method!r}")
    kw["method"] = method
    if "t" not in raw:
        raise ConfigError("t: a t-function spec such as '1 + V1 + V2 + V1:V2' is required")
    kw["t"] = str(raw["t"])
    cfg = RunConfig(**kw)
    _validate_estimate(cfg)
    return cfg


def _validate_estimate(cfg: RunConfig):
    common = [c for c, r in cfg.schema.items() if r == "common"]
    n_aux = sum(1 for r in cfg.schema.values() if r == "auxiliary")
    for key in ("propensity", "imputation"):
        for text in getattr(cfg, key):
            try:
                ModelSpec.parse(text, common)
            except ModelError as exc:
                raise ConfigError(f"{key}: {exc}") from None
    try:
        t_spec = ModelSpec.parse(cfg.t, common)
    except ModelError as exc:
        raise ConfigError(f"t: {exc}") from None
    p = 1 + n_aux + len(common)
    if len(t_spec) != p:
        raise ConfigError(f"t: has {len(t_spec)} terms but the regression has {p} coefficients")
    if cfg.method == "DR" and (len(cfg.propensity) != 1 or len(cfg.imputation) != 1):
        raise ConfigError("method: DR takes exactly one propensity and one imputation model")
    if cfg.method == "MR" and not (cfg.propensity or cfg.imputation):
        raise ConfigError("propensity: the model bank is empty")
    if not cfg.imputation:
        raise ConfigError("imputation: at least one imputation model is required")
    if cfg.variance.kind == "plugin" and cfg.method == "MR":
        if not cfg.propensity:
            raise ConfigError("variance: plugin needs a propensity model; use bootstrap(B)")
        if cfg.variance.arg > len(cfg.propensity):
            raise ConfigError(
                f"variance: reference model {cfg.variance.arg} but only {len(cfg.propensity)} propensity models"
            )


def _sim_config(cfg: RunConfig) -> SimConfig:
    return SimConfig(
        n=cfg.n, reps=cfg.reps, seed=cfg.seed, estimators=cfg.estimators, D=cfg.D, ci_level=cfg.level,
        y_noise=cfg.y_noise, workers=cfg.workers,
    )


def replicate_seed(seed: int, index: int, total: int):
    """Seed for replicate ``index`` of ``total``; a single file uses ``seed`` itself."""
    return seed if total == 1 else np.random.SeedSequence(seed, spawn_key=(index,))


def estimate_one(cfg: RunConfig, path, seed) -> tuple[EstimateReport, list[str]]:
    """Fit the configured bank on one CSV, exactly as a library call would."""
    data = read_fused_csv(path, cfg.schema)
    bank = ModelBank.parse(cfg.propensity, cfg.imputation, data.v_names)
    t_fn = default_t(data, ModelSpec.parse(cfg.t, data.v_names))
    link = get_link(cfg.link)
    variance = None if cfg.variance.kind == "none" else cfg.variance.kind
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_estimator(
            data, bank, t_fn, link, method=cfg.method, D=cfg.D, seed=seed, variance=variance,
            reference=cfg.variance.arg - 1, B=cfg.variance.arg,
        )
    messages = [f"{w.category.__name__}: {w.message}" for w in caught]
    extra = tuple(m for m in messages if m not in report.warnings)
    report = replace(report, level=cfg.level, warnings=tuple(report.warnings) + extra)
    return report, messages


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out if cfg.out else f"calfusion-{cfg.mode}")


def run(cfg: RunConfig, *, stream=None) -> int:
    """Execute ``cfg``, write its artifacts and return the exit status."""
    stream = sys.stdout if stream is None else stream
    out = _out_dir(cfg)
    log = {"config": cfg.to_dict(), "seed": cfg.seed, "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    try:
        if cfg.mode == "simulate":
            summary = run_monte_carlo(_sim_config(cfg))
            _write(out / "summary.csv", summary.summary_csv())
            _write(out / "summary.txt", summary.table() + "\n")
            _write(out / "raw.csv", summary.raw_csv())
            _write(out / "failures.csv", summary.failures_csv())
            log["failures"] = len(summary.failures)
            print(summary.table(), file=stream)
        elif cfg.mode == "estimate":
            reports, entries = [], []
            for i, path in enumerate(cfg.data):
                report, messages = estimate_one(cfg, path, replicate_seed(cfg.seed, i, len(cfg.data)))
                reports.append(report)
                entries.append({
                    "data": str(path), "solver": report.solver, "diagnostics": report.diagnostics,
                    "warnings": messages,
                })
            log["replicates"] = entries
            if len(reports) == 1:
                final = reports[0]
            else:
                for i, rep in enumerate(reports, start=1):
                    _write(out / f"report_{i}.json", json.dumps(rep.to_dict(), indent=2))
                final = rubin_combine(reports)
            _write(out / "report.json", json.dumps(final.to_dict(), indent=2))
            _write(out / "report.txt", final.table() + "\n")
            print(final.table(), file=stream)
        else:
            reports = []
            for p in cfg.reports:
                try:
                    reports.append(EstimateReport.from_dict(json.loads(Path(p).read_text())))
                except (OSError, ValueError, KeyError) as exc:
                    raise ConfigError(f"reports: cannot read {p}: {exc}") from None
            final = rubin_combine(reports)
            _write(out / "report.json", json.dumps(final.to_dict(), indent=2))
            _write(out / "report.txt", final.table() + "\n")
            print(final.table(), file=stream)
        status = 0
    except CalfusionError as exc:
        status = exit_code(exc)
        log["error"] = {"type": type(exc).__name__, "module": exc.module, "message": str(exc)}
        print(f"error [{exc.module}] {type(exc).__name__}: {exc}", file=sys.stderr)
    log["status"] = status
    _write(out / "log.json", json.dumps(_jsonable(log), indent=2, default=str))
    return status


def exit_code(exc: BaseException) -> int:
    for cls in type(exc).__mro__:
        if cls in EXIT_CODES:
            return EXIT_CODES[cls]
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calfusion", description="Calibrated multiply robust estimation for fused data.")
    p.add_argument("mode_arg", nargs="?", choices=MODES, metavar="mode", help="simulate, estimate or combine")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--config", help="YAML file with any of the keys below")
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data", nargs="+", help="one CSV, or several replicate CSVs to pool")
    p.add_argument("--schema", help="YAML file or 'col=role,...' (roles: source outcome common auxiliary)")
    p.add_argument("--D", type=int, help="imputation draws per row")
    p.add_argument("--variance", help="plugin(k), bootstrap(B) or none")
    p.add_argument("--level", type=float)
    p.add_argument("--estimators", nargs="+", help="e.g. MR-1010 DR-0101")
    p.add_argument("--y-noise", dest="y_noise", choices=("variance", "sd"))
    p.add_argument("--workers", type=int)
    p.add_argument("--propensity", nargs="+")
    p.add_argument("--imputation", nargs="+")
    p.add_argument("--link", help=f"one of {sorted(LINKS)}")
    p.add_argument("--t", help="t-function spec, e.g. '1 + V1 + V2 + V1:V2'")
    p.add_argument("--method", choices=("MR", "DR", "mr", "dr"))
    p.add_argument("--reports", nargs="+", help="report.json files to pool (combine)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.mode_arg and args.mode and args.mode_arg != args.mode:
        print(f"error: mode given twice ({args.mode_arg} vs {args.mode})", file=sys.stderr)
        return 2
    overrides = {k: v for k, v in vars(args).items() if k not in ("mode_arg", "config")}
    overrides["mode"] = args.mode or args.mode_arg
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error [{exc.module}] ConfigError: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
