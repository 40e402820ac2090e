"""Experiment configuration, task orchestration, CSV output and the ``dg-select`` CLI.

Configuration files are INI documents (``configparser`` grammar)::

    [run]
    task = c_sweep            ; c_sweep | select_compare | mlp_checkpoint_study | bound_report
    seed = 0                  ; root seed, every other seed is derived from it
    output_dir = out
    threads = 1

    [synth]                   ; exactly one of [synth], [csv], [rotated_mnist]
    n_domains = 4
    m_per_domain = 500
    d = 20
    shift_scale = 3.0

    [grid]
    log2 = -10..10

    [solver]
    loss = hinge

    [protocol]
    seeds = 5

Sections and keys are documented in the README.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .bounds import BoundInputs, excess_risk_bound, theorem1_bound, worst_case_transform
from .complexity import domain_level_rad, linear_rad_closed_form, neyshabur_complexity
from .environment import (
    DataError,
    Environment,
    SynthSpec,
    equalize_m,
    load_feature_csv,
    load_idx,
    rotated_mnist,
    sample_fresh_domains,
    synth_environment,
)
from .linear_models import SvmConfig, TrainingError, add_bias_feature, margins, ramp, train_linear, weight_norm
from .mlp_models import NumericalError, PenaltyPlugin, TrainSchedule, save_checkpoint, train_mlp
from .selection import CGrid, c_sweep, compare_criteria, summarise_comparison

TASKS = ("c_sweep", "select_compare", "mlp_checkpoint_study", "bound_report")
SOURCES = ("synth", "csv", "rotated_mnist")
OUTPUT_ENV_VAR = "DG_SELECT_OUTPUT_DIR"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def derive_seed(root: int, label: str) -> int:
    """Seed for one component, from the run's root seed and a label."""
    digest = hashlib.sha256(f"{root}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


# ---------------------------------------------------------------------------
# CSV


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def _as_dict(record) -> dict:
    if dataclasses.is_dataclass(record):
        return {f.name: getattr(record, f.name) for f in dataclasses.fields(record)}
    return dict(record)


def emit_csv(records, path, fields: Sequence[str] | None = None) -> None:
    """Header plus one row per record; reals with 17 significant digits, LF line ends."""
    rows = [_as_dict(r) for r in records]
    if fields is None:
        if not rows:
            raise ValueError("an empty record list needs explicit fields")
        fields = list(rows[0])
    fields = list(fields)
    for i, row in enumerate(rows):
        if list(row) != fields:
            raise ValueError(f"record {i} has fields {list(row)}, expected {fields}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_cell(row[f]) for f in fields])


def _parse_cell(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def load_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# configuration


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


@dataclass
class ExperimentConfig:
    task: str
    source: str
    source_options: dict
    grid: CGrid = field(default_factory=CGrid)
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    root_seed: int = 0
    output_dir: Path = Path("out")
    threads: int = 1
    solver: SvmConfig = field(default_factory=SvmConfig)
    protocol: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    echo: dict = field(default_factory=dict)
    config_path: Path | None = None

    def resolve(self, p: str) -> Path:
        p = Path(p)
        if p.is_absolute() or self.config_path is None:
            return p
        return self.config_path.parent / p


_KNOWN = {
    "run": {"task", "seed", "output_dir", "threads"},
    "synth": {"n_domains", "m_per_domain", "d", "k", "shift_scale", "label_noise", "class_sep", "noise_std", "seed"},
    "csv": {"path"},
    "rotated_mnist": {"images", "labels", "angles", "per_domain", "subsample"},
    "grid": {"log2"},
    "solver": {"loss", "tol", "max_iter"},
    "protocol": {"seeds", "train_frac", "k_folds", "refit", "equalize"},
    "mlp": {"steps", "checkpoint_every", "learning_rate", "batch_size", "hidden", "plugin", "lambda", "alpha",
            "heldout", "fresh_domains", "fresh_m", "save_checkpoints"},
    "bounds": {"delta", "kappa", "n_draws", "norm_bound"},
}


def _line_of(path: Path, section: str, key: str | None = None) -> int | None:
    current = None
    for no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return no
        elif current == section and key is not None and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key:
                return no
    return None


def _where(path: Path, section: str, key: str | None = None) -> str:
    line = _line_of(path, section, key)
    loc = f"[{section}]" + (f" {key}" if key else "")
    return f"{path}:{line}: {loc}" if line else f"{path}: {loc}"


def _get(cp, path, section, key, conv, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(path, section, key)}: invalid value {raw!r} ({exc})") from None


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with path.open(encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in cp.sections():
        if section not in _KNOWN:
            raise ConfigError(f"{_where(path, section)}: unknown section")
        for key in cp.options(section):
            if key not in _KNOWN[section]:
                raise ConfigError(f"{_where(path, section, key)}: unknown key")
    if not cp.has_option("run", "task"):
        raise ConfigError(f"{path}: [run] task is required")
    task = cp.get("run", "task").strip()
    if task not in TASKS:
        raise ConfigError(f"{_where(path, 'run', 'task')}: task must be one of {', '.join(TASKS)}")
    present = [s for s in SOURCES if cp.has_section(s)]
    if len(present) != 1:
        raise ConfigError(f"{path}: exactly one dataset section of {SOURCES} is required, found {present or 'none'}")
    source = present[0]
    root = _get(cp, path, "run", "seed", int, 0)
    out_default = os.environ.get(OUTPUT_ENV_VAR, "out")
    output_dir = Path(_get(cp, path, "run", "output_dir", str, out_default))
    if not output_dir.is_absolute():
        output_dir = path.parent / output_dir
    seeds_raw = _get(cp, path, "protocol", "seeds", str, "5")
    try:
        seeds = _seed_list(seeds_raw, root)
    except ValueError as exc:
        raise ConfigError(f"{_where(path, 'protocol', 'seeds')}: {exc}") from None
    grid = _get(cp, path, "grid", "log2", CGrid.parse, CGrid())
    loss = cp.get("solver", "loss", fallback="hinge").strip()
    if loss not in ("hinge", "logistic"):
        raise ConfigError(f"{_where(path, 'solver', 'loss')}: loss must be hinge or logistic")
    try:
        solver = SvmConfig(
            loss_kind=loss,
            tol=_get(cp, path, "solver", "tol", float, 1e-8),
            max_iter=_get(cp, path, "solver", "max_iter", int, 2000),
        )
    except ValueError as exc:
        raise ConfigError(f"{_where(path, 'solver')}: {exc}") from None
    return ExperimentConfig(
        task=task,
        source=source,
        source_options=dict(cp.items(source)),
        grid=grid,
        seeds=seeds,
        root_seed=root,
        output_dir=output_dir,
        threads=_get(cp, path, "run", "threads", int, 1),
        solver=solver,
        protocol={
            "train_frac": _get(cp, path, "protocol", "train_frac", float, 0.5),
            "k_folds": _get(cp, path, "protocol", "k_folds", int, 5),
            "refit": _get(cp, path, "protocol", "refit", _bool, True),
            "equalize": _get(cp, path, "protocol", "equalize", _bool, True),
        },
        mlp={k: cp.get("mlp", k) for k in cp.options("mlp")} if cp.has_section("mlp") else {},
        bounds={k: cp.get("bounds", k) for k in cp.options("bounds")} if cp.has_section("bounds") else {},
        echo={s: dict(cp.items(s)) for s in cp.sections()},
        config_path=path,
    )


def _seed_list(text: str, root: int) -> list[int]:
    """``"5"`` means five seeds derived from the root; ``"0,1,2"`` or ``"0..4"`` are literal."""
    text = text.strip()
    if text.isdigit():
        count = int(text)
        if count < 1:
            raise ValueError("need at least one seed")
        return [derive_seed(root, f"split/{i}") for i in range(count)]
    return _int_list(text)


def synth_spec_from(options: dict, root: int) -> SynthSpec:
    conv = {"n_domains": int, "m_per_domain": int, "d": int, "k": int, "shift_scale": float,
            "label_noise": float, "class_sep": float, "noise_std": float, "seed": int}
    vals = {}
    for key, raw in options.items():
        try:
            vals[key] = conv[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[synth] {key}: invalid value {raw!r} ({exc})") from None
    rename = {"k": "K", "shift_scale": "covariate_shift_scale"}
    kwargs = {rename.get(k, k): v for k, v in vals.items()}
    kwargs.setdefault("seed", derive_seed(root, "synth"))
    spec = SynthSpec(**kwargs)
    spec.validate()
    return spec


def build_environment(cfg: ExperimentConfig) -> Environment:
    opts = cfg.source_options
    if cfg.source == "synth":
        return synth_environment(synth_spec_from(opts, cfg.root_seed))
    if cfg.source == "csv":
        if "path" not in opts:
            raise ConfigError("[csv] path is required")
        return load_feature_csv(cfg.resolve(opts["path"]))
    for key in ("images", "labels"):
        if key not in opts:
            raise ConfigError(f"[rotated_mnist] {key} is required")
    base = load_idx(cfg.resolve(opts["images"]), cfg.resolve(opts["labels"]))
    subsample = float(opts.get("subsample", 1.0))
    if subsample < 1.0:
        keep = np.random.default_rng(derive_seed(cfg.root_seed, "mnist/subsample")).choice(
            base.m, size=max(1, int(round(subsample * base.m))), replace=False)
        base = base.take(np.sort(keep))
    angles = [float(a) for a in opts.get("angles", "0,15,30,45,60,75").split(",")]
    per_domain = int(opts["per_domain"]) if "per_domain" in opts else None
    return rotated_mnist(base, angles, per_domain, seed=derive_seed(cfg.root_seed, "mnist/partition"))


# ---------------------------------------------------------------------------
# tasks


def _prepare(cfg: ExperimentConfig, env: Environment) -> Environment:
    if cfg.protocol.get("equalize", True):
        env = equalize_m(env, derive_seed(cfg.root_seed, "equalize"))
    return env


def task_c_sweep(cfg: ExperimentConfig, env: Environment, out: Path) -> list[Path]:
    env = _prepare(cfg, env)
    curves = c_sweep(env, cfg.grid, cfg.seeds, cfg.solver, cfg.protocol["train_frac"], cfg.threads)
    emit_csv(curves.records(), out / "sweep.csv")
    runs = []
    for si, s in enumerate(curves.seeds):
        for ci, (C, lg) in enumerate(zip(curves.Cs, curves.log2_values)):
            runs.append({"seed": s, "C": C, "log2C": lg, "iid": curves.iid_runs[si, ci],
                         "dg": curves.dg_runs[si, ci], "worst": curves.worst_runs[si, ci]})
    emit_csv(runs, out / "sweep_runs.csv")
    arg = []
    per = {k: curves.per_seed_argmax_C(k) for k in ("iid", "dg", "worst")}
    for si, s in enumerate(curves.seeds):
        arg.append({"seed": s, "argmax_C_iid": per["iid"][si], "argmax_C_dg": per["dg"][si],
                    "argmax_C_worst": per["worst"][si]})
    arg.append({"seed": "mean", "argmax_C_iid": curves.argmax_C("iid"), "argmax_C_dg": curves.argmax_C("dg"),
                "argmax_C_worst": curves.argmax_C("worst")})
    emit_csv(arg, out / "sweep_argmax.csv")
    return [out / "sweep.csv", out / "sweep_runs.csv", out / "sweep_argmax.csv"]


def task_select_compare(cfg: ExperimentConfig, env: Environment, out: Path) -> list[Path]:
    env = _prepare(cfg, env)
    p = cfg.protocol
    rows = compare_criteria(env, cfg.grid, cfg.seeds, cfg.solver, p["k_folds"], p["train_frac"], p["refit"],
                            threads=cfg.threads)
    emit_csv(rows, out / "selection.csv")
    # per-target table: accuracy and selected C per criterion, averaged over seeds
    table = []
    for criterion in ("domain_wise", "instance_wise"):
        acc_row = {"criterion": criterion, "metric": "acc"}
        c_row = {"criterion": criterion, "metric": "C"}
        accs = []
        for target in env.ids:
            sel = [r for r in rows if r.criterion == criterion and r.target == target]
            a = math.fsum(r.accuracy for r in sel) / len(sel)
            accs.append(a)
            acc_row[target] = a
            c_row[target] = math.exp(math.fsum(r.ln_C for r in sel) / len(sel))
        acc_row["ave"] = math.fsum(accs) / len(accs)
        acc_row["std"] = float(np.std(accs))
        c_row["ave"] = math.exp(math.fsum(r.ln_C for r in rows if r.criterion == criterion)
                                / sum(1 for r in rows if r.criterion == criterion))
        c_row["std"] = float(np.std([r.ln_C for r in rows if r.criterion == criterion]))
        table += [acc_row, c_row]
    emit_csv(table, out / "selection_table.csv")
    summary = summarise_comparison(rows)
    emit_csv([{"criterion": k, "accuracy": v["accuracy"], "mean_ln_C": v["ln_C"]} for k, v in summary.items()],
             out / "selection_summary.csv")
    return [out / "selection.csv", out / "selection_table.csv", out / "selection_summary.csv"]


def task_mlp_checkpoint_study(cfg: ExperimentConfig, env: Environment, out: Path) -> list[Path]:
    o = cfg.mlp
    try:
        schedule_kw = dict(
            steps=int(o.get("steps", 3000)),
            checkpoint_every=int(o.get("checkpoint_every", 300)),
            learning_rate=float(o.get("learning_rate", 1e-2)),
            batch_size=int(o.get("batch_size", 64)),
            hidden=int(o.get("hidden", 256)),
        )
        kind = o.get("plugin", "erm").strip()
        plugin = PenaltyPlugin(kind, lam=float(o.get("lambda", 0.0)), alpha=float(o.get("alpha", 0.2)))
    except ValueError as exc:
        raise ConfigError(f"[mlp]: {exc}") from None
    save = _bool(o.get("save_checkpoints", "false"))
    if cfg.source == "synth":
        spec = synth_spec_from(cfg.source_options, cfg.root_seed)
        train_env = env
        heldout = sample_fresh_domains(spec, int(o.get("fresh_domains", 5)), int(o.get("fresh_m", 400)),
                                       seed=derive_seed(cfg.root_seed, "mlp/fresh"))
    else:
        target = o.get("heldout", env.ids[-1])
        if target not in env.ids:
            raise ConfigError(f"[mlp] heldout: unknown domain {target!r}")
        train_env, heldout = env.without(target), env.subset([target])
    train_env = _prepare(cfg, train_env)
    Xh, yh = heldout.pooled()
    rows, files = [], []
    for s in cfg.seeds:
        cks = train_mlp(train_env, TrainSchedule(seed=s, **schedule_kw), plugin)
        for ck in cks:
            rows.append({"seed": s, "step": ck.step, "complexity": neyshabur_complexity(ck.U, ck.U0, ck.V),
                         "train_loss": ck.train_loss, "train_accuracy": ck.train_accuracy,
                         "heldout_accuracy": ck.model.accuracy(Xh, yh)})
            if save:
                ck_dir = out / "checkpoints"
                ck_dir.mkdir(exist_ok=True)
                f = ck_dir / f"seed{s}_step{ck.step}.txt"
                save_checkpoint(ck, f)
                files.append(f)
    emit_csv(rows, out / "checkpoints.csv")
    return [out / "checkpoints.csv"] + files


def margin_factor(num_classes: int) -> float:
    """Norm inflation from one score row to the multiclass margin.

    With two classes the margin is +-(w_0 - w_1).x, a linear map of norm at
    most 2B. For more classes the multiclass margin lemma costs a factor 2K.
    """
    return 2.0 if num_classes == 2 else 2.0 * num_classes


def bound_rows(env: Environment, grid: CGrid, solver: SvmConfig, delta: float, kappa: float, n_draws: int,
               seed: int, norm_bound: float | None = None) -> list[dict]:
    """Train on all domains at each C and evaluate the average- and worst-case bounds."""
    m = min(dom.m for dom in env)
    n = env.n
    X, y = env.pooled()
    rows = []
    for C, lg in zip(grid.Cs, grid.log2_values):
        model = train_linear(X, y, solver.with_C(C), env.num_classes)
        B = norm_bound if norm_bound is not None else weight_norm(model).max_norm
        risks = [float(ramp(margins(model.scores(d.X), d.y)).mean()) for d in env]
        emp = math.fsum(risks) / n
        if B > 0:
            Bm = margin_factor(env.num_classes) * B
            rad_mn = linear_rad_closed_form(add_bias_feature(X), Bm)
            rad_n = domain_level_rad(env, Bm, n_draws, seed).mean
        else:
            rad_mn = rad_n = 0.0
        avg = theorem1_bound(BoundInputs(emp, rad_mn, rad_n, m, n, delta))
        rows.append({
            "C": C, "log2C": lg, "norm_bound": B, "empirical_risk": emp, "rad_mn": rad_mn, "rad_n": rad_n,
            "contraction_factor": 1.0, "average_case": avg.value,
            "excess_risk": excess_risk_bound(rad_mn, rad_n, m, n, delta).value,
            "worst_case": worst_case_transform(avg.value, kappa, delta).value,
            "confidence_average": avg.confidence, "confidence_worst": 1.0 - (2 * delta + kappa),
            "vacuous": avg.vacuous,
        })
    return rows


def task_bound_report(cfg: ExperimentConfig, env: Environment, out: Path) -> list[Path]:
    env = equalize_m(env, derive_seed(cfg.root_seed, "equalize"))
    b = cfg.bounds
    try:
        delta = float(b.get("delta", 0.025))
        kappa = float(b.get("kappa", 0.1))
        n_draws = int(b.get("n_draws", 1000))
        nb = float(b["norm_bound"]) if "norm_bound" in b else None
    except ValueError as exc:
        raise ConfigError(f"[bounds]: {exc}") from None
    rows = bound_rows(env, cfg.grid, cfg.solver, delta, kappa, n_draws, derive_seed(cfg.root_seed, "bounds/rad"), nb)
    emit_csv(rows, out / "bounds.csv")
    return [out / "bounds.csv"]


TASK_FUNCS = {
    "c_sweep": task_c_sweep,
    "select_compare": task_select_compare,
    "mlp_checkpoint_study": task_mlp_checkpoint_study,
    "bound_report": task_bound_report,
}


@dataclass
class RunManifest:
    config: dict
    files: list[dict]
    wall_clock_seconds: float
    version: str = __version__

    def digests(self) -> dict[str, str]:
        return {f["name"]: f["sha256"] for f in self.files}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def execute(cfg: ExperimentConfig) -> RunManifest:
    start = time.perf_counter()
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    env = build_environment(cfg)
    try:
        written = TASK_FUNCS[cfg.task](cfg, env, out)
    except DataError as exc:
        raise DataError(f"task {cfg.task}: {exc}") from exc
    except ArithmeticError as exc:
        raise NumericalError(f"task {cfg.task}: {exc}") from exc
    files = [{"name": str(p.relative_to(out)), "sha256": file_digest(p), "bytes": p.stat().st_size} for p in written]
    manifest = RunManifest(
        config={"task": cfg.task, "sections": cfg.echo, "seeds": cfg.seeds, "threads": cfg.threads},
        files=files,
        wall_clock_seconds=time.perf_counter() - start,
    )
    (out / "manifest.json").write_text(json.dumps(dataclasses.asdict(manifest), indent=2) + "\n")
    return manifest


def run_experiment(config_path, threads: int | None = None, seed: int | None = None) -> RunManifest:
    cfg = load_config(config_path)
    if threads is not None:
        cfg.threads = threads
    if seed is not None:
        cfg = _reseed(cfg, config_path, seed)
    return execute(cfg)


def _reseed(cfg: ExperimentConfig, config_path, seed: int) -> ExperimentConfig:
    cfg.root_seed = seed
    seeds_raw = cfg.echo.get("protocol", {}).get("seeds", "5")
    cfg.seeds = _seed_list(seeds_raw, seed)
    return cfg


# ---------------------------------------------------------------------------
# CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _synth_arg(text: str) -> dict:
    opts = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise argparse.ArgumentTypeError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        opts[k.strip().lower()] = v.strip()
    unknown = set(opts) - _KNOWN["synth"]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown synth keys {sorted(unknown)}")
    return opts


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dg-select", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the task described by a config file")
    run.add_argument("config")
    run.add_argument("--threads", type=int)
    run.add_argument("--seed", type=int)

    sw = sub.add_parser("sweep", help="accuracy-vs-C sweep (i.i.d., held-out domain, worst held-out domain)")
    src = sw.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth", type=_synth_arg, metavar="K=V,...")
    src.add_argument("--csv", metavar="PATH")
    sw.add_argument("--grid", default="-10..10", type=CGrid.parse)
    sw.add_argument("--seeds", default="5")
    sw.add_argument("--out")
    sw.add_argument("--loss", choices=("hinge", "logistic"), default="hinge")
    sw.add_argument("--threads", type=int, default=1)
    sw.add_argument("--seed", type=int, default=0)

    bd = sub.add_parser("bounds", help="evaluate the bounds for rows of a CSV of inputs")
    bd.add_argument("--inputs", required=True,
                    help="CSV with empirical_risk,rad_mn,rad_n,m,n,delta and optional kappa")
    bd.add_argument("--out", help="output CSV (default stdout)")
    return parser


def bounds_from_rows(rows: list[dict]) -> list[dict]:
    out = []
    for i, row in enumerate(rows, 2):
        try:
            inp = BoundInputs(float(row["empirical_risk"]), float(row["rad_mn"]), float(row["rad_n"]),
                              int(row["m"]), int(row["n"]), float(row["delta"]))
        except KeyError as exc:
            raise DataError(f"line {i}: missing column {exc}") from None
        except (TypeError, ValueError) as exc:
            raise DataError(f"line {i}: {exc}") from None
        avg = theorem1_bound(inp)
        rec = {**dataclasses.asdict(inp), "average_case": avg.value,
               "excess_risk": excess_risk_bound(inp.rad_mn, inp.rad_n, inp.m, inp.n, inp.delta).value,
               "confidence": avg.confidence}
        if row.get("kappa") not in (None, ""):
            try:
                wc = worst_case_transform(avg.value, float(row["kappa"]), inp.delta)
            except ValueError as exc:
                raise DataError(f"line {i}: {exc}") from None
            rec.update(kappa=float(row["kappa"]), worst_case=wc.value, worst_confidence=wc.confidence)
        out.append(rec)
    return out


def _cmd_sweep(args) -> None:
    root = args.seed
    source = "synth" if args.synth is not None else "csv"
    out = Path(args.out or os.environ.get(OUTPUT_ENV_VAR, "out"))
    try:
        seeds = _seed_list(args.seeds, root)
    except ValueError as exc:
        raise ConfigError(f"--seeds: {exc}") from None
    cfg = ExperimentConfig(
        task="c_sweep", source=source,
        source_options=args.synth if source == "synth" else {"path": args.csv},
        grid=args.grid, seeds=seeds, root_seed=root, output_dir=out, threads=args.threads,
        solver=SvmConfig(loss_kind=args.loss),
        protocol={"train_frac": 0.5, "k_folds": 5, "refit": True, "equalize": True},
        echo={"cli": {"command": "sweep", "source": source, "options": args.synth or args.csv,
                      "grid": list(args.grid.log2_values), "seeds": args.seeds, "seed": root, "loss": args.loss}},
    )
    manifest = execute(cfg)
    for f in manifest.files:
        print(f"{out / f['name']}  {f['sha256']}")


def _cmd_bounds(args) -> None:
    try:
        with open(args.inputs, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(str(exc)) from None
    records = bounds_from_rows(rows)
    if not records:
        raise DataError(f"{args.inputs}: no input rows")
    if args.out:
        emit_csv(records, args.out)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        fields = list(records[0])
        writer.writerow(fields)
        for r in records:
            writer.writerow([_cell(r.get(f)) for f in fields])


def _join_grid(argv: list[str]) -> list[str]:
    # "--grid -10..10" would otherwise read the range as an option flag
    out = []
    for arg in argv:
        if out and out[-1] == "--grid" and arg.startswith("-"):
            out[-1] = f"--grid={arg}"
        else:
            out.append(arg)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_grid(list(sys.argv[1:] if argv is None else argv)))
    try:
        if args.command == "run":
            manifest = run_experiment(args.config, args.threads, args.seed)
            for f in manifest.files:
                print(f"{f['name']}  {f['sha256']}")
        elif args.command == "sweep":
            _cmd_sweep(args)
        else:
            _cmd_bounds(args)
    except ConfigError as exc:
        print(f"dg-select: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, NumericalError) as exc:
        print(f"dg-select: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, TrainingError, OSError, ValueError) as exc:
        print(f"dg-select: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
