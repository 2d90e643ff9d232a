"""Experiment configs, multi-seed sweeps, record/summary files and strategy comparison."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from fedpals.distshift import (
    GaussianTaskSpec,
    Dataset,
    PartitionSpec,
    make_target_delta,
    perturb_target,
    sample_gaussian_dataset,
    sparsity_sizes,
    stream,
)
from fedpals.federation import ClientState, FederationConfig, RoundRecord, Strategy, train
from fedpals.labelspace import ClientMarginalSet, LabelMarginal, projection_distance
from fedpals.learners import LocalUpdateConfig, ModelArch

RECORD_HEADER = ["round", "strategy", "lambda", "ess", "residual", "target_acc", "target_loss", "macro_f1", "seed", "setting"]
SUMMARY_HEADER = ["strategy", "setting", "metric", "mean", "std", "seeds", "proj_dist"]
SWEEP_PARAMS = ("delta", "C", "beta", "perturb")
WORKERS_ENV = "FEDPALS_WORKERS"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


def _fmt(x: float | int) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    task: GaussianTaskSpec
    partition: PartitionSpec
    target: dict
    arch: ModelArch
    local: LocalUpdateConfig
    rounds: int
    strategies: tuple[Strategy, ...]
    seeds: tuple[int, ...]
    sweep_param: str | None = None
    sweep_values: tuple[float, ...] = ()
    n_test: int = 2000
    samples_per_label: int = 0
    sampling: str = "stratified"
    client_fraction: float = 1.0
    output: str = "runs"
    raw: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.strategies:
            raise ConfigError("strategies: at least one strategy is required")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        names = [s.name for s in self.strategies]
        if len(set(names)) != len(names):
            raise ConfigError(f"strategies: duplicate strategy names {names}")

    @property
    def settings(self) -> tuple[float, ...]:
        return self.sweep_values if self.sweep_param else (math.nan,)


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}.{key}: missing")
    return d[key]


def _strategy(d: Any, i: int) -> Strategy:
    where = f"strategies[{i}]"
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: must be a mapping")
    try:
        return Strategy(
            kind=_need(d, "kind", where),
            lam=None if d.get("lam") is None else float(d["lam"]),
            ess_target=None if d.get("ess_target") is None else float(d["ess_target"]),
            prox_mu=float(d.get("prox_mu", 0.0)),
            name=str(d.get("name", "")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(doc: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        task_d = _need(doc, "task", "config")
        if "means" in task_d:
            task = GaussianTaskSpec(np.array(task_d["means"], dtype=float))
        else:
            r = _need(task_d, "random_means", "task")
            task = GaussianTaskSpec.random(int(r["K"]), int(r["d"]), float(r["scale"]), int(r.get("seed", 0)))

        sweep = doc.get("sweep")
        sweep_param, sweep_values = None, ()
        if sweep:
            sweep_param = _need(sweep, "param", "sweep")
            if sweep_param not in SWEEP_PARAMS:
                raise ConfigError(f"sweep.param: must be one of {SWEEP_PARAMS}, got {sweep_param!r}")
            sweep_values = tuple(float(v) for v in _need(sweep, "values", "sweep"))
            if not sweep_values:
                raise ConfigError("sweep.values: must be non-empty")

        part_d = dict(_need(doc, "partition", "config"))
        if sweep_param in ("C", "beta") and part_d.get(sweep_param) is None:
            part_d[sweep_param] = sweep_values[0]
        scheme = _need(part_d, "scheme", "partition")
        partition = PartitionSpec(
            scheme=scheme,
            M=int(_need(part_d, "M", "partition")),
            sizes=tuple(int(s) for s in part_d.get("sizes", ())),
            C=None if part_d.get("C") is None else int(part_d["C"]),
            beta=None if part_d.get("beta") is None else float(part_d["beta"]),
            marginals=tuple(tuple(float(v) for v in m) for m in part_d.get("marginals", ())),
        )
        target = dict(_need(doc, "target", "config"))
        if target.get("kind") not in ("delta", "client", "explicit"):
            raise ConfigError("target.kind: must be one of delta, client, explicit")

        model_d = doc.get("model", {"kind": "logistic"})
        arch = ModelArch(model_d.get("kind", "logistic"), task.d, task.K, int(model_d.get("hidden", 0)))
        loc = doc.get("local", {})
        batch = loc.get("batch_size", "full")
        local = LocalUpdateConfig(
            epochs=int(loc.get("epochs", 1)),
            batch_size=(1 << 30) if batch == "full" else int(batch),
            learning_rate=float(loc.get("learning_rate", 0.1)),
            prox_mu=float(loc.get("prox_mu", 0.0)),
        )
        strategies = tuple(_strategy(s, i) for i, s in enumerate(doc.get("strategies") or ()))
        cfg = ExperimentConfig(
            name=str(doc.get("name", "experiment")),
            task=task,
            partition=partition,
            target=target,
            arch=arch,
            local=local,
            rounds=int(doc.get("rounds", 150)),
            strategies=strategies,
            seeds=tuple(int(s) for s in doc.get("seeds") or ()),
            sweep_param=sweep_param,
            sweep_values=sweep_values,
            n_test=int(doc.get("n_test", 2000)),
            samples_per_label=int(part_d.get("samples_per_label", 0)),
            sampling=str(doc.get("sampling", "stratified")),
            client_fraction=float(doc.get("client_fraction", 1.0)),
            output=str(doc.get("output", f"runs/{doc.get('name', 'experiment')}")),
            raw=doc,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if cfg.rounds < 1:
        raise ConfigError("rounds: must be >= 1")
    if cfg.sampling not in ("stratified", "iid"):
        raise ConfigError("sampling: must be 'stratified' or 'iid'")
    return cfg


def preset_names() -> list[str]:
    return sorted(p.name[: -len(".yaml")] for p in resources.files("fedpals.presets").iterdir() if p.name.endswith(".yaml"))


def load_config(path_or_preset: str | Path) -> ExperimentConfig:
    """Load a YAML config file, or a shipped preset by name."""
    p = Path(path_or_preset)
    if p.exists():
        text, source = p.read_text(), str(p)
    elif str(path_or_preset) in preset_names():
        res = resources.files("fedpals.presets") / f"{path_or_preset}.yaml"
        text, source = res.read_text(), f"preset:{path_or_preset}"
    else:
        raise ConfigError(f"config {path_or_preset!r}: no such file or preset (presets: {', '.join(preset_names())})")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return parse_config(doc, source)


# -- building one setting ------------------------------------------------------------


@dataclass
class SettingData:
    clients: list[ClientState]
    oracle_clients: list[ClientState]
    true_target: LabelMarginal
    server_target: LabelMarginal
    test: Dataset


def build_setting(cfg: ExperimentConfig, setting: float, seed: int) -> SettingData:
    """Client datasets, target marginal and target test set for one (setting, seed)."""
    part = cfg.partition
    K = cfg.task.K
    C, beta = part.C, part.beta
    if cfg.sweep_param == "C":
        C = int(setting)
    elif cfg.sweep_param == "beta":
        beta = float(setting)

    if part.scheme == "explicit":
        marginals = [LabelMarginal(m) for m in part.marginals]
        sizes = list(part.sizes)
    elif part.scheme == "sparsity":
        marginals = PartitionSpec("sparsity", part.M, C=C).marginals_for(K, seed)
        sizes = sparsity_sizes(part.M, C, cfg.samples_per_label)
    else:
        marginals = PartitionSpec("dirichlet", part.M, beta=beta).marginals_for(K, seed)
        sizes = list(part.sizes) if part.sizes else [cfg.samples_per_label * K] * part.M
    if len(sizes) != len(marginals):
        raise ConfigError(f"partition.sizes: {len(sizes)} sizes for {len(marginals)} partitions")

    kind = cfg.target["kind"]
    if kind == "delta":
        target = make_target_delta(float(setting) if cfg.sweep_param == "delta" else float(cfg.target.get("delta", 0.0)))
    elif kind == "explicit":
        target = LabelMarginal(cfg.target["probs"])
    else:
        idx = int(cfg.target.get("index", -1)) % len(marginals)
        target = marginals.pop(idx)
        sizes.pop(idx)
    if target.K != K:
        raise ConfigError(f"target: has K={target.K}, task has K={K}")

    server_target = target
    if cfg.sweep_param == "perturb":
        server_target = perturb_target(target, float(setting), seed)

    def make(i: int, marginal: LabelMarginal, n: int) -> ClientState:
        return ClientState(i, sample_gaussian_dataset(cfg.task, marginal, n, stream(seed, "client", i), cfg.sampling))

    clients = [make(i, m, n) for i, (m, n) in enumerate(zip(marginals, sizes))]
    oracle = [make(i, target, n) for i, n in enumerate(sizes)]
    test = sample_gaussian_dataset(cfg.task, target, cfg.n_test, stream(seed, "target"), cfg.sampling)
    return SettingData(clients, oracle, target, server_target, test)


# -- running ------------------------------------------------------------------------


@dataclass
class RunResult:
    setting: float
    seed: int
    strategy: str
    records: list[RoundRecord]
    proj_dist: float


def run_single(cfg: ExperimentConfig, setting: float, seed: int, strategy: Strategy) -> RunResult:
    data = build_setting(cfg, setting, seed)
    clients = data.oracle_clients if strategy.kind == "oracle" else data.clients
    fed = FederationConfig(
        arch=cfg.arch,
        strategy=strategy,
        rounds=cfg.rounds,
        local=cfg.local,
        client_fraction=cfg.client_fraction,
        master_seed=seed,
        target=data.server_target,
    )
    records = train(fed, clients, data.test)
    S = ClientMarginalSet(tuple(c.marginal for c in clients), np.array([c.n for c in clients]))
    return RunResult(setting, seed, strategy.name, records, projection_distance(data.true_target, S))


def _run_job(args) -> RunResult:
    return run_single(*args)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}: must be an integer, got {raw!r}") from None
    return max(1, n)


def run_all(cfg: ExperimentConfig, settings: Sequence[float] | None = None, workers: int | None = None) -> list[RunResult]:
    """Every (setting, seed, strategy) run, in canonical order."""
    settings = cfg.settings if settings is None else tuple(settings)
    jobs = [(cfg, s, seed, strat) for s in settings for seed in cfg.seeds for strat in cfg.strategies]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    return results


def records_csv(results: Sequence[RunResult], setting_is_int: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in results:
        setting = _setting_str(r.setting, setting_is_int)
        for rec in r.records:
            w.writerow([
                rec.round, rec.strategy, _fmt(rec.lam), _fmt(rec.ess), _fmt(rec.residual),
                _fmt(rec.target_acc), _fmt(rec.target_loss), _fmt(rec.macro_f1), r.seed, setting,
            ])
    return buf.getvalue()


def _setting_str(setting: float, as_int: bool) -> str:
    if math.isnan(setting):
        return ""
    return str(int(setting)) if as_int else repr(float(setting))


@dataclass(frozen=True)
class SummaryRow:
    strategy: str
    setting: str
    metric: str
    mean: float
    std: float
    seeds: int
    proj_dist: float

    def __post_init__(self) -> None:
        if self.seeds < 1:
            raise ValueError("seed count must be >= 1")


def summarize(results: Sequence[RunResult], setting_is_int: bool = False) -> list[SummaryRow]:
    """Mean and population std over seeds of the final-round metrics, per (setting, strategy)."""
    groups: dict[tuple[str, str], list[RunResult]] = {}
    for r in results:
        groups.setdefault((_setting_str(r.setting, setting_is_int), r.strategy), []).append(r)
    rows = []
    for (setting, strategy), runs in groups.items():
        pd = float(np.mean([r.proj_dist for r in runs]))
        for metric, attr in (("final_target_acc", "target_acc"), ("final_macro_f1", "macro_f1")):
            vals = np.array([getattr(r.records[-1], attr) for r in runs])
            std = float(vals.std()) if vals.size > 1 else 0.0
            rows.append(SummaryRow(strategy, setting, metric, float(vals.mean()), std, int(vals.size), pd))
    return rows


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in rows:
        w.writerow([r.strategy, r.setting, r.metric, _fmt(r.mean), _fmt(r.std), r.seeds, _fmt(r.proj_dist)])
    return buf.getvalue()


def read_summary(path: str | Path) -> list[SummaryRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_HEADER:
            raise ValueError(f"{path}: unexpected summary header {reader.fieldnames}")
        return [
            SummaryRow(r["strategy"], r["setting"], r["metric"], float(r["mean"]), float(r["std"]), int(r["seeds"]), float(r["proj_dist"]))
            for r in reader
        ]


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    settings: Sequence[float] | None = None,
    workers: int | None = None,
) -> tuple[Path, Path]:
    """Run every (setting, seed, strategy) and write ``records.csv`` and ``summary.csv``."""
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    results = run_all(cfg, settings, workers)
    as_int = cfg.sweep_param == "C"
    rec_path, sum_path = out / "records.csv", out / "summary.csv"
    rec_path.write_text(records_csv(results, as_int))
    sum_path.write_text(summary_csv(summarize(results, as_int)))
    return rec_path, sum_path


def with_seed_offset(cfg: ExperimentConfig, offset: int) -> ExperimentConfig:
    return replace(cfg, seeds=tuple(s + offset for s in cfg.seeds))


# -- comparison ---------------------------------------------------------------------


@dataclass
class ComparisonReport:
    columns: list[str]
    settings: list[str]
    table: dict[tuple[str, str], float]
    reference: str
    gaps: dict[tuple[str, str], float]
    winners: dict[str, str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        gap_cols = [c for c in self.columns if c != self.reference]
        w.writerow(["setting", *self.columns, "winner", *(f"gap:{c}" for c in gap_cols)])
        for s in self.settings:
            w.writerow([s, *(_fmt(self.table[(s, c)]) for c in self.columns), self.winners[s],
                        *(_fmt(self.gaps[(s, c)]) for c in gap_cols)])
        return buf.getvalue()

    def to_text(self) -> str:
        gap_cols = [c for c in self.columns if c != self.reference]
        head = ["setting", *self.columns, "winner", *(f"{c} - {self.reference}" for c in gap_cols)]
        rows = [
            [s or "-", *(f"{self.table[(s, c)]:.4f}" for c in self.columns), self.winners[s],
             *(f"{self.gaps[(s, c)]:+.4f}" for c in gap_cols)]
            for s in self.settings
        ]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
        lines = ["  ".join(str(x).ljust(wd) for x, wd in zip(r, widths)).rstrip() for r in [head, *rows]]
        return "\n".join(lines) + "\n"


def compare_strategies(paths: Sequence[str | Path], metric: str = "final_target_acc") -> ComparisonReport:
    """Side-by-side table of summary files.

    A strategy name that appears in more than one file is suffixed ``@<file stem>``.
    Gaps are taken against the first ``fedavg`` column, or the first column if
    there is none.
    """
    if not paths:
        raise ValueError("no summary files given")
    per_file = []
    for p in paths:
        rows = [r for r in read_summary(p) if r.metric == metric]
        if not rows:
            raise ValueError(f"{p}: no rows for metric {metric!r}")
        per_file.append((Path(p), rows))

    grids = [sorted({r.setting for r in rows}, key=_setting_key) for _, rows in per_file]
    for (p, _), g in zip(per_file[1:], grids[1:]):
        if g != grids[0]:
            raise ValueError(f"mismatched grids: {p} has settings {g}, expected {grids[0]}")
    settings = grids[0]

    counts: dict[str, int] = {}
    for _, rows in per_file:
        for name in dict.fromkeys(r.strategy for r in rows):
            counts[name] = counts.get(name, 0) + 1
    columns: list[str] = []
    table: dict[tuple[str, str], float] = {}
    for p, rows in per_file:
        for r in rows:
            col = r.strategy if counts[r.strategy] == 1 else f"{r.strategy}@{p.stem if p.stem != 'summary' else p.parent.name}"
            if col not in columns:
                columns.append(col)
            table[(r.setting, col)] = r.mean
    for s in settings:
        for c in columns:
            if (s, c) not in table:
                raise ValueError(f"mismatched grids: column {c} lacks setting {s!r}")
    reference = next((c for c in columns if c.split("@")[0] == "fedavg"), columns[0])
    gaps = {(s, c): table[(s, c)] - table[(s, reference)] for s in settings for c in columns if c != reference}
    winners = {s: max(columns, key=lambda c: (table[(s, c)], -columns.index(c))) for s in settings}
    return ComparisonReport(columns, settings, table, reference, gaps, winners)


def _setting_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)
