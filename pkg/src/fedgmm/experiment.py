"""Seeded experiment runner: sweeps, repeats, per-method training and long-format results.

Every random draw in a run derives from ``seed_base`` through
:func:`derive_seed`, a splitmix64 chain over integer keys::

    h = splitmix64(seed_base)
    for key in keys: h = splitmix64(h ^ key)

Keys are ``(SCENARIO_TAG, sweep_index, repeat, purpose[, method_index])``
where ``purpose`` is one of the ``_P_*`` constants below. All arithmetic is
modulo 2**64.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .dem import DemConfig, InitScheme, benchmark_train, dem_train
from .evaluation import Method, MetricRecord, anomaly_scores, auc_pr, fitness_gamma
from .gmm import CovarianceType, FitConfig, InvalidInputError
from .io import load_csv, pca_reduce
from .one_shot import AggregationConfig, aggregate, train_local
from .partition import (
    LabeledDataset,
    OodKind,
    OodSpec,
    PartitionScheme,
    PartitionSpec,
    build_anomaly_testset,
    gen_mixture_dataset,
    split_indices,
)

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
METRICS = ("gamma", "auc_pr", "rounds")
SWEEP_VARIABLES = {"alpha": "alpha", "clients": "n_clients", "k_clients": "k_clients"}
SCENARIO_TAG = {"alpha": 1, "clients": 2, "k_clients": 3}
_P_DATA, _P_SPLIT, _P_PARTITION, _P_TEST, _P_LOCAL, _P_GLOBAL, _P_DEM = range(7)

_DEM_METHODS = {
    Method.DEM_INIT1: InitScheme.RANGE_SEPARATED,
    Method.DEM_INIT2: InitScheme.SUBSET_PRETRAIN,
    Method.DEM_INIT3: InitScheme.FEDERATED_KMEANS,
}


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(base: int, *keys: int) -> int:
    h = splitmix64(base & MASK64)
    for key in keys:
        h = splitmix64(h ^ (key & MASK64))
    return h


@dataclass(frozen=True)
class DatasetConfig:
    synthetic: Optional[dict] = None  # {m_classes, d, n, separation}
    csv_path: Optional[str] = None
    label_column: Optional[str] = None
    pca_dims: Optional[int] = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv_path is None):
            raise InvalidInputError("dataset needs exactly one of 'synthetic' or 'csv_path'")


@dataclass(frozen=True)
class OodConfig:
    kind: OodKind = OodKind.ADDITIVE_GAUSSIAN
    variance: float = 0.005
    shift_sigmas: float = 5.0
    delta: Optional[tuple] = None
    anomaly_ratio: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "kind", OodKind(self.kind))
        if self.delta is not None:
            object.__setattr__(self, "delta", tuple(self.delta))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    scenario: str = "alpha"
    sweep: tuple = (0.1, 0.3, 0.5)
    scheme: PartitionScheme = PartitionScheme.DIRICHLET
    alpha: float = 0.2
    n_clients: int = 20
    methods: tuple = tuple(Method)
    k: int = 15
    k_clients: Optional[int] = None
    cov_type: CovarianceType = CovarianceType.DIAGONAL
    tol: float = 1e-3
    max_iters: int = 100
    reg_floor: float = 1e-6
    n_init: int = 1
    h: int = 100
    dem_max_rounds: int = 100
    dem_subset_size: int = 100
    ood: OodConfig = field(default_factory=OodConfig)
    split: tuple = (0.7, 0.2, 0.1)  # train, inlier test, OOD source
    repeats: int = 5
    seed_base: int = 0
    workers: int = 1

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "scheme", PartitionScheme(self.scheme))
        set_(self, "cov_type", CovarianceType(self.cov_type))
        set_(self, "methods", tuple(Method(m) for m in self.methods))
        set_(self, "sweep", tuple(self.sweep))
        set_(self, "split", tuple(self.split))
        if self.scenario not in SWEEP_VARIABLES:
            raise InvalidInputError(f"unknown scenario {self.scenario!r}")
        if not self.sweep:
            raise InvalidInputError("sweep must not be empty")
        if not self.methods:
            raise InvalidInputError("methods must not be empty")
        if self.repeats < 1:
            raise InvalidInputError("repeats must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise InvalidInputError("split must be three positive fractions summing to 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        doc["dataset"] = DatasetConfig(**doc["dataset"])
        if "ood" in doc:
            doc["ood"] = OodConfig(**doc["ood"])
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=str))

    @property
    def sweep_variable(self) -> str:
        return SWEEP_VARIABLES[self.scenario]


@dataclass(frozen=True)
class CellResult:
    sweep_index: int
    repeat: int
    records: dict  # Method -> MetricRecord | None (None marks a failed cell)
    errors: dict


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list

    def records(self, method: Method, sweep_index: int) -> list[MetricRecord]:
        return [
            c.records[method] for c in self.cells
            if c.sweep_index == sweep_index and c.records.get(method) is not None
        ]

    def summary(self) -> list[dict]:
        """One row per (method, sweep point, metric) in a fixed order.

        ``std`` is the sample standard deviation (0 for a single repeat).
        """
        rows = []
        for method in self.config.methods:
            for i, value in enumerate(self.config.sweep):
                recs = self.records(method, i)
                for metric in METRICS:
                    vals = np.array([getattr(r, metric) for r in recs], dtype=float)
                    vals = vals[~np.isnan(vals)]
                    mean = float(vals.mean()) if vals.size else math.nan
                    std = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else math.nan)
                    rows.append({
                        "method": method.value,
                        "sweep_variable": self.config.sweep_variable,
                        "sweep_value": value,
                        "metric": metric,
                        "mean": mean,
                        "std": std,
                        "n_repeats": int(vals.size),
                    })
        return rows


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    ds = cfg.dataset
    if ds.synthetic is not None:
        data, _ = gen_mixture_dataset(seed=derive_seed(cfg.seed_base, _P_DATA), **ds.synthetic)
    else:
        data = load_csv(ds.csv_path, ds.label_column)
    if ds.pca_dims is not None:
        data = LabeledDataset(pca_reduce(data.rows, ds.pca_dims), data.labels)
    return data


def ood_spec_for(cfg: OodConfig, train: LabeledDataset) -> OodSpec:
    """Resolve the OOD config against the training rows.

    Without an explicit delta, a shift moves every feature by ``shift_sigmas``
    pooled within-class standard deviations, with alternating signs.
    """
    if cfg.kind is OodKind.ADDITIVE_GAUSSIAN:
        return OodSpec(OodKind.ADDITIVE_GAUSSIAN, variance=cfg.variance, anomaly_ratio=cfg.anomaly_ratio)
    if cfg.delta is not None:
        delta = np.asarray(cfg.delta, dtype=float)
    else:
        resid = train.rows.copy()
        for m in np.unique(train.labels):
            rows = train.labels == m
            resid[rows] -= train.rows[rows].mean(axis=0)
        sigma = resid.std(axis=0)
        signs = np.where(np.arange(train.rows.shape[1]) % 2 == 0, 1.0, -1.0)
        delta = cfg.shift_sigmas * sigma * signs
    return OodSpec(OodKind.MIXTURE_SHIFT, delta=tuple(delta), anomaly_ratio=cfg.anomaly_ratio)


def audit_split(train_idx: np.ndarray, partition_idx: list[np.ndarray], test_idx: list[np.ndarray]) -> None:
    """Raise if any client training row also feeds the evaluation test set."""
    used = np.concatenate([train_idx[a] for a in partition_idx])
    held_out = np.concatenate(test_idx)
    if np.intersect1d(used, held_out).size:
        raise AssertionError("training and test rows overlap")


def _cell_settings(cfg: ExperimentConfig, sweep_index: int):
    value = cfg.sweep[sweep_index]
    alpha, n_clients, k_clients = cfg.alpha, cfg.n_clients, cfg.k_clients or cfg.k
    if cfg.scenario == "alpha":
        alpha = value
    elif cfg.scenario == "clients":
        n_clients = int(value)
    else:
        k_clients = int(value)
    return alpha, n_clients, k_clients


def run_cell(cfg: ExperimentConfig, data: LabeledDataset, sweep_index: int, repeat: int) -> CellResult:
    tag = SCENARIO_TAG[cfg.scenario]

    def seed(*keys: int) -> int:
        return derive_seed(cfg.seed_base, tag, sweep_index, repeat, *keys)

    alpha, n_clients, k_clients = _cell_settings(cfg, sweep_index)
    tr, te, oo = split_indices(data.labels.size, cfg.split, seed(_P_SPLIT))
    train = data.subset(tr)
    partition = PartitionSpec(cfg.scheme, alpha, n_clients, seed(_P_PARTITION)).apply(train)
    n_test = te.size
    n_ood = int(round(cfg.ood.anomaly_ratio * n_test))
    if n_ood > oo.size:
        n_test = int(oo.size / cfg.ood.anomaly_ratio)
    test_rows, test_labels = build_anomaly_testset(
        data.subset(te), ood_spec_for(cfg.ood, train), n_test, seed(_P_TEST), ood_source=data.subset(oo)
    )
    audit_split(tr, list(partition.assignments), [te, oo])
    client_data = partition.client_rows(train)

    fit = FitConfig(
        cfg.k, cfg.k, cfg.cov_type, cfg.tol, cfg.max_iters, cfg.reg_floor, cfg.n_init, seed(_P_GLOBAL)
    )
    local_fit = replace(fit, k_min=k_clients, k_max=k_clients)
    records: dict = {}
    errors: dict = {}
    clients = None

    def local_clients():
        nonlocal clients
        if clients is None:
            clients = [
                train_local(x, replace(local_fit, seed=seed(_P_LOCAL, c)))
                for c, x in enumerate(client_data)
            ]
        return clients

    def score(model):
        return fitness_gamma(model, train.rows), auc_pr(anomaly_scores(model, test_rows), test_labels)

    for mi, method in enumerate(cfg.methods):
        try:
            if method is Method.FEDGENGMM:
                agg = AggregationConfig(cfg.h, fit, seed(_P_GLOBAL, mi))
                model, _, stats = aggregate(local_clients(), agg)
                gamma, ap = score(model)
                rounds = stats.ledger.client_to_server_rounds
            elif method is Method.LOCAL_MODELS:
                scores = [score(c.params) for c in local_clients()]
                gamma = float(np.mean([s[0] for s in scores]))
                ap = float(np.mean([s[1] for s in scores]))
                rounds = 0
            elif method is Method.BENCHMARK:
                model, _ = benchmark_train(train.rows, fit)
                gamma, ap = score(model)
                rounds = 0
            else:
                dem_cfg = DemConfig(
                    cfg.k, _DEM_METHODS[method], cfg.tol, cfg.dem_max_rounds,
                    max(cfg.dem_subset_size, cfg.k), seed(_P_DEM, mi), cfg.cov_type, cfg.reg_floor,
                )
                result = dem_train(client_data, dem_cfg)
                gamma, ap = score(result.params)
                rounds = result.rounds
            records[method] = MetricRecord(method, gamma, ap, rounds, seed(mi))
        except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, the sweep goes on
            log.warning("cell %s/%s/%s failed: %s", method.value, sweep_index, repeat, exc)
            records[method] = None
            errors[method] = f"{type(exc).__name__}: {exc}"
    return CellResult(sweep_index, repeat, records, errors)


def _run_cell_job(args):
    cfg, data, i, r = args
    return run_cell(cfg, data, i, r)


def run_scenario(cfg: ExperimentConfig, data: Optional[LabeledDataset] = None) -> ExperimentResult:
    """Run every (sweep point, repeat) cell; results are ordered independently of completion."""
    if data is None:
        data = load_dataset(cfg)
    jobs = [(cfg, data, i, r) for i in range(len(cfg.sweep)) for r in range(cfg.repeats)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            cells = list(pool.map(_run_cell_job, jobs))
    else:
        cells = [_run_cell_job(j) for j in jobs]
    return ExperimentResult(cfg, cells)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def emit_results(result: ExperimentResult, path) -> None:
    """Write the long-format summary CSV."""
    columns = ["method", "sweep_variable", "sweep_value", "metric", "mean", "std", "n_repeats"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in result.summary():
            writer.writerow([_fmt(row[c]) for c in columns])


def write_manifest(result: ExperimentResult, path) -> None:
    errors = [
        {"sweep_index": c.sweep_index, "repeat": c.repeat, "method": m.value, "error": e}
        for c in result.cells for m, e in c.errors.items()
    ]
    manifest = {
        "config": result.config.to_dict(),
        "versions": {"fedgmm": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "created": datetime.now(timezone.utc).isoformat(),
        "failed_cells": errors,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def per_repeat_table(result: ExperimentResult) -> list[dict]:
    """Raw per-repeat records, for auditing the aggregated summary."""
    out = []
    for c in result.cells:
        for m, rec in c.records.items():
            if rec is not None:
                out.append({
                    "method": m.value, "sweep_value": result.config.sweep[c.sweep_index], "repeat": c.repeat,
                    "gamma": rec.gamma, "auc_pr": rec.auc_pr, "rounds": rec.rounds,
                })
    return out


__all__ = [
    "ExperimentConfig", "DatasetConfig", "OodConfig", "ExperimentResult", "derive_seed", "splitmix64",
    "run_scenario", "run_cell", "emit_results", "write_manifest", "load_dataset", "audit_split",
    "per_repeat_table",
]
