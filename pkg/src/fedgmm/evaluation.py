"""Fitness score, anomaly scoring, AUC-PR and communication accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from .gmm import GmmParams, InvalidInputError, log_pdf


class Method(str, Enum):
    FEDGENGMM = "FedGenGMM"
    DEM_INIT1 = "DemInit1"
    DEM_INIT2 = "DemInit2"
    DEM_INIT3 = "DemInit3"
    LOCAL_MODELS = "LocalModels"
    BENCHMARK = "Benchmark"


@dataclass(frozen=True)
class CommLedger:
    """Traffic counters for one training run.

    Rounds count synchronised communication steps, ``client_uploads`` counts
    individual client->server messages, ``payload_floats`` counts scalars moved
    in either direction.
    """

    client_to_server_rounds: int = 0
    server_to_client_rounds: int = 0
    payload_floats: int = 0
    client_uploads: int = 0

    def __post_init__(self):
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise InvalidInputError("ledger counters must be non-negative")

    def __add__(self, other: "CommLedger") -> "CommLedger":
        return ledger_merge(self, other)


def ledger_merge(a: CommLedger, b: CommLedger) -> CommLedger:
    return CommLedger(**{f.name: getattr(a, f.name) + getattr(b, f.name) for f in fields(CommLedger)})


@dataclass(frozen=True)
class MetricRecord:
    method: Method
    gamma: float
    auc_pr: float
    rounds: int
    seed: int

    def __post_init__(self):
        if not (np.isnan(self.auc_pr) or 0.0 <= self.auc_pr <= 1.0):
            raise InvalidInputError(f"auc_pr {self.auc_pr} outside [0, 1]")


def fitness_gamma(model: GmmParams, data: np.ndarray) -> float:
    """Average per-row log-likelihood; higher means a closer fit."""
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidInputError("fitness_gamma needs at least one row")
    return float(np.mean(log_pdf(model, x)))


def anomaly_scores(model: GmmParams, rows: np.ndarray) -> np.ndarray:
    """Negative log-likelihood per row, so larger means more anomalous."""
    return -log_pdf(model, np.asarray(rows, dtype=float))


def auc_pr(scores, labels) -> float:
    """Step-wise average precision with label 1 as the positive class.

    Thresholds are the distinct scores in descending order; tied scores enter
    the curve together. AP = sum over thresholds of (recall gain) * precision.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise InvalidInputError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise InvalidInputError("labels must be binary")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise InvalidInputError("auc_pr needs both positive and negative labels")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    seen = np.arange(1, y.size + 1)
    # last index of each group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), y.size - 1]
    precision = tp[ends] / seen[ends]
    recall = tp[ends] / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return min(max(math.fsum(gains * precision), 0.0), 1.0)


def model_payload(model: GmmParams) -> int:
    """Scalars in one client upload: model parameters plus the local row count."""
    return model.n_floats() + 1
