"""One-shot federated GMM aggregation.

Clients fit local mixtures once and upload them with their row counts. The
server reweights every component by its client's share of the data, pools all
components into one mixture, draws a synthetic set from it and fits the global
model on that set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .evaluation import CommLedger, model_payload
from .gmm import FitConfig, FitReport, GmmParams, InvalidInputError, sample, train_gmm

DEFAULT_H = 100


@dataclass(frozen=True)
class ClientModel:
    params: GmmParams
    n_local: int

    def __post_init__(self):
        if self.n_local < 1:
            raise InvalidInputError("n_local must be >= 1")


@dataclass(frozen=True)
class AggregationConfig:
    h: int = DEFAULT_H
    global_fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0

    def __post_init__(self):
        if self.h < 1:
            raise InvalidInputError("h must be >= 1")


@dataclass(frozen=True)
class SyntheticStats:
    n_synthetic: int
    pooled_k: int
    ledger: CommLedger


def train_local(data: np.ndarray, config: FitConfig) -> ClientModel:
    """Client-side fit. The k range is clipped to the local row count."""
    x = np.asarray(data, dtype=float)
    n = x.shape[0]
    if n < 1:
        raise InvalidInputError("client has no data")
    k_max = min(config.k_max, n)
    k_min = min(config.k_min, k_max)
    params, _ = train_gmm(x, replace(config, k_min=k_min, k_max=k_max))
    return ClientModel(params, n)


def pool_clients(clients: Sequence[ClientModel]) -> GmmParams:
    """Concatenate all client components, weight ``r_ck * n_c / sum(n)``, renormalised."""
    if not clients:
        raise InvalidInputError("need at least one client")
    first = clients[0].params
    for c in clients:
        if c.params.dim != first.dim or c.params.cov_type is not first.cov_type:
            raise InvalidInputError("clients disagree on dimension or covariance type")
    total = sum(c.n_local for c in clients)
    weights = np.concatenate([c.params.weights * (c.n_local / total) for c in clients])
    means = np.concatenate([c.params.means for c in clients])
    covs = np.concatenate([c.params.covariances for c in clients])
    return GmmParams(weights / weights.sum(), means, covs, first.cov_type)


def synthetic_size(clients: Sequence[ClientModel], h: int) -> int:
    return h * sum(c.params.n_components for c in clients)


def drop_empty_components(model: GmmParams) -> GmmParams:
    keep = model.weights > 0
    if keep.all():
        return model
    w = model.weights[keep]
    return GmmParams(w / w.sum(), model.means[keep], model.covariances[keep], model.cov_type)


def upload_ledger(clients: Sequence[ClientModel]) -> CommLedger:
    return CommLedger(
        client_to_server_rounds=1,
        payload_floats=sum(model_payload(c.params) for c in clients),
        client_uploads=len(clients),
    )


def aggregate(
    clients: Sequence[ClientModel], config: AggregationConfig = AggregationConfig()
) -> tuple[GmmParams, FitReport, SyntheticStats]:
    """Server side: pool, draw ``h * sum(K_c)`` synthetic rows, fit the global model."""
    pooled = drop_empty_components(pool_clients(clients))
    n_syn = synthetic_size(clients, config.h)
    synthetic = sample(pooled, n_syn, config.seed)
    params, report = train_gmm(synthetic, config.global_fit)
    stats = SyntheticStats(n_synthetic=n_syn, pooled_k=pooled.n_components, ledger=upload_ledger(clients))
    return params, report, stats


def run_fedgengmm(
    client_data: Sequence[np.ndarray], local_fit: FitConfig, config: AggregationConfig = AggregationConfig()
) -> tuple[GmmParams, FitReport, SyntheticStats, list[ClientModel]]:
    """End-to-end simulation: every client trains locally, then one aggregation."""
    seeds = np.random.SeedSequence(local_fit.seed).generate_state(len(client_data), dtype=np.uint32)
    clients = [
        train_local(x, replace(local_fit, seed=int(s)))
        for x, s in zip(client_data, seeds)
    ]
    params, report, stats = aggregate(clients, config)
    return params, report, stats, clients
