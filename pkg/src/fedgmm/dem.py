"""Distributed EM baseline and the non-federated reference points.

Each round the server broadcasts the global mixture, every client runs an
E-step on its own rows and uploads additive sufficient statistics, and the
server turns the summed statistics into the next global mixture. Because the
statistics add up exactly, one round equals one centralised EM iteration on
the union of the client data.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .evaluation import CommLedger, fitness_gamma
from .gmm import (
    EMPTY_COMPONENT_MASS,
    CovarianceType,
    FitConfig,
    FitReport,
    GmmParams,
    InvalidInputError,
    _floor_full,
    bic_from_loglik,
    e_step,
    fit_em,
    kmeans,
    train_gmm,
)
from .one_shot import ClientModel

INIT_VARIANCE = 0.05
DEFAULT_SUBSET_SIZE = 100


class InitScheme(str, Enum):
    RANGE_SEPARATED = "range"
    SUBSET_PRETRAIN = "subset"
    FEDERATED_KMEANS = "fedkmeans"


@dataclass(frozen=True)
class DemConfig:
    k: int
    init_scheme: InitScheme = InitScheme.FEDERATED_KMEANS
    tol: float = 1e-3
    max_rounds: int = 100
    subset_size: int = DEFAULT_SUBSET_SIZE
    seed: int = 0
    cov_type: CovarianceType = CovarianceType.DIAGONAL
    reg_floor: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "init_scheme", InitScheme(self.init_scheme))
        object.__setattr__(self, "cov_type", CovarianceType(self.cov_type))
        if self.k < 1 or self.max_rounds < 1:
            raise InvalidInputError("k and max_rounds must be >= 1")
        if self.init_scheme is InitScheme.SUBSET_PRETRAIN and self.subset_size < self.k:
            raise InvalidInputError("subset_size must be >= k")


@dataclass(frozen=True)
class SuffStats:
    resp_sums: np.ndarray      # (K,)
    weighted_sums: np.ndarray  # (K, d)
    weighted_sq: np.ndarray    # (K, d) or (K, d, d)
    n_local: int
    local_avg_loglik: float
    worst_point: np.ndarray    # reservoir of size 1 for re-seeding empty components
    worst_loglik: float

    def n_floats(self) -> int:
        return self.resp_sums.size + self.weighted_sums.size + self.weighted_sq.size + self.worst_point.size + 3


@dataclass(frozen=True)
class DemResult:
    params: GmmParams
    rounds: int
    report: FitReport
    ledger: CommLedger


def _diag_cov(k: int, d: int, cov_type: CovarianceType, variance: float = INIT_VARIANCE) -> np.ndarray:
    if cov_type is CovarianceType.DIAGONAL:
        return np.full((k, d), variance)
    return np.tile(np.eye(d) * variance, (k, 1, 1))


def dem_init_range(k: int, d: int, seed: int, cov_type: CovarianceType = CovarianceType.DIAGONAL) -> GmmParams:
    """Spread-out centers in the unit hypercube by greedy farthest-point selection.

    The candidate pool is ``100 * k`` uniform points; the first center is the
    candidate nearest the cube center.
    """
    if k < 1 or d < 1:
        raise InvalidInputError("k and d must be >= 1")
    pool = np.random.default_rng(seed).uniform(size=(100 * k, d))
    chosen = [int(np.argmin(((pool - 0.5) ** 2).sum(axis=1)))]
    dist = ((pool - pool[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((pool - pool[nxt]) ** 2).sum(axis=1))
    cov_type = CovarianceType(cov_type)
    return GmmParams(np.full(k, 1.0 / k), pool[chosen], _diag_cov(k, d, cov_type), cov_type)


def draw_global_subset(client_data: Sequence[np.ndarray], m: int, seed: int) -> np.ndarray:
    """Uniform sample of ``m`` rows (without replacement) from the union of the client data."""
    union = np.concatenate([np.asarray(x, dtype=float) for x in client_data])
    m = min(m, union.shape[0])
    idx = np.sort(np.random.default_rng(seed).choice(union.shape[0], size=m, replace=False))
    return union[idx]


def dem_init_subset(
    subset: np.ndarray, k: int, seed: int, cov_type: CovarianceType = CovarianceType.DIAGONAL,
    reg_floor: float = 1e-6, tol: float = 1e-3,
) -> GmmParams:
    x = np.asarray(subset, dtype=float)
    if x.shape[0] < k:
        raise InvalidInputError(f"subset of {x.shape[0]} rows cannot seed {k} components")
    params, _ = fit_em(x, k, FitConfig(k, k, cov_type, tol=tol, reg_floor=reg_floor, seed=seed))
    return params


def fed_kmeans(client_data: Sequence[np.ndarray], k: int, seed: int):
    """Federated k-means: local k-means per client, weighted k-means over the reported centers.

    Returns ``(centers, cluster_mass, ledger)``; ``cluster_mass`` is the number
    of client rows behind each global center.
    """
    seeds = np.random.SeedSequence(seed).generate_state(len(client_data) + 1, dtype=np.uint32)
    reported, sizes = [], []
    payload = 0
    for x, s in zip(client_data, seeds):
        x = np.asarray(x, dtype=float)
        if x.shape[0] < 1:
            raise InvalidInputError("every client needs at least one row")
        local_k = min(k, x.shape[0])
        centers, _, mass = kmeans(x, local_k, int(s))
        reported.append(centers)
        sizes.append(mass)
        payload += centers.size + mass.size
    pts = np.concatenate(reported)
    w = np.concatenate(sizes)
    keep = w > 0
    pts, w = pts[keep], w[keep]
    if pts.shape[0] < k:
        raise InvalidInputError(f"clients reported {pts.shape[0]} centers, need {k}")
    centers, _, mass = kmeans(pts, k, int(seeds[-1]), sample_weight=w, max_iter=100)
    ledger = CommLedger(client_to_server_rounds=1, payload_floats=payload, client_uploads=len(client_data))
    return centers, mass, ledger


def client_stats(model: GmmParams, data: np.ndarray) -> SuffStats:
    """Client side of a round: E-step against the broadcast model, reduced to sums."""
    x = np.asarray(data, dtype=float)
    resp, avg, point_ll = e_step(model, x, return_point_loglik=True)
    if model.cov_type is CovarianceType.DIAGONAL:
        sq = resp.T @ (x * x)
    else:
        sq = np.einsum("nk,ni,nj->kij", resp, x, x)
    worst = int(np.argmin(point_ll))
    return SuffStats(
        resp_sums=resp.sum(axis=0),
        weighted_sums=resp.T @ x,
        weighted_sq=sq,
        n_local=x.shape[0],
        local_avg_loglik=avg,
        worst_point=x[worst].copy(),
        worst_loglik=float(point_ll[worst]),
    )


def server_m_step(stats: Sequence[SuffStats], cov_type: CovarianceType, reg_floor: float = 1e-6) -> GmmParams:
    """Global M-step from summed statistics.

    Empty components are re-seeded at the worst reported reservoir points
    with the pooled data covariance.
    """
    cov_type = CovarianceType(cov_type)
    n = sum(s.n_local for s in stats)
    nk = np.sum([s.resp_sums for s in stats], axis=0)
    sums = np.sum([s.weighted_sums for s in stats], axis=0)
    sq = np.sum([s.weighted_sq for s in stats], axis=0)
    k, d = sums.shape
    live = nk >= EMPTY_COMPONENT_MASS
    if not live.any():
        raise InvalidInputError("all components are empty")
    safe = np.where(live, nk, 1.0)
    means = sums / safe[:, None]
    if cov_type is CovarianceType.DIAGONAL:
        covs = np.maximum(sq / safe[:, None] - means * means, reg_floor)
    else:
        covs = np.stack([
            _floor_full(sq[j] / safe[j] - np.outer(means[j], means[j]), reg_floor) for j in range(k)
        ])
    weights = nk / n

    if not live.all():
        total_mean = sums.sum(axis=0) / n
        if cov_type is CovarianceType.DIAGONAL:
            scatter = np.maximum(sq.sum(axis=0) / n - total_mean**2, reg_floor)
        else:
            scatter = _floor_full(sq.sum(axis=0) / n - np.outer(total_mean, total_mean), reg_floor)
        reservoir = sorted(stats, key=lambda s: s.worst_loglik)
        for i, j in enumerate(np.flatnonzero(~live)):
            means[j] = reservoir[i % len(reservoir)].worst_point
            covs[j] = scatter
            weights[j] = 1.0 / n
    return GmmParams(weights / weights.sum(), means, covs, cov_type)


def dem_round(model: GmmParams, client_data: Sequence[np.ndarray], reg_floor: float = 1e-6):
    """One broadcast/upload cycle.

    Returns ``(new_params, avg_loglik, ledger)`` where ``avg_loglik`` is the
    row-weighted average client log-likelihood of the broadcast ``model``.
    """
    stats = [client_stats(model, x) for x in client_data]
    n = sum(s.n_local for s in stats)
    avg = sum(s.n_local * s.local_avg_loglik for s in stats) / n
    new = server_m_step(stats, model.cov_type, reg_floor)
    ledger = CommLedger(
        client_to_server_rounds=1,
        server_to_client_rounds=1,
        payload_floats=len(stats) * model.n_floats() + sum(s.n_floats() for s in stats),
        client_uploads=len(stats),
    )
    return new, avg, ledger


def dem_initialize(client_data: Sequence[np.ndarray], config: DemConfig) -> tuple[GmmParams, CommLedger]:
    d = np.asarray(client_data[0]).shape[1]
    if config.init_scheme is InitScheme.RANGE_SEPARATED:
        return dem_init_range(config.k, d, config.seed, config.cov_type), CommLedger()
    if config.init_scheme is InitScheme.SUBSET_PRETRAIN:
        subset = draw_global_subset(client_data, config.subset_size, config.seed)
        params = dem_init_subset(subset, config.k, config.seed, config.cov_type, config.reg_floor, config.tol)
        ledger = CommLedger(client_to_server_rounds=1, payload_floats=subset.size, client_uploads=len(client_data))
        return params, ledger
    centers, mass, ledger = fed_kmeans(client_data, config.k, config.seed)
    mass = np.maximum(mass, 0.0)
    weights = mass / mass.sum() if mass.sum() > 0 else np.full(config.k, 1.0 / config.k)
    return GmmParams(weights, centers, _diag_cov(config.k, d, config.cov_type), config.cov_type), ledger


def dem_train(client_data: Sequence[np.ndarray], config: DemConfig, init: GmmParams | None = None) -> DemResult:
    """Run rounds until the average client log-likelihood changes by less than ``tol``.

    The change is only observable once two consecutive broadcast models have
    been scored, so convergence takes at least two rounds. The returned model
    is the last one the clients scored; if ``max_rounds`` runs out first, the
    newest model is returned and the report carries the last observed score.
    ``rounds`` adds one for the upload made by the subset and federated
    k-means initialisations.
    """
    if init is None:
        params, ledger = dem_initialize(client_data, config)
    else:
        params, ledger = init, CommLedger()
    init_rounds = ledger.client_to_server_rounds
    n_total = sum(np.asarray(x).shape[0] for x in client_data)

    prev = None
    converged = False
    n_rounds = 0
    for _ in range(config.max_rounds):
        new, ll, round_ledger = dem_round(params, client_data, config.reg_floor)
        ledger = ledger + round_ledger
        n_rounds += 1
        if prev is not None and abs(ll - prev) < config.tol:
            converged = True
            prev = ll
            break
        prev = ll
        params = new
    report = FitReport(
        final_avg_loglik=prev,
        n_iters=n_rounds,
        bic=bic_from_loglik(params, n_total, prev),
        selected_k=config.k,
        converged=converged,
    )
    return DemResult(params, n_rounds + init_rounds, report, ledger)


def local_models_score(clients: Sequence[ClientModel], eval_data: np.ndarray) -> float:
    """Unweighted mean of each client model's fitness on ``eval_data``."""
    if not clients:
        raise InvalidInputError("need at least one client")
    return float(np.mean([fitness_gamma(c.params, eval_data) for c in clients]))


def benchmark_train(full_data: np.ndarray, config: FitConfig) -> tuple[GmmParams, FitReport]:
    """Non-federated reference: a plain fit on the union of all client data."""
    return train_gmm(full_data, config)
