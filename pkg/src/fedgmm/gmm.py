"""Gaussian mixture primitives: densities, EM fitting, k-means seeding, BIC and sampling.

All randomness is driven by explicit integer seeds; nothing here keeps
module-level state, so fits on disjoint inputs can run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)
EMPTY_COMPONENT_MASS = 1e-12
_CHUNK = 8192


class InvalidInputError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class CovarianceType(str, Enum):
    DIAGONAL = "diag"
    FULL = "full"


@dataclass(frozen=True)
class GmmParams:
    """Weights ``(K,)``, means ``(K, d)`` and covariances of a K-component mixture.

    Diagonal covariances are stored as ``(K, d)`` variances, full ones as
    ``(K, d, d)`` matrices.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cov_type: CovarianceType = CovarianceType.DIAGONAL

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        ct = CovarianceType(self.cov_type)
        k, d = mu.shape
        if w.shape != (k,) or k < 1 or d < 1:
            raise InvalidInputError(f"weights shape {w.shape} does not match means shape {mu.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError("weights must be non-negative and sum to 1")
        expected = (k, d) if ct is CovarianceType.DIAGONAL else (k, d, d)
        if cov.shape != expected:
            raise InvalidInputError(f"covariances shape {cov.shape}, expected {expected}")
        diag = cov if ct is CovarianceType.DIAGONAL else np.diagonal(cov, axis1=1, axis2=2)
        if not np.all(diag > 0):
            raise InvalidInputError("covariance diagonals must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "cov_type", ct)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def n_parameters(self) -> int:
        """Free parameter count used by the BIC penalty."""
        k, d = self.means.shape
        cov = k * d if self.cov_type is CovarianceType.DIAGONAL else k * d * (d + 1) // 2
        return (k - 1) + k * d + cov

    def n_floats(self) -> int:
        """Scalars needed to ship the model (weights, means, stored covariances)."""
        return self.weights.size + self.means.size + self.covariances.size

    def variances(self) -> np.ndarray:
        """Per-component diagonal variances, ``(K, d)``."""
        if self.cov_type is CovarianceType.DIAGONAL:
            return self.covariances
        return np.diagonal(self.covariances, axis1=1, axis2=2).copy()


@dataclass(frozen=True)
class FitConfig:
    k_min: int = 1
    k_max: int = 1
    cov_type: CovarianceType = CovarianceType.DIAGONAL
    tol: float = 1e-3
    max_iters: int = 100
    reg_floor: float = 1e-6
    n_init: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cov_type", CovarianceType(self.cov_type))
        if not 1 <= self.k_min <= self.k_max:
            raise InvalidInputError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.tol <= 0 or self.max_iters < 1 or self.reg_floor <= 0 or self.n_init < 1:
            raise InvalidInputError("tol, reg_floor must be > 0; max_iters, n_init must be >= 1")

    def with_k(self, k: int) -> "FitConfig":
        return replace(self, k_min=k, k_max=k)


@dataclass(frozen=True)
class FitReport:
    final_avg_loglik: float
    n_iters: int
    bic: float
    selected_k: int
    converged: bool
    # average log-likelihood of the initial params followed by one entry per iteration
    loglik_trace: tuple = field(default=(), repr=False)


def _check_data(model: GmmParams, data: np.ndarray) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise InvalidInputError(f"data shape {x.shape} incompatible with model dimension {model.dim}")
    return x


def component_log_densities(model: GmmParams, data: np.ndarray) -> np.ndarray:
    """``log N(x_i | mu_k, Sigma_k)`` for every row and component, shape ``(n, K)``."""
    x = _check_data(model, data)
    n, d = x.shape
    out = np.empty((n, model.n_components))
    if model.cov_type is CovarianceType.DIAGONAL:
        var = model.covariances
        const = -0.5 * (d * LOG_2PI + np.log(var).sum(axis=1))
        inv = 1.0 / var
        for start in range(0, n, _CHUNK):
            diff = x[start:start + _CHUNK, None, :] - model.means[None, :, :]
            out[start:start + _CHUNK] = const - 0.5 * np.einsum("nkd,kd->nk", diff * diff, inv)
    else:
        for k in range(model.n_components):
            chol = cholesky(model.covariances[k], lower=True)
            z = solve_triangular(chol, (x - model.means[k]).T, lower=True)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, k] = -0.5 * (d * LOG_2PI + logdet + (z * z).sum(axis=0))
    return out


def _weighted_log_densities(model: GmmParams, data: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return component_log_densities(model, data) + np.log(model.weights)


def log_pdf(model: GmmParams, x: np.ndarray):
    """Mixture log-density at a point (``d``-vector -> float) or rows (``(n, d)`` -> ``(n,)``)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != model.dim:
            raise InvalidInputError(f"point of dimension {arr.shape[0]}, model dimension {model.dim}")
        return float(logsumexp(_weighted_log_densities(model, arr[None, :]), axis=1)[0])
    return logsumexp(_weighted_log_densities(model, arr), axis=1)


def e_step(model: GmmParams, data: np.ndarray, return_point_loglik: bool = False):
    """Responsibilities ``(n, K)`` and the average log-likelihood of ``data``.

    With ``return_point_loglik`` the per-row log-likelihoods are returned as a
    third element.
    """
    weighted = _weighted_log_densities(model, data)
    point_ll = logsumexp(weighted, axis=1)
    resp = np.exp(weighted - point_ll[:, None])
    # renormalise away the rounding left by exp
    resp /= resp.sum(axis=1, keepdims=True)
    avg = float(point_ll.mean())
    if return_point_loglik:
        return resp, avg, point_ll
    return resp, avg


def _data_scatter(x: np.ndarray, cov_type: CovarianceType, reg_floor: float) -> np.ndarray:
    centered = x - x.mean(axis=0)
    if cov_type is CovarianceType.DIAGONAL:
        return np.maximum((centered**2).mean(axis=0), reg_floor)
    cov = centered.T @ centered / x.shape[0]
    return _floor_full(cov, reg_floor)


def _floor_full(cov: np.ndarray, reg_floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    idx = np.diag_indices_from(cov)
    cov[idx] = np.maximum(cov[idx], 0.0) + reg_floor
    return cov


def m_step(
    data: np.ndarray,
    resp: np.ndarray,
    cov_type: CovarianceType = CovarianceType.DIAGONAL,
    reg_floor: float = 1e-6,
    point_loglik: Optional[np.ndarray] = None,
) -> GmmParams:
    """Re-estimate mixture parameters from responsibilities.

    Diagonal variances are clamped at ``reg_floor``; full covariances get
    ``reg_floor`` added to the diagonal. A component whose responsibility mass
    is below ``EMPTY_COMPONENT_MASS`` is re-seeded at the worst-explained row
    (lowest ``point_loglik``; if not given, the lowest likelihood under the
    surviving components) with weight ``1/n`` and the overall data covariance.
    """
    x = np.asarray(data, dtype=float)
    r = np.asarray(resp, dtype=float)
    cov_type = CovarianceType(cov_type)
    n, d = x.shape
    k = r.shape[1]
    nk = r.sum(axis=0)
    live = nk >= EMPTY_COMPONENT_MASS
    if not live.any():
        raise InvalidInputError("all components are empty")

    safe_nk = np.where(live, nk, 1.0)
    means = (r.T @ x) / safe_nk[:, None]
    if cov_type is CovarianceType.DIAGONAL:
        covs = np.empty((k, d))
        for j in range(k):
            diff = x - means[j]
            covs[j] = np.maximum((r[:, j] @ (diff * diff)) / safe_nk[j], reg_floor)
    else:
        covs = np.empty((k, d, d))
        for j in range(k):
            diff = x - means[j]
            covs[j] = _floor_full((diff * r[:, j, None]).T @ diff / safe_nk[j], reg_floor)
    weights = nk / n

    if not live.all():
        dead = np.flatnonzero(~live)
        if point_loglik is None:
            partial = GmmParams(weights[live] / weights[live].sum(), means[live], covs[live], cov_type)
            point_loglik = log_pdf(partial, x)
        order = np.argsort(point_loglik, kind="stable")
        scatter = _data_scatter(x, cov_type, reg_floor)
        for i, j in enumerate(dead):
            means[j] = x[order[i % n]]
            covs[j] = scatter
            weights[j] = 1.0 / n
    weights = weights / weights.sum()
    return GmmParams(weights, means, covs, cov_type)


def kmeans_plusplus(
    data: np.ndarray, k: int, rng: np.random.Generator, sample_weight: Optional[np.ndarray] = None
) -> np.ndarray:
    """k-means++ seeding: first center by weight, later ones with probability ∝ w·D²."""
    x = np.asarray(data, dtype=float)
    n = x.shape[0]
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    centers = np.empty((k, x.shape[1]))
    first = rng.choice(n, p=w / w.sum())
    centers[0] = x[first]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        mass = w * closest
        total = mass.sum()
        # every remaining point coincides with a chosen center
        idx = rng.choice(n, p=w / w.sum()) if total <= 0 else rng.choice(n, p=mass / total)
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(
    data: np.ndarray,
    k: int,
    seed: int,
    sample_weight: Optional[np.ndarray] = None,
    max_iter: int = 10,
):
    """Weighted Lloyd iterations from k-means++ seeds.

    Returns ``(centers, labels, cluster_weights)``. Clusters that lose all
    their points keep their previous center.
    """
    x = np.asarray(data, dtype=float)
    if x.shape[0] < k:
        raise InvalidInputError(f"k-means needs at least {k} points, got {x.shape[0]}")
    w = np.ones(x.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(x, k, rng, w)
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    for _ in range(max_iter):
        mass = np.bincount(labels, weights=w, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x * w[:, None])
        filled = mass > 0
        new_centers = centers.copy()
        new_centers[filled] = sums[filled] / mass[filled, None]
        new_labels = np.argmin(_sq_dists(x, new_centers), axis=1)
        moved = not np.array_equal(new_centers, centers)
        centers = new_centers
        if not moved and np.array_equal(new_labels, labels):
            break
        labels = new_labels
    mass = np.bincount(labels, weights=w, minlength=k)
    return centers, labels, mass


def kmeans_init(data: np.ndarray, k: int, cov_type: CovarianceType, reg_floor: float, seed: int) -> GmmParams:
    """Initial mixture: k-means (10 Lloyd iterations) then one M-step on hard labels."""
    x = np.asarray(data, dtype=float)
    _, labels, _ = kmeans(x, k, seed, max_iter=10)
    resp = np.zeros((x.shape[0], k))
    resp[np.arange(x.shape[0]), labels] = 1.0
    return m_step(x, resp, cov_type, reg_floor)


def _run_em(x: np.ndarray, init: GmmParams, config: FitConfig):
    params = init
    resp, ll, point_ll = e_step(params, x, return_point_loglik=True)
    trace = [ll]
    converged = False
    n_iters = 0
    for _ in range(config.max_iters):
        params = m_step(x, resp, config.cov_type, config.reg_floor, point_ll)
        resp, new_ll, point_ll = e_step(params, x, return_point_loglik=True)
        n_iters += 1
        trace.append(new_ll)
        gain = new_ll - ll
        ll = new_ll
        if gain < config.tol:
            converged = True
            break
    return params, ll, n_iters, converged, tuple(trace)


def fit_em(
    data: np.ndarray, k: int, config: FitConfig = FitConfig(), init: Optional[GmmParams] = None
) -> tuple[GmmParams, FitReport]:
    """Fit a k-component mixture by EM, keeping the best of ``config.n_init`` restarts.

    Stops once the per-point average log-likelihood improves by less than
    ``config.tol`` or after ``config.max_iters`` iterations. ``init`` replaces
    k-means seeding (and forces a single run).
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise InvalidInputError("data must be a finite 2-D array")
    if k < 1 or x.shape[0] < k:
        raise InvalidInputError(f"cannot fit {k} components to {x.shape[0]} rows")

    if init is not None:
        starts = [init]
    else:
        seeds = np.random.SeedSequence(config.seed).generate_state(config.n_init, dtype=np.uint32)
        starts = [kmeans_init(x, k, config.cov_type, config.reg_floor, int(s)) for s in seeds]

    best = None
    for start in starts:
        result = _run_em(x, start, config)
        if best is None or result[1] > best[1]:
            best = result
    params, ll, n_iters, converged, trace = best
    report = FitReport(
        final_avg_loglik=ll,
        n_iters=n_iters,
        bic=bic_from_loglik(params, x.shape[0], ll),
        selected_k=k,
        converged=converged,
        loglik_trace=trace,
    )
    return params, report


def bic_from_loglik(model: GmmParams, n: int, avg_loglik: float) -> float:
    return model.n_parameters() * math.log(n) - 2.0 * n * avg_loglik


def bic(model: GmmParams, data: np.ndarray) -> float:
    """``p ln n - 2 n avg_loglik``."""
    x = _check_data(model, data)
    if x.shape[0] < 1:
        raise InvalidInputError("bic needs at least one row")
    return bic_from_loglik(model, x.shape[0], float(np.mean(log_pdf(model, x))))


def train_gmm(data: np.ndarray, config: FitConfig = FitConfig()) -> tuple[GmmParams, FitReport]:
    """Sweep k over ``[k_min, k_max]`` and keep the fit with the lowest BIC.

    Values of k exceeding the row count are skipped; near-ties (within 1e-12)
    go to the smaller k.
    """
    x = np.asarray(data, dtype=float)
    best = None
    for k in range(config.k_min, config.k_max + 1):
        if k > x.shape[0]:
            continue
        params, report = fit_em(x, k, config)
        if best is None or report.bic < best[1].bic - 1e-12:
            best = (params, report)
    if best is None:
        raise InvalidInputError(f"no k in [{config.k_min}, {config.k_max}] fits {x.shape[0]} rows")
    return best


def sample(model: GmmParams, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` rows: component index from the weights, then a Gaussian draw."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comps = rng.choice(model.n_components, size=n, p=model.weights)
    z = rng.standard_normal((n, model.dim))
    if model.cov_type is CovarianceType.DIAGONAL:
        return model.means[comps] + z * np.sqrt(model.covariances[comps])
    out = np.empty((n, model.dim))
    for k in range(model.n_components):
        rows = comps == k
        if rows.any():
            chol = cholesky(model.covariances[k], lower=True)
            out[rows] = model.means[k] + z[rows] @ chol.T
    return out
