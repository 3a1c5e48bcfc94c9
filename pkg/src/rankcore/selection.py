"""Core-set construction: stability top-k, density-balanced sampling, and baselines.

The density-balanced selector keeps the stable fraction of samples (scores at
or below the (1-beta) empirical quantile), fits a Gaussian KDE to the
surviving scores, weights each sample inversely to its local density, and
draws without replacement with renormalization after every draw. Quantiles
use linear interpolation and the KDE bandwidth follows Silverman's rule,
floored to avoid degenerate spikes on near-constant scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .fcstore import FcStore
from .sps import SpsRecord

__all__ = [
    "CoreSet",
    "DensityEstimate",
    "silverman_bandwidth",
    "kde_density",
    "weighted_sample_without_replacement",
    "select_topk_sps",
    "select_density_balanced",
    "select_random",
    "select_kmeans",
]

_BANDWIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class CoreSet:
    """An ordered id subset plus the method and parameters that produced it."""

    sample_ids: tuple[str, ...]
    method: str
    ratio: float | None = None
    params: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("core-set contains duplicate sample ids")

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "method": self.method,
            "ratio": self.ratio,
            "params": self.params,
            "provenance": self.provenance,
            "sample_ids": list(self.sample_ids),
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "CoreSet":
        payload = json.loads(Path(path).read_text())
        return cls(
            sample_ids=tuple(payload["sample_ids"]),
            method=payload["method"],
            ratio=payload.get("ratio"),
            params=payload.get("params", {}),
            provenance=payload.get("provenance", {}),
        )


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), floored at 1e-6."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise ValueError("need at least 2 values for a bandwidth")
    sd = values.std(ddof=1)
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    return max(0.9 * spread * n ** (-0.2), _BANDWIDTH_FLOOR)


def kde_density(values: np.ndarray, bandwidth: float, query: float | np.ndarray) -> float | np.ndarray:
    """Gaussian kernel density: mean of N(query; v_i, h^2) over the source values.

    Evaluations are floored at the smallest positive double so the density is
    strictly positive even where every kernel underflows.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least 2 values for a density estimate")
    if bandwidth <= 0.0:
        raise ValueError("bandwidth must be positive")
    q = np.atleast_1d(np.asarray(query, dtype=float))
    z = (q[:, None] - values[None, :]) / bandwidth
    dens = np.exp(-0.5 * z**2).sum(axis=1) / (values.size * bandwidth * np.sqrt(2.0 * np.pi))
    dens = np.maximum(dens, np.finfo(float).tiny)
    return float(dens[0]) if np.isscalar(query) or np.ndim(query) == 0 else dens


@dataclass(frozen=True)
class DensityEstimate:
    """Gaussian KDE over a score sample with an inverse-density weight helper."""

    values: np.ndarray
    bandwidth: float
    eps_reg: float = 1e-8

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.bandwidth <= 0.0:
            raise ValueError("bandwidth must be positive")
        if self.eps_reg <= 0.0:
            raise ValueError("eps_reg must be positive")

    def density(self, query: float | np.ndarray) -> float | np.ndarray:
        return kde_density(self.values, self.bandwidth, query)

    def weight(self, query: float | np.ndarray) -> float | np.ndarray:
        return 1.0 / (np.asarray(self.density(query)) + self.eps_reg)


def weighted_sample_without_replacement(
    ids: Sequence[str],
    weights: np.ndarray,
    m: int,
    rng: np.random.Generator,
) -> list[str]:
    """Sequential draws proportional to weight, renormalizing after each draw."""
    ids = list(ids)
    weights = np.asarray(weights, dtype=float).copy()
    if len(ids) != weights.size:
        raise ValueError("ids and weights must have equal length")
    if m > len(ids):
        raise ValueError(f"cannot draw {m} items from a pool of {len(ids)}")
    if np.any(weights < 0.0) or weights.sum() <= 0.0:
        raise ValueError("weights must be non-negative with positive total")
    chosen: list[str] = []
    alive = np.ones(len(ids), dtype=bool)
    for _ in range(m):
        probs = np.where(alive, weights, 0.0)
        probs = probs / probs.sum()
        pick = int(rng.choice(len(ids), p=probs))
        chosen.append(ids[pick])
        alive[pick] = False
    return chosen


def _check_budget(m: int, pool: int, what: str) -> None:
    if m < 1:
        raise ValueError("core-set size must be >= 1")
    if m > pool:
        raise ValueError(f"requested {m} samples but {what} holds only {pool}")


def select_topk_sps(sps: SpsRecord, m: int, ratio: float | None = None) -> CoreSet:
    """The m most stable samples; ties broken lexicographically by sample id."""
    _check_budget(m, len(sps.scores), "score record")
    order = sorted(sps.scores, key=lambda sid: (sps.scores[sid], sid))
    return CoreSet(
        sample_ids=tuple(order[:m]),
        method="sclcs",
        ratio=ratio,
        params={"m": m},
        provenance={"sps_epochs": sps.epochs},
    )


def select_density_balanced(
    sps: SpsRecord,
    m: int,
    beta: float = 0.2,
    eps_reg: float = 1e-8,
    bandwidth_rule: str = "silverman",
    seed: int = 0,
    ratio: float | None = None,
) -> CoreSet:
    """Quantile-filter the unstable tail, then draw inversely to score density."""
    if not (0.0 <= beta < 1.0):
        raise ValueError("beta must lie in [0, 1)")
    if bandwidth_rule != "silverman":
        raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
    ids = sorted(sps.scores)
    scores = np.array([sps.scores[sid] for sid in ids])
    cutoff = float(np.quantile(scores, 1.0 - beta))  # linear-interpolation quantile
    keep = scores <= cutoff
    pool_ids = [sid for sid, k in zip(ids, keep) if k]
    pool_scores = scores[keep]
    if len(pool_ids) == 0:
        raise ValueError("stable pool is empty after quantile filtering")
    _check_budget(m, len(pool_ids), "stable pool")

    bandwidth = silverman_bandwidth(pool_scores)
    estimate = DensityEstimate(values=pool_scores, bandwidth=bandwidth, eps_reg=eps_reg)
    weights = np.asarray(estimate.weight(pool_scores))
    weights = weights / weights.sum()

    rng = np.random.default_rng(seed)
    chosen = weighted_sample_without_replacement(pool_ids, weights, m, rng)
    return CoreSet(
        sample_ids=tuple(chosen),
        method="sclcs-dense",
        ratio=ratio,
        params={
            "m": m,
            "beta": beta,
            "eps_reg": eps_reg,
            "bandwidth": bandwidth,
            "seed": seed,
        },
        provenance={"sps_epochs": sps.epochs, "pool_size": len(pool_ids), "cutoff": cutoff},
    )


def select_random(ids: Sequence[str], m: int, seed: int, ratio: float | None = None) -> CoreSet:
    """Uniform sampling without replacement, seeded."""
    pool = sorted(ids)
    _check_budget(m, len(pool), "id pool")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool), size=m, replace=False)
    return CoreSet(
        sample_ids=tuple(pool[i] for i in picked),
        method="random",
        ratio=ratio,
        params={"m": m, "seed": seed},
    )


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass is on already-chosen points; pick uniformly
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[c] = points[pick]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float,
           ) -> tuple[np.ndarray, np.ndarray, float]:
    k = centers.shape[0]
    inertia = np.inf
    assign = np.zeros(points.shape[0], dtype=int)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_inertia = float(d2[np.arange(points.shape[0]), assign].sum())
        for c in range(k):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                # reseed an empty cluster on the point farthest from its center
                worst = int(d2[np.arange(points.shape[0]), assign].argmax())
                centers[c] = points[worst]
        if inertia - new_inertia < tol * max(inertia, 1e-30):
            inertia = new_inertia
            break
        inertia = new_inertia
    return centers, assign, inertia


def select_kmeans(
    fc_store: FcStore,
    m: int,
    reference_op: str = "pearson",
    seed: int = 0,
    ratio: float | None = None,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> CoreSet:
    """Cluster flattened reference-connectivity vectors; keep the sample nearest
    each centroid, resolving duplicates by next-nearest."""
    if reference_op not in fc_store.operators:
        raise KeyError(f"reference operator {reference_op!r} not present in store")
    ids = sorted(fc_store.sample_ids(reference_op))
    _check_budget(m, len(ids), "FC store")
    mats = [fc_store.load(reference_op, sid).values for sid in ids]
    n = mats[0].shape[0]
    iu = np.triu_indices(n, k=1)
    points = np.stack([mat[iu] for mat in mats])
    if len(np.unique(points, axis=0)) < m:
        raise ValueError(f"only {len(np.unique(points, axis=0))} distinct points for k={m}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, m, rng)
    centers, _, _ = _lloyd(points, centers, max_iter, tol)

    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    chosen: list[str] = []
    used: set[int] = set()
    for c in range(m):
        for idx in np.argsort(d2[:, c], kind="stable"):
            if int(idx) not in used:
                used.add(int(idx))
                chosen.append(ids[int(idx)])
                break
    return CoreSet(
        sample_ids=tuple(chosen),
        method="kmeans",
        ratio=ratio,
        params={"m": m, "reference_op": reference_op, "seed": seed,
                "max_iter": max_iter, "tol": tol},
    )
