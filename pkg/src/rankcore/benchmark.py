"""Operator discriminability scoring and ranking-consistency evaluation.

An operator's discriminability on a labeled sample set is the Spearman rank
correlation between pairwise connectivity-vector similarities and a
within-class indicator: positive when same-class pairs look more alike.
Rankings built on a subset are compared to the full-data ranking with nDCG@k
using linear gain rel = n - reference_rank (an exponential 2^rel - 1 variant
is available for small registries, where it cannot overflow).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .fcstore import FcStore
from .selection import CoreSet
from .spi import FcMatrix

__all__ = [
    "RankEntry",
    "Ranking",
    "ConsistencyReport",
    "spearman_rho",
    "discriminability",
    "rank_spis",
    "ndcg_at_k",
    "consistency_report",
]

TASKS = ("fingerprint", "diagnosis")


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of tie-averaged ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("rank correlation undefined for a constant input")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def _upper_vectors(fcs: Sequence[FcMatrix]) -> tuple[list[str], np.ndarray]:
    ids = [fc.sample_id for fc in fcs]
    n = fcs[0].values.shape[0]
    iu = np.triu_indices(n, k=1)
    return ids, np.stack([fc.values[iu] for fc in fcs])


def discriminability(
    fcs: Sequence[FcMatrix],
    class_of: Mapping[str, Any],
    pair_cap: int = 20000,
    seed: int = 0,
    similarity: str = "pearson",
) -> float:
    """Class separability of one operator's connectivity matrices, in [-1, 1].

    Pair similarity is the Pearson correlation (or cosine) of the two strict
    upper-triangle vectors; pairs are capped at ``pair_cap`` by a seeded
    uniform subsample. Pairs touching a zero-variance vector are dropped; more
    than half dropped is an error.
    """
    if similarity not in ("pearson", "cosine"):
        raise ValueError(f"unknown similarity kernel {similarity!r}")
    if len(fcs) < 3:
        raise ValueError("need at least 3 samples")
    order = np.argsort([fc.sample_id for fc in fcs], kind="stable")
    fcs = [fcs[i] for i in order]
    ids, vectors = _upper_vectors(fcs)
    labels = np.asarray([class_of[sid] for sid in ids])

    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes present")
    if counts.max() < 2:
        raise ValueError("need at least 2 samples in some class")

    if similarity == "pearson":
        vectors = vectors - vectors.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(vectors, axis=1)
    valid = norms > 0.0
    unit = np.where(valid[:, None], vectors / np.where(valid, norms, 1.0)[:, None], 0.0)

    i_idx, j_idx = np.triu_indices(len(ids), k=1)
    n_pairs = i_idx.size
    if n_pairs > pair_cap:
        rng = np.random.default_rng(seed)
        keep = rng.choice(n_pairs, size=pair_cap, replace=False)
        keep.sort()
        i_idx, j_idx = i_idx[keep], j_idx[keep]

    pair_valid = valid[i_idx] & valid[j_idx]
    dropped = int((~pair_valid).sum())
    if dropped > 0.5 * i_idx.size:
        raise ValueError(
            f"{dropped}/{i_idx.size} pairs dropped for zero-variance vectors"
        )
    i_idx, j_idx = i_idx[pair_valid], j_idx[pair_valid]

    sims = np.einsum("ij,ij->i", unit[i_idx], unit[j_idx])
    within = (labels[i_idx] == labels[j_idx]).astype(float)
    if within.all() or not within.any():
        raise ValueError("all pairs fall in one group (all within- or all between-class)")
    return spearman_rho(sims, within)


@dataclass(frozen=True)
class RankEntry:
    operator_name: str
    score: float
    rank: int


@dataclass(frozen=True)
class Ranking:
    """Operators in descending score order; ties broken lexicographically."""

    entries: tuple[RankEntry, ...]
    task: str
    dataset_id: str = ""
    sample_ids: tuple[str, ...] = ()
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        ranks = [e.rank for e in self.entries]
        if ranks != list(range(1, len(ranks) + 1)):
            raise ValueError("ranks must be 1..n in order")

    @property
    def operator_order(self) -> list[str]:
        return [e.operator_name for e in self.entries]

    @property
    def rank_of(self) -> dict[str, int]:
        return {e.operator_name: e.rank for e in self.entries}

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "task": self.task,
            "dataset_id": self.dataset_id,
            "sample_count": len(self.sample_ids),
            "sample_ids": list(self.sample_ids),
            "entries": [
                {"operator": e.operator_name, "score": e.score, "rank": e.rank}
                for e in self.entries
            ],
            "provenance": self.provenance,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "Ranking":
        payload = json.loads(Path(path).read_text())
        return cls(
            entries=tuple(
                RankEntry(e["operator"], float(e["score"]), int(e["rank"]))
                for e in payload["entries"]
            ),
            task=payload["task"],
            dataset_id=payload.get("dataset_id", ""),
            sample_ids=tuple(payload.get("sample_ids", ())),
            provenance=payload.get("provenance", {}),
        )


def _ranking_from_scores(scores: dict[str, float], task: str, dataset_id: str,
                         sample_ids: Sequence[str], provenance: dict[str, Any]) -> Ranking:
    ordered = sorted(scores, key=lambda name: (-scores[name], name))
    entries = tuple(
        RankEntry(operator_name=name, score=scores[name], rank=i + 1)
        for i, name in enumerate(ordered)
    )
    return Ranking(entries=entries, task=task, dataset_id=dataset_id,
                   sample_ids=tuple(sample_ids), provenance=provenance)


def rank_spis(
    store: FcStore,
    sample_ids: Sequence[str],
    task: str,
    pair_cap: int = 20000,
    seed: int = 0,
    dataset_id: str = "",
) -> Ranking:
    """Score every stored operator on the subset and rank them.

    Fingerprinting separates subjects; diagnosis separates class labels.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    sample_ids = sorted(sample_ids)
    meta = store.sample_meta
    missing_meta = [sid for sid in sample_ids if sid not in meta]
    if missing_meta:
        raise KeyError(f"store index lacks metadata for samples {missing_meta[:3]}")
    key = "subject_id" if task == "fingerprint" else "class_label"
    class_of = {sid: meta[sid][key] for sid in sample_ids}

    scores: dict[str, float] = {}
    for op_name in store.operators:
        fcs = []
        for sid in sample_ids:
            if not store.has(op_name, sid):
                raise FileNotFoundError(f"missing FC entry {op_name}/{sid}")
            fcs.append(store.load(op_name, sid))
        scores[op_name] = discriminability(fcs, class_of, pair_cap=pair_cap, seed=seed)
    provenance = {"pair_cap": pair_cap, "seed": seed, "task": task}
    return _ranking_from_scores(scores, task, dataset_id, sample_ids, provenance)


def ndcg_at_k(reference: Ranking, candidate: Ranking, k: int, gain: str = "linear") -> float:
    """Discounted-cumulative-gain agreement of the candidate's top k with the
    reference ordering, normalized to [0, 1]."""
    ref_ops = set(reference.operator_order)
    cand_ops = set(candidate.operator_order)
    if ref_ops != cand_ops:
        raise ValueError("reference and candidate rank different operator sets")
    n = len(reference.entries)
    if n < 2:
        raise ValueError("need at least 2 operators (a single-entry ranking has zero gain)")
    if not (1 <= k <= n):
        raise ValueError(f"k must lie in [1, {n}]")
    rank_ref = reference.rank_of

    def rel(op: str) -> float:
        linear = float(n - rank_ref[op])
        if gain == "linear":
            return linear
        if gain == "exponential":
            if n > 30:
                raise ValueError("exponential gain overflows for large registries")
            return float(2.0**linear - 1.0)
        raise ValueError(f"unknown gain {gain!r}")

    # plain left-to-right sums of rel/log2(i+1): matches a direct evaluation
    # of the formula bit for bit
    dcg = sum(
        rel(op) / math.log2(i + 2) for i, op in enumerate(candidate.operator_order[:k])
    )
    ideal = sorted((rel(op) for op in reference.operator_order), reverse=True)
    idcg = sum(r / math.log2(i + 2) for i, r in enumerate(ideal[:k]))
    return dcg / idcg


@dataclass
class ConsistencyReport:
    """Per (method, ratio, k) mean and population std of nDCG across runs."""

    task: str
    ks: tuple[int, ...]
    cells: dict[str, dict[str, dict[str, dict[str, Any]]]]  # method -> k -> ratio -> stats
    reference_id: str = ""
    std_convention: str = "population"
    gain: str = "linear"

    def as_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "ks": list(self.ks),
            "std_convention": self.std_convention,
            "ndcg_gain": self.gain,
            "reference": self.reference_id,
            "methods": self.cells,
        }


def consistency_report(
    full_rank: Ranking,
    method_runs: Sequence[tuple[CoreSet, Ranking]],
    ks: Sequence[int] = (5, 10, 20),
) -> ConsistencyReport:
    """Aggregate nDCG@k of core-set rankings against the full-data ranking.

    Runs are grouped by (method, ratio); each cell reports the mean, the
    population (divide-by-n) standard deviation, and the per-run values.
    """
    if not method_runs:
        raise ValueError("no runs supplied")
    ks = tuple(int(k) for k in ks)
    groups: dict[tuple[str, float | None], list[Ranking]] = {}
    for coreset, ranking in method_runs:
        if ranking.task != full_rank.task:
            raise ValueError("run task does not match reference task")
        groups.setdefault((coreset.method, coreset.ratio), []).append(ranking)

    cells: dict[str, dict[str, dict[str, dict[str, Any]]]] = {}
    for (method, ratio), rankings in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        ratio_key = "full" if ratio is None else f"{ratio:g}"
        for k in ks:
            values = [ndcg_at_k(full_rank, r, k) for r in rankings]
            stats = {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),  # population convention
                "values": [float(v) for v in values],
                "n_runs": len(values),
            }
            cells.setdefault(method, {}).setdefault(str(k), {})[ratio_key] = stats
    return ConsistencyReport(
        task=full_rank.task,
        ks=ks,
        cells=cells,
        reference_id=full_rank.dataset_id,
    )
