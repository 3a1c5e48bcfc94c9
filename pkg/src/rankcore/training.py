"""Identity-supervised contrastive training with per-epoch structure snapshots.

Positive pairs are ordered pairs of segments from the same subject within a
batch; the anchor's negatives are all batch members from other subjects.
Batches are subject-stratified so positives always exist, and the batch plan
is built once per run from the seed, so a frozen-parameter run (lr = 0)
produces a constant loss trace.

After each epoch (at the snapshot cadence) an evaluation pass feeds every
sample's fused structure matrix to the stability accumulator; the snapshot
pass never mutates parameters or optimizer state.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder
from .dataset import Dataset
from .encoder import EncoderParams, param_tensors
from .sps import SpsAccumulator, SpsRecord

__all__ = [
    "TrainConfig",
    "AdamState",
    "TraceRow",
    "TrainTrace",
    "contrastive_loss",
    "adam_step",
    "snapshot_structures",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    temperature: float = 0.2
    include_positive_in_denominator: bool = True
    snapshot_every: int = 1
    n_heads: int = 4
    head_dim: int = 32
    value_dim: int = 32
    out_dim: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 2:
            raise ValueError("epochs must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 3:
            raise ValueError("batch_size must be >= 3")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")


@dataclass
class AdamState:
    """First/second-moment accumulators per parameter tensor plus step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: EncoderParams) -> "AdamState":
        tensors = param_tensors(params)
        return cls(
            m={name: np.zeros_like(arr) for name, arr in tensors.items()},
            v={name: np.zeros_like(arr) for name, arr in tensors.items()},
        )


def adam_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[EncoderParams, AdamState]:
    """Standard bias-corrected Adam update; tensors are updated in place."""
    tensors = param_tensors(params)
    if set(grads) != set(tensors):
        raise ValueError(f"gradient keys {sorted(grads)} do not match parameters")
    for name, g in grads.items():
        if g.shape != tensors[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g**2
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def contrastive_loss(
    embeddings: np.ndarray | Sequence[np.ndarray],
    subject_ids: Sequence[str],
    temperature: float,
    include_positive: bool = True,
) -> tuple[float, np.ndarray]:
    """Cosine-similarity contrastive loss over ordered same-subject pairs.

    For each ordered positive pair (i, j) the denominator sums the
    exponentiated similarities of anchor i to all cross-subject batch members,
    plus the positive's own term when ``include_positive``. Returns the mean
    loss and its exact gradient with respect to each embedding.
    """
    z = np.asarray(embeddings, dtype=float)
    if z.ndim != 2:
        raise ValueError("embeddings must be a (batch, dim) array")
    n = z.shape[0]
    if len(subject_ids) != n:
        raise ValueError("subject_ids length must match batch size")
    subjects = np.asarray(subject_ids)

    same = subjects[:, None] == subjects[None, :]
    positives = [(i, j) for i in range(n) for j in range(n) if i != j and same[i, j]]
    if not positives:
        raise ValueError("batch contains no positive pair (no two segments share a subject)")
    if same.all():
        raise ValueError("batch has a single subject: no negatives available")

    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    u = z / norms[:, None]
    sims = u @ u.T

    tau = float(temperature)
    d_sims = np.zeros((n, n))
    loss = 0.0
    n_pairs = len(positives)
    for i, j in positives:
        idx = np.flatnonzero(~same[i])
        if include_positive:
            idx = np.append(idx, j)
        logits = sims[i, idx] / tau
        peak = logits.max()
        exps = np.exp(logits - peak)
        denom = exps.sum()
        loss += -sims[i, j] / tau + peak + np.log(denom)
        soft = exps / denom
        d_sims[i, j] += -1.0 / (tau * n_pairs)
        np.add.at(d_sims[i], idx, soft / (tau * n_pairs))
    loss /= n_pairs

    d_u = (d_sims + d_sims.T) @ u
    # cosine normalization: project out the radial component per embedding
    d_z = (d_u - (d_u * u).sum(axis=1, keepdims=True) * u) / norms[:, None]
    return float(loss), d_z


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    loss: float
    mean_perturbation: float  # NaN on epochs without a snapshot


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "mean_perturbation"])
            for r in self.rows:
                writer.writerow([r.epoch, f"{r.loss:.12g}", f"{r.mean_perturbation:.12g}"])
        return path


def snapshot_structures(params: EncoderParams, d: Dataset) -> dict[str, np.ndarray]:
    """Evaluation-mode forward over the full dataset; returns fused matrices."""
    return {
        s.sample_id: encoder.forward(params, s, keep_cache=False).fused
        for s in d.samples
    }


def _build_batch_plan(d: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> list[list[str]]:
    """Subject-stratified batches: two segments from each of ~batch_size/2 subjects."""
    segments: dict[str, list[str]] = {}
    for s in d.samples:
        segments.setdefault(s.subject_id, []).append(s.sample_id)
    eligible = sorted(subj for subj, sids in segments.items() if len(sids) >= 2)
    if len(eligible) < 2:
        raise ValueError("training needs at least 2 subjects with at least 2 segments each")

    order = [eligible[i] for i in rng.permutation(len(eligible))]
    per_batch = max(2, cfg.batch_size // 2)
    groups = [order[i : i + per_batch] for i in range(0, len(order), per_batch)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        groups[-2].extend(groups.pop())

    plan = []
    for group in groups:
        batch: list[str] = []
        for subj in group:
            sids = segments[subj]
            picked = rng.choice(len(sids), size=2, replace=False)
            batch.extend(sids[p] for p in picked)
        plan.append(batch)
    return plan


def train(d: Dataset, cfg: TrainConfig) -> tuple[EncoderParams, SpsRecord, TrainTrace]:
    """Full training loop: contrastive updates plus per-epoch structure snapshots.

    Returns the final parameters, the finalized per-sample stability record,
    and a per-epoch trace of loss and mean structure perturbation.
    """
    rng = np.random.default_rng(cfg.seed)
    plan = _build_batch_plan(d, cfg, rng)
    by_id = {s.sample_id: s for s in d.samples}
    subject_of = {s.sample_id: s.subject_id for s in d.samples}

    params = encoder.init_params(
        n_features=d.samples[0].n_timepoints,
        n_heads=cfg.n_heads,
        head_dim=cfg.head_dim,
        value_dim=cfg.value_dim,
        out_dim=cfg.out_dim,
        seed=cfg.seed,
    )
    state = AdamState.for_params(params)
    acc = SpsAccumulator()
    acc.update(snapshot_structures(params, d))  # initialization snapshot

    trace = TrainTrace()
    for epoch in range(1, cfg.epochs + 1):
        batch_losses = []
        for batch_ids in plan:
            outs = [encoder.forward(params, by_id[sid]) for sid in batch_ids]
            embeddings = np.stack([o.pooled for o in outs])
            subjects = [subject_of[sid] for sid in batch_ids]
            try:
                loss, d_z = contrastive_loss(
                    embeddings, subjects, cfg.temperature, cfg.include_positive_in_denominator
                )
            except ValueError as exc:
                raise ValueError(f"epoch {epoch}: {exc}") from exc
            grads = {name: np.zeros_like(arr) for name, arr in param_tensors(params).items()}
            for out, g_z in zip(outs, d_z):
                for name, g in encoder.backward(out, grad_pooled=g_z).items():
                    grads[name] += g
            try:
                adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            except ValueError as exc:
                raise ValueError(f"epoch {epoch} aborted: {exc}") from exc
            batch_losses.append(loss)

        mean_delta = float("nan")
        if epoch % cfg.snapshot_every == 0:
            deltas = acc.update(snapshot_structures(params, d))
            mean_delta = float(np.mean(list(deltas.values())))
        trace.rows.append(TraceRow(epoch=epoch, loss=float(np.mean(batch_losses)),
                                   mean_perturbation=mean_delta))

    return params, acc.finalize(), trace
