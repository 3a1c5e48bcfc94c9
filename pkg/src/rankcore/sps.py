"""Streaming per-sample structure-perturbation scores over epoch snapshots.

The score of a sample is the mean squared Frobenius change of its structure
matrix across consecutive snapshots. Only the previous snapshot is retained
per sample, so memory stays O(samples x N^2) regardless of epoch count, and
the streaming result equals the batch computation over all snapshots.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = ["SpsAccumulator", "SpsRecord", "consistency_trace"]


@dataclass
class SpsRecord:
    """Finalized scores: sample_id -> mean squared snapshot-to-snapshot change."""

    scores: dict[str, float]
    epochs: int

    def __post_init__(self) -> None:
        for sid, score in self.scores.items():
            if not np.isfinite(score) or score < 0.0:
                raise ValueError(f"sample {sid!r}: score must be finite and >= 0")

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "sps", "epochs"])
            for sid in sorted(self.scores):
                writer.writerow([sid, f"{self.scores[sid]:.12g}", self.epochs])
        return path

    @classmethod
    def load_csv(cls, path: str | Path) -> "SpsRecord":
        scores: dict[str, float] = {}
        epochs = 0
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                scores[row["sample_id"]] = float(row["sps"])
                epochs = int(row["epochs"])
        if not scores:
            raise ValueError(f"{path}: empty score file")
        return cls(scores=scores, epochs=epochs)


class SpsAccumulator:
    """Accumulates squared Frobenius deltas between consecutive snapshots."""

    def __init__(self) -> None:
        self._prev: dict[str, np.ndarray] = {}
        self._sums: dict[str, float] = {}
        self.epochs_seen = 0

    def update(self, epoch_snapshots: Mapping[str, np.ndarray]) -> dict[str, float]:
        """Fold in one snapshot per sample; returns this epoch's per-sample deltas.

        The first snapshot initializes the accumulator with zero contribution.
        The sample-id set and matrix shapes must match earlier epochs.
        """
        if not epoch_snapshots:
            raise ValueError("empty snapshot map")
        deltas: dict[str, float] = {}
        if self.epochs_seen == 0:
            for sid, mat in epoch_snapshots.items():
                self._prev[sid] = np.array(mat, dtype=float, copy=True)
                self._sums[sid] = 0.0
                deltas[sid] = 0.0
        else:
            if set(epoch_snapshots) != set(self._prev):
                raise ValueError("snapshot sample-id set drifted from earlier epochs")
            for sid, mat in epoch_snapshots.items():
                mat = np.asarray(mat, dtype=float)
                if mat.shape != self._prev[sid].shape:
                    raise ValueError(f"sample {sid!r}: snapshot shape changed")
                delta = float(((mat - self._prev[sid]) ** 2).sum())
                self._sums[sid] += delta
                self._prev[sid] = mat.copy()
                deltas[sid] = delta
        self.epochs_seen += 1
        return deltas

    def finalize(self) -> SpsRecord:
        """Mean over observed transitions: running sum / (snapshots - 1)."""
        if self.epochs_seen < 2:
            raise ValueError(
                f"need at least 2 snapshots to finalize, saw {self.epochs_seen}"
            )
        transitions = self.epochs_seen - 1
        return SpsRecord(
            scores={sid: s / transitions for sid, s in self._sums.items()},
            epochs=self.epochs_seen,
        )


def consistency_trace(
    delta_stream: Iterable[float],
    checkpoints: Sequence[int],
) -> list[tuple[int, float]]:
    """Running means of a delta stream at the requested lengths.

    Consumes the stream up to max(checkpoints) values and reports the
    cumulative mean at each checkpoint, for convergence analysis of the
    per-transition mean estimator.
    """
    checkpoints = sorted(set(int(c) for c in checkpoints))
    if not checkpoints or checkpoints[0] < 1:
        raise ValueError("checkpoints must be positive integers")
    out: list[tuple[int, float]] = []
    total = 0.0
    count = 0
    targets = iter(checkpoints)
    target = next(targets)
    for value in delta_stream:
        total += float(value)
        count += 1
        if count == target:
            out.append((count, total / count))
            try:
                target = next(targets)
            except StopIteration:
                break
    if count == 0:
        raise ValueError("empty delta stream")
    if len(out) < len(checkpoints):
        raise ValueError(
            f"stream ended at {count} values, before checkpoint {target}"
        )
    return out
