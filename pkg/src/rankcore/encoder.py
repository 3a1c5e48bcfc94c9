"""Adaptive multi-head attention encoder with exact analytic gradients.

Regions are the tokens and the T time points are their features. Each head
projects queries and keys, takes a scaled row-wise softmax, and the per-head
attention matrices are fused by a learned convex combination (softmax of the
fusion logits). Node embeddings come from applying the fused matrix to value
embeddings and projecting; the pooled embedding is the node mean.

One attention stage only: no feed-forward sublayer, layer norm, or positional
encoding, so the fused matrix stays a row-stochastic convex fusion of
per-head softmax maps.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import Dataset, TimeSeriesSample

__all__ = [
    "EncoderParams",
    "EncoderOutput",
    "init_params",
    "param_tensors",
    "clone_params",
    "softmax_rows",
    "fuse_heads",
    "forward",
    "backward",
    "save_params",
    "load_params",
    "FitConfig",
    "FitReport",
    "normalize_target_rows",
    "fit_to_target",
    "fit_to_raw_targets",
]

_MAGIC = b"RCEN1"

# declaration order of the parameter tensors; checkpoints and Adam state
# follow this ordering
_TENSOR_ORDER = ("w_q", "w_k", "fusion_logits", "w_v", "w_o")


@dataclass
class EncoderParams:
    w_q: np.ndarray  # (H, T, d)
    w_k: np.ndarray  # (H, T, d)
    fusion_logits: np.ndarray  # (H,)
    w_v: np.ndarray  # (T, d_v)
    w_o: np.ndarray  # (d_v, d_out)

    def __post_init__(self) -> None:
        for name in _TENSOR_ORDER:
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter tensor {name!r} has non-finite entries")
            setattr(self, name, arr)
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k must share shape (H, T, d)")
        if self.fusion_logits.shape != (self.w_q.shape[0],):
            raise ValueError("fusion_logits must have one entry per head")

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def n_features(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]

    @property
    def value_dim(self) -> int:
        return self.w_v.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_o.shape[1]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)

    @property
    def fusion_weights(self) -> np.ndarray:
        return _softmax_vec(self.fusion_logits)


def param_tensors(p: EncoderParams) -> dict[str, np.ndarray]:
    """Live views of the trainable tensors in declaration order."""
    return {name: getattr(p, name) for name in _TENSOR_ORDER}


def clone_params(p: EncoderParams) -> EncoderParams:
    return EncoderParams(**{name: getattr(p, name).copy() for name in _TENSOR_ORDER})


def init_params(
    n_features: int,
    n_heads: int = 4,
    head_dim: int = 32,
    value_dim: int = 32,
    out_dim: int = 32,
    seed: int = 0,
) -> EncoderParams:
    """Uniform(-b, b) init with b = sqrt(6/(fan_in + fan_out)); zero fusion logits."""
    for label, dim in (("n_features", n_features), ("n_heads", n_heads),
                       ("head_dim", head_dim), ("value_dim", value_dim), ("out_dim", out_dim)):
        if dim < 1:
            raise ValueError(f"{label} must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)

    def uniform(shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
        b = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-b, b, size=shape)

    return EncoderParams(
        w_q=uniform((n_heads, n_features, head_dim), n_features, head_dim),
        w_k=uniform((n_heads, n_features, head_dim), n_features, head_dim),
        fusion_logits=np.zeros(n_heads),
        w_v=uniform((n_features, value_dim), n_features, value_dim),
        w_o=uniform((value_dim, out_dim), value_dim, out_dim),
    )


def _softmax_vec(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with row-max subtraction for stability."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_heads(per_head: np.ndarray, fusion_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of per-head matrices with softmax(fusion_logits) weights."""
    alpha = _softmax_vec(np.asarray(fusion_logits, dtype=float))
    fused = np.einsum("h,hij->ij", alpha, per_head)
    return fused, alpha


@dataclass
class EncoderOutput:
    fused: np.ndarray  # (N, N) row-stochastic
    per_head: np.ndarray  # (H, N, N)
    node_embeddings: np.ndarray  # (N, d_out)
    pooled: np.ndarray  # (d_out,)
    cache: dict[str, Any] | None = field(default=None, repr=False)


def forward(params: EncoderParams, x: TimeSeriesSample | np.ndarray,
            keep_cache: bool = True) -> EncoderOutput:
    """Run the attention stage on one sample.

    The fused matrix and every per-head matrix are row-stochastic by
    construction. The cache retains the intermediates needed by
    :func:`backward`.
    """
    data = x.data if isinstance(x, TimeSeriesSample) else np.asarray(x, dtype=float)
    if data.ndim != 2:
        raise ValueError("input must be an N x T matrix")
    if data.shape[1] != params.n_features:
        raise ValueError(
            f"input has {data.shape[1]} time points but params expect {params.n_features}"
        )
    q = np.einsum("nt,htd->hnd", data, params.w_q)
    k = np.einsum("nt,htd->hnd", data, params.w_k)
    scores = np.einsum("hnd,hmd->hnm", q, k) * params.scale
    per_head = softmax_rows(scores)
    fused, alpha = fuse_heads(per_head, params.fusion_logits)
    values = data @ params.w_v
    mixed = fused @ values
    node_embeddings = mixed @ params.w_o
    pooled = node_embeddings.mean(axis=0)
    cache = None
    if keep_cache:
        cache = {
            "x": data,
            "q": q,
            "k": k,
            "per_head": per_head,
            "alpha": alpha,
            "values": values,
            "mixed": mixed,
            "fused": fused,
            "params": params,
        }
    return EncoderOutput(fused=fused, per_head=per_head, node_embeddings=node_embeddings,
                         pooled=pooled, cache=cache)


def backward(
    out: EncoderOutput,
    grad_pooled: np.ndarray | None = None,
    grad_fused: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradients of the forward map for loss terms on the pooled
    embedding and/or the fused matrix (contributions are summed).
    """
    if out.cache is None:
        raise ValueError("forward cache missing or stale; rerun forward with keep_cache=True")
    cache = out.cache
    params: EncoderParams = cache["params"]
    x = cache["x"]
    n = x.shape[0]

    grads = {name: np.zeros_like(arr) for name, arr in param_tensors(params).items()}

    d_fused = np.zeros((n, n))
    if grad_fused is not None:
        grad_fused = np.asarray(grad_fused, dtype=float)
        if grad_fused.shape != (n, n):
            raise ValueError(f"grad_fused must have shape {(n, n)}")
        d_fused = d_fused + grad_fused

    if grad_pooled is not None:
        grad_pooled = np.asarray(grad_pooled, dtype=float)
        if grad_pooled.shape != (params.out_dim,):
            raise ValueError(f"grad_pooled must have shape {(params.out_dim,)}")
        d_nodes = np.tile(grad_pooled / n, (n, 1))
        grads["w_o"] += cache["mixed"].T @ d_nodes
        d_mixed = d_nodes @ params.w_o.T
        d_fused = d_fused + d_mixed @ cache["values"].T
        d_values = cache["fused"].T @ d_mixed
        grads["w_v"] += x.T @ d_values

    alpha = cache["alpha"]
    per_head = cache["per_head"]
    d_alpha = np.einsum("hij,ij->h", per_head, d_fused)
    grads["fusion_logits"] += alpha * (d_alpha - float(alpha @ d_alpha))

    for h in range(params.n_heads):
        d_head = alpha[h] * d_fused
        a = per_head[h]
        d_scores = a * (d_head - (d_head * a).sum(axis=1, keepdims=True))
        d_q = d_scores @ cache["k"][h] * params.scale
        d_k = d_scores.T @ cache["q"][h] * params.scale
        grads["w_q"][h] += x.T @ d_q
        grads["w_k"][h] += x.T @ d_k
    return grads


# ---------------------------------------------------------------------------
# checkpoint I/O: magic "RCEN1", little-endian uint32 header (H, T, d, d_v,
# d_out), then row-major float64 tensors in declaration order

def save_params(params: EncoderParams, path: str | Path) -> Path:
    path = Path(path)
    header = struct.pack(
        "<5I",
        params.n_heads,
        params.n_features,
        params.head_dim,
        params.value_dim,
        params.out_dim,
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header)
        for name in _TENSOR_ORDER:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    return path


def load_params(path: str | Path) -> EncoderParams:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: bad magic, not an encoder checkpoint")
    h, t, d, d_v, d_out = struct.unpack_from("<5I", raw, len(_MAGIC))
    offset = len(_MAGIC) + struct.calcsize("<5I")
    shapes = {
        "w_q": (h, t, d),
        "w_k": (h, t, d),
        "fusion_logits": (h,),
        "w_v": (t, d_v),
        "w_o": (d_v, d_out),
    }
    tensors = {}
    for name in _TENSOR_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return EncoderParams(**tensors)


# ---------------------------------------------------------------------------
# fitting the fused matrix to a target operator

@dataclass(frozen=True)
class FitConfig:
    max_epochs: int = 200
    lr: float = 1e-3
    patience: int = 10
    min_delta: float = 1e-12  # validation improvement below this counts as flat
    n_heads: int = 4
    head_dim: int = 32
    value_dim: int = 32
    out_dim: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")


@dataclass
class FitReport:
    operator: str
    train_mse_start: float
    train_mse_end: float
    test_mse: float
    raw_train_mse_end: float
    raw_test_mse: float
    epochs_run: int
    stopped_early: bool

    def as_dict(self) -> dict[str, Any]:
        return {
            "operator": self.operator,
            "train_mse_start": self.train_mse_start,
            "train_mse_end": self.train_mse_end,
            "test_mse": self.test_mse,
            "raw_train_mse_end": self.raw_train_mse_end,
            "raw_test_mse": self.raw_test_mse,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
        }


def normalize_target_rows(target: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map each row into the probability simplex by min-shift and sum-normalization.

    Returns the normalized matrix plus the per-row shift and scale needed to
    map a row-stochastic prediction back to the target's raw range. Rows that
    collapse to zero after the shift become uniform.
    """
    target = np.asarray(target, dtype=float)
    n = target.shape[0]
    shift = target.min(axis=1)
    shifted = target - shift[:, None]
    scale = shifted.sum(axis=1)
    normalized = np.empty_like(shifted)
    degenerate = scale <= 0.0
    safe = np.where(degenerate, 1.0, scale)
    normalized = shifted / safe[:, None]
    normalized[degenerate] = 1.0 / n
    scale = np.where(degenerate, 0.0, scale)
    return normalized, shift, scale


def _sym(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


def _sym_mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = _sym(a) - _sym(b)
    return float((diff**2).mean())


def _split_by_subject(d: Dataset, seed: int) -> tuple[list[str], list[str], list[str]]:
    subjects = sorted(d.subjects)
    if len(subjects) < 3:
        raise ValueError("need at least 3 subjects for a train/val/test split")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(order)
    n_train = max(1, int(round(0.7 * n)))
    n_val = max(1, int(round(0.1 * n)))
    if n_train + n_val >= n:
        n_train = n - n_val - 1
    train = set(order[:n_train])
    val = set(order[n_train : n_train + n_val])
    ids = lambda group: [s.sample_id for s in d.samples if s.subject_id in group]
    test = set(order[n_train + n_val :])
    return ids(train), ids(val), ids(test)


def fit_to_raw_targets(
    d: Dataset,
    raw_targets: dict[str, np.ndarray],
    cfg: FitConfig,
    operator_name: str = "custom",
) -> FitReport:
    """Fit the fused matrix to row-normalized targets by symmetrized MSE.

    Subjects are split 70/10/20 into train/val/test; training stops early
    when validation MSE fails to improve for ``patience`` epochs and the
    best-validation parameters are restored. Raw-scale MSE (prediction mapped
    back through each row's shift and scale) is recorded alongside.
    """
    from .training import AdamState, adam_step

    normalized: dict[str, np.ndarray] = {}
    shifts: dict[str, np.ndarray] = {}
    scales: dict[str, np.ndarray] = {}
    raws: dict[str, np.ndarray] = {}
    for sid, raw in raw_targets.items():
        p, shift, scale = normalize_target_rows(raw)
        normalized[sid] = p
        shifts[sid] = shift
        scales[sid] = scale
        raws[sid] = np.asarray(raw, dtype=float)

    train_ids, val_ids, test_ids = _split_by_subject(d, cfg.seed)
    by_id = {s.sample_id: s for s in d.samples}
    t_features = d.samples[0].n_timepoints

    params = init_params(
        n_features=t_features,
        n_heads=cfg.n_heads,
        head_dim=cfg.head_dim,
        value_dim=cfg.value_dim,
        out_dim=cfg.out_dim,
        seed=cfg.seed,
    )
    state = AdamState.for_params(params)

    def eval_mse(ids: list[str], p: EncoderParams) -> float:
        total = 0.0
        for sid in ids:
            out = forward(p, by_id[sid], keep_cache=False)
            total += _sym_mse(out.fused, normalized[sid])
        return total / len(ids)

    def eval_raw_mse(ids: list[str], p: EncoderParams) -> float:
        total = 0.0
        for sid in ids:
            out = forward(p, by_id[sid], keep_cache=False)
            raw_hat = out.fused * scales[sid][:, None] + shifts[sid][:, None]
            total += _sym_mse(raw_hat, raws[sid])
        return total / len(ids)

    train_mse_start = eval_mse(train_ids, params)
    best_val = eval_mse(val_ids, params)
    best_params = clone_params(params)
    stale = 0
    epochs_run = 0
    stopped_early = False
    n_train = len(train_ids)

    for epoch in range(cfg.max_epochs):
        grads = {name: np.zeros_like(arr) for name, arr in param_tensors(params).items()}
        for sid in train_ids:
            out = forward(params, by_id[sid])
            n = out.fused.shape[0]
            residual = _sym(out.fused) - _sym(normalized[sid])
            grad_fused = residual * (2.0 / (n * n * n_train))
            sample_grads = backward(out, grad_fused=grad_fused)
            for name, g in sample_grads.items():
                grads[name] += g
        adam_step(params, grads, state, cfg.lr)
        epochs_run = epoch + 1

        val_mse = eval_mse(val_ids, params)
        if val_mse < best_val - cfg.min_delta:
            best_val = val_mse
            best_params = clone_params(params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped_early = True
                break

    return FitReport(
        operator=operator_name,
        train_mse_start=train_mse_start,
        train_mse_end=eval_mse(train_ids, best_params),
        test_mse=eval_mse(test_ids, best_params),
        raw_train_mse_end=eval_raw_mse(train_ids, best_params),
        raw_test_mse=eval_raw_mse(test_ids, best_params),
        epochs_run=epochs_run,
        stopped_early=stopped_early,
    )


def fit_to_target(d: Dataset, target_op: "SpiOperator", cfg: FitConfig) -> FitReport:
    """Compute the target operator on every sample, then fit the fused matrix to it."""
    from .spi import SpiOperator, compute_fc  # local import keeps module load light

    assert isinstance(target_op, SpiOperator)
    raw_targets = {}
    for sample in d.samples:
        raw_targets[sample.sample_id] = compute_fc(target_op, sample).values
    return fit_to_raw_targets(d, raw_targets, cfg, operator_name=target_op.name)
