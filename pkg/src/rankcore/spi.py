"""Registry of pairwise-interaction operators mapping an N x T sample to an N x N matrix.

The default registry holds 20 undirected operators spanning covariance,
precision, correlation, rank-correlation, cross-correlation, distance,
spectral-coherence, phase-synchrony, and information families. Every
operator is a pure function, returns a symmetric matrix, and sanitizes
non-finite entries to 0 with a flag rather than emitting NaN.

Conventions: correlation-family diagonals are 1, distance- and
information-family diagonals are 0 (pairwise Gaussian mutual information of
a row with itself is excluded); distances are stored raw, not negated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.signal import csd, hilbert, welch
from scipy.spatial.distance import pdist, squareform
from scipy.stats import kendalltau, rankdata

from .dataset import TimeSeriesSample

__all__ = ["SpiOperator", "FcMatrix", "registry", "get_operators", "compute_fc", "KINDS"]

KINDS = (
    "covariance",
    "precision",
    "correlation",
    "rank_correlation",
    "cross_correlation",
    "distance",
    "spectral",
    "phase",
    "information",
)

_MIN_SPECTRAL_T = 32


@dataclass(frozen=True)
class SpiOperator:
    name: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")


@dataclass(frozen=True)
class FcMatrix:
    """Result of one operator on one sample; values are finite and symmetric."""

    operator_name: str
    sample_id: str
    values: np.ndarray
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("FC values must be a square matrix")
        object.__setattr__(self, "values", arr)


# ---------------------------------------------------------------------------
# shared helpers

def _sample_cov(x: np.ndarray) -> np.ndarray:
    # sample covariance with the T-1 denominator
    return np.cov(x)


def _pearson_with_guard(x: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Pearson matrix that zeroes rows/columns of constant series instead of NaN."""
    flags: list[str] = []
    t = x.shape[1]
    centered = x - x.mean(axis=1, keepdims=True)
    sd = np.sqrt((centered**2).sum(axis=1) / t)
    ok = sd > 0.0
    if not ok.all():
        flags.append("zero_variance_rows")
    safe_sd = np.where(ok, sd, 1.0)
    unit = centered / (safe_sd[:, None] * np.sqrt(t))
    r = unit @ unit.T
    r[~ok, :] = 0.0
    r[:, ~ok] = 0.0
    np.fill_diagonal(r, 1.0)
    np.clip(r, -1.0, 1.0, out=r)
    return (r + r.T) / 2.0, flags


def _rank_rows(x: np.ndarray) -> np.ndarray:
    return rankdata(x, method="average", axis=1).astype(float)


def _welch_segment(t: int) -> int:
    seg = int(round(t / 4))
    seg += seg % 2
    return max(seg, 8)


def _band_mask(freqs: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    lo, hi = band
    mask = (freqs > lo) & (freqs <= hi)
    if not mask.any():
        raise ValueError(f"frequency band {band} selects no Welch bins")
    return mask


# ---------------------------------------------------------------------------
# operator implementations; each returns (matrix, flags)

def _op_cov_empirical(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    c = _sample_cov(x)
    return (c + c.T) / 2.0, []


def _op_cov_shrunk(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    s = float(params["shrinkage"])
    c = _sample_cov(x)
    mu = np.trace(c) / c.shape[0]
    shrunk = (1.0 - s) * c + s * mu * np.eye(c.shape[0])
    return (shrunk + shrunk.T) / 2.0, []


def _op_prec(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    c = _sample_cov(x)
    lam = float(params["ridge_scale"]) * np.trace(c) / c.shape[0]
    p = np.linalg.inv(c + lam * np.eye(c.shape[0]))
    return (p + p.T) / 2.0, []


def _op_pearson(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    return _pearson_with_guard(x)


def _op_pearson_sq(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    r, flags = _pearson_with_guard(x)
    return r**2, flags


def _op_spearman(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    return _pearson_with_guard(_rank_rows(x))


def _op_kendall(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    n = x.shape[0]
    flags: list[str] = []
    sd = x.std(axis=1)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if sd[i] == 0.0 or sd[j] == 0.0:
                if "zero_variance_rows" not in flags:
                    flags.append("zero_variance_rows")
                continue
            tau = kendalltau(x[i], x[j], variant="b").statistic
            out[i, j] = out[j, i] = tau
    return out, flags


def _op_xcorr(x: np.ndarray, params: dict[str, Any], reduce: str) -> tuple[np.ndarray, list[str]]:
    n, t = x.shape
    lag_max = params.get("lag_max")
    lag = int(lag_max) if lag_max is not None else max(1, t // 4)
    lag = min(lag, t - 1)
    flags: list[str] = []
    centered = x - x.mean(axis=1, keepdims=True)
    sd = np.sqrt((centered**2).sum(axis=1) / t)
    ok = sd > 0.0
    if not ok.all():
        flags.append("zero_variance_rows")
    unit = np.where(ok[:, None], centered / np.where(ok, sd, 1.0)[:, None], 0.0)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            c = np.correlate(unit[i], unit[j], mode="full") / t
            window = c[t - 1 - lag : t + lag]
            out[i, j] = out[j, i] = window.max() if reduce == "max" else window.mean()
    return out, flags


def _op_pdist(x: np.ndarray, metric: str) -> tuple[np.ndarray, list[str]]:
    with np.errstate(invalid="ignore", divide="ignore"):
        d = squareform(pdist(x, metric=metric))
    return d, []


def _op_bary_euclidean_mean(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    # the pairwise euclidean barycenter is the average series, so the mean
    # distance of the two series to it is half their mutual distance
    return squareform(pdist(x, metric="euclidean")) / 2.0, []


def _coherency(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, np.ndarray]:
    t = x.shape[1]
    seg = _welch_segment(t)
    band = tuple(params.get("band", (0.0, 0.5)))
    kw = dict(fs=1.0, window="hann", nperseg=seg, noverlap=seg // 2, detrend="constant")
    freqs, pxx = welch(x, axis=-1, **kw)
    _, sxy = csd(x[:, None, :], x[None, :, :], axis=-1, **kw)
    mask = _band_mask(freqs, band)
    denom = np.sqrt(pxx[:, None, :] * pxx[None, :, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        coherency = sxy / denom
    return coherency[:, :, mask], freqs[mask]


def _op_cohmag_mean(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    coherency, _ = _coherency(x, params)
    out = np.abs(coherency).mean(axis=-1)
    return (out + out.T) / 2.0, []


def _op_icoh_mean(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    coherency, _ = _coherency(x, params)
    out = np.abs(coherency.imag).mean(axis=-1)
    return (out + out.T) / 2.0, []


def _cross_analytic(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=1, keepdims=True)
    z = hilbert(centered, axis=-1)
    return z[:, None, :] * np.conj(z[None, :, :])


def _cross_imag(x: np.ndarray) -> np.ndarray:
    # z * conj(z) carries ~1e-16 imaginary dust whose sign is arbitrary; zero
    # it so sign-based metrics stay exact on (near-)identical rows
    cross = _cross_analytic(x)
    imag = cross.imag.copy()
    imag[np.abs(imag) <= 1e-12 * np.abs(cross)] = 0.0
    return imag


def _op_plv_mean(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    cross = _cross_analytic(x)
    mag = np.abs(cross)
    with np.errstate(invalid="ignore", divide="ignore"):
        phases = cross / mag
    out = np.abs(phases.mean(axis=-1))
    return (out + out.T) / 2.0, []


def _op_pli_mean(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    out = np.abs(np.sign(_cross_imag(x)).mean(axis=-1))
    return (out + out.T) / 2.0, []


def _op_wpli_mean(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    imag = _cross_imag(x)
    num = np.abs(imag.sum(axis=-1))
    den = np.abs(imag).sum(axis=-1)
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0.0)
    return (out + out.T) / 2.0, []


def _op_mi_gaussian(x: np.ndarray, params: dict[str, Any]) -> tuple[np.ndarray, list[str]]:
    r, flags = _pearson_with_guard(x)
    np.clip(r, -(1.0 - 1e-12), 1.0 - 1e-12, out=r)
    mi = -0.5 * np.log1p(-(r**2))
    np.fill_diagonal(mi, 0.0)
    return (mi + mi.T) / 2.0, flags


_IMPLS: dict[str, Callable[[np.ndarray, dict[str, Any]], tuple[np.ndarray, list[str]]]] = {
    "cov_empirical": _op_cov_empirical,
    "cov_shrunk": _op_cov_shrunk,
    "prec": _op_prec,
    "pearson": _op_pearson,
    "pearson_sq": _op_pearson_sq,
    "spearman": _op_spearman,
    "kendall": _op_kendall,
    "xcorr_max": lambda x, p: _op_xcorr(x, p, "max"),
    "xcorr_mean": lambda x, p: _op_xcorr(x, p, "mean"),
    "pdist_euclidean": lambda x, p: _op_pdist(x, "euclidean"),
    "pdist_cityblock": lambda x, p: _op_pdist(x, "cityblock"),
    "pdist_cosine": lambda x, p: _op_pdist(x, "cosine"),
    "pdist_chebyshev": lambda x, p: _op_pdist(x, "chebyshev"),
    "cohmag_mean": _op_cohmag_mean,
    "icoh_mean": _op_icoh_mean,
    "plv_mean": _op_plv_mean,
    "pli_mean": _op_pli_mean,
    "wpli_mean": _op_wpli_mean,
    "mi_gaussian": _op_mi_gaussian,
    "bary_euclidean_mean": _op_bary_euclidean_mean,
}

_DEFAULTS: list[tuple[str, str, dict[str, Any]]] = [
    ("cov_empirical", "covariance", {}),
    ("cov_shrunk", "covariance", {"shrinkage": 0.1}),
    ("prec", "precision", {"ridge_scale": 1e-3}),
    ("pearson", "correlation", {}),
    ("pearson_sq", "correlation", {}),
    ("spearman", "rank_correlation", {}),
    ("kendall", "rank_correlation", {}),
    ("xcorr_max", "cross_correlation", {"lag_max": None}),
    ("xcorr_mean", "cross_correlation", {"lag_max": None}),
    ("pdist_euclidean", "distance", {}),
    ("pdist_cityblock", "distance", {}),
    ("pdist_cosine", "distance", {}),
    ("pdist_chebyshev", "distance", {}),
    ("cohmag_mean", "spectral", {"band": (0.0, 0.5)}),
    ("icoh_mean", "spectral", {"band": (0.0, 0.5)}),
    ("plv_mean", "phase", {}),
    ("pli_mean", "phase", {}),
    ("wpli_mean", "phase", {}),
    ("mi_gaussian", "information", {}),
    ("bary_euclidean_mean", "distance", {}),
]


def _validate_params(name: str, kind: str, params: dict[str, Any],
                     defaults: dict[str, Any]) -> None:
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"{name}: unknown params {sorted(unknown)}")
    if name == "cov_shrunk":
        s = float(params["shrinkage"])
        if not (0.0 <= s <= 1.0):
            raise ValueError(f"{name}: shrinkage must lie in [0, 1], got {s}")
    if name == "prec":
        if float(params["ridge_scale"]) <= 0.0:
            raise ValueError(f"{name}: ridge_scale must be positive")
    if name.startswith("xcorr"):
        lag = params.get("lag_max")
        if lag is not None and int(lag) < 1:
            raise ValueError(f"{name}: lag_max must be >= 1 or None")
    if kind == "spectral":
        lo, hi = params["band"]
        if not (0.0 <= lo < hi <= 0.5):
            raise ValueError(f"{name}: band must satisfy 0 <= lo < hi <= 0.5")


def registry(overrides: Mapping[str, Mapping[str, Any]] | None = None) -> list[SpiOperator]:
    """Return the 20 default operators, optionally with per-operator param overrides.

    Raises on overrides that name an operator outside the registry.
    """
    known = {name for name, _, _ in _DEFAULTS}
    if overrides:
        unknown = set(overrides) - known
        if unknown:
            raise KeyError(f"unknown operator(s) in overrides: {sorted(unknown)}")
    ops = []
    for name, kind, defaults in _DEFAULTS:
        params = dict(defaults)
        if overrides and name in overrides:
            params.update(overrides[name])
        _validate_params(name, kind, params, defaults)
        ops.append(SpiOperator(name=name, kind=kind, params=params))
    return ops


def get_operators(names: list[str] | None = None,
                  overrides: Mapping[str, Mapping[str, Any]] | None = None) -> list[SpiOperator]:
    """Look up registry operators by name, preserving registry order."""
    ops = registry(overrides)
    if names is None:
        return ops
    by_name = {op.name: op for op in ops}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise KeyError(f"unknown operator(s): {missing}")
    return [by_name[n] for n in names]


def compute_fc(op: SpiOperator, sample: TimeSeriesSample) -> FcMatrix:
    """Apply one operator to one sample; deterministic and symmetric.

    Constant rows never produce NaN: correlation-family entries touching them
    are zeroed and a flag is attached. Any residual non-finite value is
    sanitized to 0 with a flag.
    """
    x = sample.data
    if not np.isfinite(x).all():
        raise ValueError(f"sample {sample.sample_id!r} contains non-finite values")
    if op.kind == "spectral" and x.shape[1] < _MIN_SPECTRAL_T:
        raise ValueError(
            f"{op.name}: spectral operators need at least {_MIN_SPECTRAL_T} time points, "
            f"got {x.shape[1]}"
        )
    try:
        impl = _IMPLS[op.name]
    except KeyError:
        raise KeyError(f"operator {op.name!r} has no implementation") from None
    values, flags = impl(x, op.params)
    values = np.asarray(values, dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        values = np.where(bad, 0.0, values)
        flags = list(flags) + ["nonfinite_sanitized"]
    return FcMatrix(operator_name=op.name, sample_id=sample.sample_id,
                    values=values, flags=tuple(flags))
