import numpy as np
import pytest

from rankcore.dataset import TimeSeriesSample
from rankcore.spi import compute_fc, get_operators, registry

CORRELATION_LIKE = ["pearson", "spearman", "kendall", "xcorr_max", "xcorr_mean"]
UNIT_INTERVAL = ["cohmag_mean", "plv_mean", "pli_mean", "wpli_mean"]
SCALE_INVARIANT = ["pearson", "spearman", "kendall", "plv_mean", "pli_mean",
                   "wpli_mean", "cohmag_mean"]


def sample_from(data, sid="s0"):
    return TimeSeriesSample(sid, "subj", 0, np.asarray(data, dtype=float))


@pytest.fixture(scope="module")
def random_sample():
    rng = np.random.default_rng(42)
    return sample_from(rng.standard_normal((6, 64)))


@pytest.fixture(scope="module")
def ops():
    return {op.name: op for op in registry()}


def test_registry_has_twenty_unique_operators():
    names = [op.name for op in registry()]
    assert len(names) == 20
    assert len(set(names)) == 20


def test_registry_override_reflected():
    ops = {op.name: op for op in registry({"xcorr_max": {"lag_max": 5}})}
    assert ops["xcorr_max"].params["lag_max"] == 5
    assert ops["xcorr_mean"].params["lag_max"] is None


def test_unknown_operator_rejected():
    with pytest.raises(KeyError, match="te_kernel"):
        registry({"te_kernel": {}})
    with pytest.raises(KeyError, match="te_kernel"):
        get_operators(["te_kernel"])


def test_invalid_params_rejected():
    with pytest.raises(ValueError, match="shrinkage"):
        registry({"cov_shrunk": {"shrinkage": 1.5}})
    with pytest.raises(ValueError, match="band"):
        registry({"cohmag_mean": {"band": (0.3, 0.2)}})


def test_pearson_perfect_linear_dependence(ops):
    fc = compute_fc(ops["pearson"], sample_from([[1, 2, 3] * 4, [2, 4, 6] * 4]))
    assert fc.values[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_pearson_hand_value(ops):
    # deviations (-1,0,1) vs (-1,1,0): covariance 1, stds sqrt(2)*sqrt(2) -> 0.5
    # (repeating the pattern leaves the correlation unchanged)
    x = np.array([[1, 2, 3] * 4, [1, 3, 2] * 4], dtype=float)
    fc = compute_fc(ops["pearson"], sample_from(x))
    assert fc.values[0, 1] == pytest.approx(0.5, abs=1e-12)


def test_mi_gaussian_independent_rows_near_zero(ops):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 10**4))  # known-independent generator
    fc = compute_fc(ops["mi_gaussian"], sample_from(x))
    assert abs(fc.values[0, 1]) < 0.01
    assert fc.values[0, 0] == 0.0


def test_plv_identical_sinusoids(ops):
    t = np.arange(128)
    row = np.sin(2 * np.pi * t / 16)
    fc = compute_fc(ops["plv_mean"], sample_from(np.stack([row, row])))
    assert fc.values[0, 1] == pytest.approx(1.0, abs=1e-6)


def test_all_operators_symmetric_finite(random_sample, ops):
    for op in ops.values():
        fc = compute_fc(op, random_sample)
        assert np.isfinite(fc.values).all(), op.name
        assert np.abs(fc.values - fc.values.T).max() <= 1e-9, op.name


def test_permutation_equivariance(random_sample, ops):
    rng = np.random.default_rng(7)
    perm = rng.permutation(random_sample.n_regions)
    permuted = sample_from(random_sample.data[perm], sid="s0p")
    for op in ops.values():
        base = compute_fc(op, random_sample).values
        moved = compute_fc(op, permuted).values
        np.testing.assert_allclose(moved, base[np.ix_(perm, perm)], atol=1e-10,
                                   err_msg=op.name)


def test_scale_invariance_split(random_sample, ops):
    rng = np.random.default_rng(3)
    gains = rng.uniform(0.5, 3.0, size=random_sample.n_regions)
    offsets = rng.uniform(-2.0, 2.0, size=random_sample.n_regions)
    scaled = sample_from(random_sample.data * gains[:, None] + offsets[:, None], sid="s0s")
    for name in SCALE_INVARIANT:
        base = compute_fc(ops[name], random_sample).values
        moved = compute_fc(ops[name], scaled).values
        np.testing.assert_allclose(moved, base, atol=1e-8, err_msg=name)
    cov_base = compute_fc(ops["cov_empirical"], random_sample).values
    cov_moved = compute_fc(ops["cov_empirical"], scaled).values
    assert np.abs(cov_base - cov_moved).max() > 1e-3


def test_pearson_sq_matches_square(random_sample, ops):
    r = compute_fc(ops["pearson"], random_sample).values
    r2 = compute_fc(ops["pearson_sq"], random_sample).values
    np.testing.assert_allclose(r2, r**2, atol=1e-12)


def test_value_ranges(random_sample, ops):
    for name in CORRELATION_LIKE:
        v = compute_fc(ops[name], random_sample).values
        assert v.min() >= -1.0 - 1e-12 and v.max() <= 1.0 + 1e-12, name
    for name in UNIT_INTERVAL:
        v = compute_fc(ops[name], random_sample).values
        assert v.min() >= -1e-12 and v.max() <= 1.0 + 1e-12, name


def test_diagonal_conventions(random_sample, ops):
    for name in ["pearson", "pearson_sq", "spearman", "kendall"]:
        np.testing.assert_allclose(np.diag(compute_fc(ops[name], random_sample).values), 1.0)
    for name in ["pdist_euclidean", "pdist_cityblock", "pdist_chebyshev",
                 "bary_euclidean_mean", "mi_gaussian"]:
        np.testing.assert_allclose(np.diag(compute_fc(ops[name], random_sample).values), 0.0,
                                   atol=1e-12)


def test_bary_is_half_euclidean(random_sample, ops):
    # the two-series euclidean barycenter is their average, so each series sits
    # at half the mutual distance from it
    d = compute_fc(ops["pdist_euclidean"], random_sample).values
    b = compute_fc(ops["bary_euclidean_mean"], random_sample).values
    np.testing.assert_allclose(b, d / 2.0, atol=1e-12)


def test_zero_variance_row_flagged_not_nan(ops):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 64))
    x[2] = 5.0  # constant row
    fc = compute_fc(ops["pearson"], sample_from(x))
    assert "zero_variance_rows" in fc.flags
    assert np.isfinite(fc.values).all()
    assert fc.values[2, 2] == 1.0
    off = np.delete(fc.values[2], 2)
    np.testing.assert_array_equal(off, 0.0)


def test_spectral_minimum_length(ops):
    short = sample_from(np.random.default_rng(0).standard_normal((3, 16)))
    with pytest.raises(ValueError, match="at least 32"):
        compute_fc(ops["cohmag_mean"], short)


def test_non_finite_input_rejected(ops):
    s = sample_from(np.zeros((3, 64)) + 1.0)
    s.data[1, 5] = np.nan  # mutate after construction to mimic a corrupt load
    with pytest.raises(ValueError, match="non-finite"):
        compute_fc(ops["pearson"], s)
