"""Property tests for invariants that must hold for any input."""
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit

from amc3d import tensor as T
from amc3d.calibration import apply_calibration, ensemble_logits, fit_platt
from amc3d.fusion import attention_pool
from amc3d.lora import LoraAdapter, apply_adapted, merge_adapter
from amc3d.metrics import compute_auroc, trapezoid_auroc, youden_threshold
from amc3d.train import focal_loss

finite = st.floats(-50, 50, allow_nan=False, width=64)


@st.composite
def scored_labels(draw, max_n=40):
    n = draw(st.integers(2, max_n))
    labels = draw(arrays(np.int64, n, elements=st.integers(0, 1)))
    assume(0 < labels.sum() < n)
    scores = draw(arrays(np.float64, n, elements=st.integers(-6, 6).map(float)))
    return scores, labels


@given(scored_labels())
def test_auroc_rank_formula_matches_integration(data):
    s, y = data
    a = compute_auroc(s, y)
    assert 0.0 <= a <= 1.0
    assert abs(a - trapezoid_auroc(s, y)) < 1e-12


@given(scored_labels())
def test_auroc_monotone_transform_and_flip(data):
    s, y = data
    a = compute_auroc(s, y)
    assert compute_auroc(np.exp(s / 3.0), y) == a
    assert abs(compute_auroc(-s, y) - (1.0 - a)) < 1e-12


@given(scored_labels())
def test_youden_in_range(data):
    op = youden_threshold(*data)
    assert 0.0 <= op.youden_j <= 1.0
    assert 0.0 <= op.sensitivity <= 1.0 and 0.0 <= op.specificity <= 1.0


@pytest.mark.filterwarnings("ignore:.*Platt slope")
@settings(max_examples=40, deadline=None)
@given(scored_labels(max_n=30))
def test_platt_anchor_and_order(data):
    z, y = data
    params = fit_platt(z, y)
    a, b, t = params.a[0], params.b[0], params.threshold[0]
    assert abs(expit(a * t + b) - 0.5) < 1e-9
    if a > 0:
        p = apply_calibration(z[:, None], params)[:, 0]
        assert compute_auroc(p, y) == compute_auroc(z, y)


@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 10_000))
def test_attention_pool_permutation_and_simplex(n, d, seed):
    rng = np.random.default_rng(seed)
    H, q = rng.standard_normal((n, d)) * 3, rng.standard_normal(d) * 3
    with T.precision("f64"):
        res = attention_pool(H, q)
        perm = rng.permutation(n)
        other = attention_pool(H[perm], q)
    assert abs(res.a.sum() - 1.0) < 1e-12 and (res.a >= 0).all()
    np.testing.assert_allclose(other.v, res.v, atol=1e-12)
    # the pooled vector is a convex combination of the rows
    assert (res.v <= H.max(0) + 1e-12).all() and (res.v >= H.min(0) - 1e-12).all()


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_lora_merge_equivalence(d_in, d_out, r, seed):
    rng = np.random.default_rng(seed)
    W, x = rng.standard_normal((d_in, d_out)), rng.standard_normal((3, d_in))
    with T.precision("f64"):
        ad = LoraAdapter(T.Tensor(rng.standard_normal((r, d_out))),
                         T.Tensor(rng.standard_normal((d_in, r))), float(rng.uniform(0.5, 32)), "p")
        np.testing.assert_allclose(apply_adapted(x, W, ad).data, x @ merge_adapter(W, ad), atol=1e-9)


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.int64, (3, 2), elements=st.integers(0, 1)),
       st.floats(0, 5), st.floats(0.01, 1))
def test_focal_nonnegative_and_finite(z, y, gamma, alpha):
    from amc3d.train import FocalLossConfig
    with T.precision("f64"):
        loss = float(focal_loss(z, y, FocalLossConfig(gamma, alpha)).data)
    assert np.isfinite(loss) and loss >= 0.0


@given(st.lists(arrays(np.float64, (4, 2), elements=finite), min_size=1, max_size=6))
def test_ensemble_is_mean_and_bounded(members):
    out = ensemble_logits(members)
    stack = np.stack(members)
    assert (out <= stack.max(0) + 1e-9).all() and (out >= stack.min(0) - 1e-9).all()
    np.testing.assert_allclose(out, stack.mean(0), atol=1e-12)
