import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from workbench import _kernels
from workbench.selection import (GmmParams, LossWindow, SelectorConfig, component_posteriors, fit_gmm_1d,
                                 gmm_m_step, gmm_posterior_clean, select_gmm, select_oracle,
                                 select_small_loss, select_spd, selection_metrics)


def bimodal(seed=0, n=500, sd=0.02):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(0.1, sd, n), rng.normal(0.9, sd, n)])
    comp = np.r_[np.zeros(n, int), np.ones(n, int)]
    # the pair of extremes pins the min-max normalisation to [0, 1]
    return np.r_[x, 0.0, 1.0], np.r_[comp, 0, 1]


def normal_pdf(x, mu, var):
    return math.exp(-(x - mu) ** 2 / (2 * var)) / math.sqrt(2 * math.pi * var)


def is_partition(part, m):
    both = np.concatenate([part.clean, part.unlabeled])
    return len(np.intersect1d(part.clean, part.unlabeled)) == 0 and np.array_equal(np.sort(both), np.arange(m))


# ---------------------------------------------------------------------------
# fit_gmm_1d
# ---------------------------------------------------------------------------

def test_equal_losses_degenerate():
    assert fit_gmm_1d(np.full(10, 0.7)).degenerate


def test_fit_recovers_known_mixture():
    x, _ = bimodal()
    p = fit_gmm_1d(x)
    assert not p.degenerate
    assert np.all(np.abs(p.means - [0.1, 0.9]) < 0.02)
    assert np.all(np.abs(p.weights - 0.5) < 0.05)


def test_fit_relabels_clean_first():
    x, _ = bimodal(seed=3)
    p = fit_gmm_1d(x[::-1])
    assert p.means[0] <= p.means[1]


def test_loglik_monotone():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = np.concatenate([rng.gamma(2, 0.3, 40), rng.gamma(6, 0.5, 24)])
        hist = fit_gmm_1d(x).loglik
        assert np.all(np.diff(hist) >= -1e-9)


def test_m_step_matches_hand_computation():
    z = np.array([0.0, 0.2, 0.7, 1.0])
    r = np.array([0.9, 0.8, 0.3, 0.1])
    mu, var, w = gmm_m_step(z, r)
    n0, n1 = 2.1, 1.9
    m0 = (0.9 * 0.0 + 0.8 * 0.2 + 0.3 * 0.7 + 0.1 * 1.0) / n0
    m1 = (0.1 * 0.0 + 0.2 * 0.2 + 0.7 * 0.7 + 0.9 * 1.0) / n1
    v0 = (0.9 * m0 ** 2 + 0.8 * (0.2 - m0) ** 2 + 0.3 * (0.7 - m0) ** 2 + 0.1 * (1 - m0) ** 2) / n0
    v1 = (0.1 * m1 ** 2 + 0.2 * (0.2 - m1) ** 2 + 0.7 * (0.7 - m1) ** 2 + 0.9 * (1 - m1) ** 2) / n1
    assert np.allclose(mu, [m0, m1], rtol=0, atol=1e-10)
    assert np.allclose(var, [v0, v1], rtol=0, atol=1e-10)
    assert np.allclose(w, [n0 / 4, n1 / 4], rtol=0, atol=1e-10)


@pytest.mark.parametrize("impl", ["numpy", "numba"])
def test_kernel_single_iteration_is_estep_then_mstep(impl):
    z = np.array([0.0, 0.15, 0.3, 0.75, 0.9, 1.0])
    mu0, var0, w0 = np.array([0.1, 0.8]), np.array([0.05, 0.08]), np.array([0.6, 0.4])
    dens = np.array([[w0[k] * normal_pdf(v, mu0[k], var0[k]) for k in (0, 1)] for v in z])
    r = dens[:, 0] / dens.sum(axis=1)
    want = gmm_m_step(z, r)
    fn = _kernels.em_gmm2_numpy if impl == "numpy" else _kernels.em_gmm2_numba
    mu, var, w, hist, _ = fn(z, mu0, var0, w0, -np.inf, 1, 1e-6)
    assert len(hist) == 2
    assert hist[0] == pytest.approx(float(np.log(dens.sum(axis=1)).sum()), abs=1e-10)
    for a, b in zip((mu, var, w), want):
        assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_numba_and_numpy_em_agree():
    rng = np.random.default_rng(5)
    for _ in range(10):
        z = rng.random(64)
        args = (z, np.percentile(z, [10, 90]), np.full(2, z.var()), np.full(2, 0.5), 1e-6, 100, 1e-6)
        a = _kernels.em_gmm2_numpy(*args)
        b = _kernels.em_gmm2_numba(*args)
        for u, v in zip(a, b):
            assert np.allclose(u, v, rtol=1e-9, atol=1e-9)


def test_variance_floor():
    x = np.r_[np.zeros(20), np.ones(3)]
    p = fit_gmm_1d(x)
    assert np.all(p.variances >= 1e-6)


def test_fit_needs_two_losses():
    with pytest.raises(ValueError):
        fit_gmm_1d(np.array([0.3]))


def test_losses_are_clamped():
    p = fit_gmm_1d(np.array([0.1, 0.2, 1e9, np.inf]))
    assert p.hi == 50.0


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------

def test_posterior_midpoint():
    p = GmmParams(np.array([0.2, 0.8]), np.array([0.01, 0.01]), np.array([0.5, 0.5]))
    assert gmm_posterior_clean(0.5, p) == pytest.approx(0.5, abs=1e-12)


def test_posterior_separated():
    p = GmmParams(np.array([0.1, 0.9]), np.array([1e-4, 1e-4]), np.array([0.5, 0.5]))
    assert gmm_posterior_clean(0.1, p) > 0.999


def test_posterior_direct_formula():
    p = GmmParams(np.array([0.2, 0.8]), np.array([0.01, 0.04]), np.array([0.6, 0.4]))
    a = 0.6 * normal_pdf(0.4, 0.2, 0.01)
    b = 0.4 * normal_pdf(0.4, 0.8, 0.04)
    assert abs(gmm_posterior_clean(0.4, p) - a / (a + b)) < 1e-10


@settings(max_examples=200, deadline=None)
@given(loss=st.floats(-1e3, 1e3), m0=st.floats(0, 1), m1=st.floats(0, 1),
       v0=st.floats(1e-6, 1), v1=st.floats(1e-6, 1), w=st.floats(0.01, 0.99))
def test_posteriors_sum_to_one(loss, m0, m1, v0, v1, w):
    p = GmmParams(np.array([m0, m1]), np.array([v0, v1]), np.array([w, 1 - w]))
    post = component_posteriors(loss, p)
    assert abs(post.sum() - 1.0) < 1e-12
    assert 0.0 <= post[0, 0] <= 1.0


# ---------------------------------------------------------------------------
# select_gmm
# ---------------------------------------------------------------------------

def test_select_gmm_bimodal_agreement():
    x, comp = bimodal()
    part = select_gmm(x, SelectorConfig(clean_threshold=0.5))
    mask = np.zeros(len(x), bool)
    mask[part.clean] = True
    assert (mask == (comp == 0)).mean() >= 0.99
    assert is_partition(part, len(x))


def test_select_gmm_degenerate_all_clean():
    part = select_gmm(np.full(16, 2.3))
    assert len(part.clean) == 16 and len(part.unlabeled) == 0
    assert np.all(part.clean_posterior == 1.0)


def test_select_gmm_strict_threshold_shrinks():
    x, _ = bimodal(seed=2)
    loose = set(select_gmm(x, SelectorConfig(clean_threshold=0.5)).clean)
    strict = set(select_gmm(x, SelectorConfig(clean_threshold=0.999999)).clean)
    assert strict <= loose
    overlapping, _ = bimodal(seed=2, sd=0.15)
    loose = set(select_gmm(overlapping, SelectorConfig(clean_threshold=0.5)).clean)
    strict = set(select_gmm(overlapping, SelectorConfig(clean_threshold=0.999999)).clean)
    assert strict < loose


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), m=st.integers(2, 200),
       t1=st.floats(0.01, 0.99), t2=st.floats(0.01, 0.99))
def test_select_gmm_monotone_in_threshold(seed, m, t1, t2):
    x = np.random.default_rng(seed).gamma(1.5, 1.0, m)
    lo, hi = min(t1, t2), max(t1, t2)
    a = select_gmm(x, SelectorConfig(clean_threshold=lo))
    b = select_gmm(x, SelectorConfig(clean_threshold=hi))
    assert set(b.clean) <= set(a.clean)
    assert is_partition(a, m) and is_partition(b, m)


def test_select_gmm_window_grows_and_caps():
    win = LossWindow(8)
    rng = np.random.default_rng(0)
    for _ in range(3):
        part = select_gmm(rng.random(5), window=win)
        assert part.size == 5
    assert len(win.values()) == 8


def test_select_gmm_empty_batch():
    part = select_gmm(np.zeros(0))
    assert part.size == 0


# ---------------------------------------------------------------------------
# other selectors
# ---------------------------------------------------------------------------

def test_spd_aligned_and_anti_aligned():
    y = np.array([0, 2, 1, 1])
    z = np.eye(3)[y]
    assert len(select_spd(z, y).clean) == 4
    anti = np.eye(3)[(y + 1) % 3]
    assert len(select_spd(anti, y).clean) == 0


def test_spd_tie_breaks_low():
    part = select_spd(np.array([[1.0, 1.0]]), np.array([0]))
    assert list(part.clean) == [0]
    part = select_spd(np.array([[1.0, 1.0]]), np.array([1]))
    assert list(part.clean) == []


def test_small_loss_by_hand():
    part = select_small_loss(np.array([0.1, 0.9, 0.2, 0.8]), 0.5)
    assert sorted(part.clean) == [0, 2]
    assert len(select_small_loss(np.array([3.0, 1.0, 2.0]), 1.0).clean) == 3


def test_small_loss_ties_prefer_earlier():
    part = select_small_loss(np.array([0.5, 0.5, 0.5, 0.1]), 0.5)
    assert sorted(part.clean) == [0, 3]


def test_small_loss_matches_sort_oracle():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        m = int(rng.integers(1, 40))
        x = np.round(rng.random(m), 2)
        keep = float(rng.uniform(0.01, 1.0))
        k = math.ceil(keep * m)
        want = sorted(sorted(range(m), key=lambda i: (x[i], i))[:k])
        assert sorted(select_small_loss(x, keep).clean.tolist()) == want


def test_small_loss_rejects_bad_fraction():
    with pytest.raises(ValueError):
        select_small_loss(np.ones(3), 0.0)


def test_oracle_selector():
    part = select_oracle(np.array([1, 0, 2]), np.array([1, 1, 2]))
    assert list(part.clean) == [0, 2] and list(part.unlabeled) == [1]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_perfect_and_counting():
    truth = np.array([1, 1, 0, 1, 0], bool)
    assert selection_metrics(select_oracle(truth.astype(int), np.ones(5, int)), truth) == (1.0, 1.0)
    all_clean = select_small_loss(np.zeros(10), 1.0)
    t = np.r_[np.ones(6, bool), np.zeros(4, bool)]
    assert selection_metrics(all_clean, t) == (0.6, 1.0)


def test_metrics_empty_clean_precision_one():
    empty = select_spd(np.array([[0.0, 1.0]]), np.array([0]))
    assert selection_metrics(empty, np.array([True]))[0] == 1.0


def test_metrics_counting_oracle():
    rng = np.random.default_rng(4)
    for _ in range(200):
        m = int(rng.integers(1, 30))
        mask = rng.random(m) < 0.5
        truth = rng.random(m) < 0.6
        part = select_oracle(mask.astype(int), np.ones(m, int))
        tp = sum(1 for i in range(m) if mask[i] and truth[i])
        prec = tp / mask.sum() if mask.sum() else 1.0
        rec = tp / truth.sum() if truth.sum() else 1.0
        assert selection_metrics(part, truth) == (prec, rec)
