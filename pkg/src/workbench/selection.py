"""Sample selectors: split a mini-batch into a trusted subset and an unlabeled one."""

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _kernels

LOSS_CLAMP = 50.0
VAR_FLOOR = 1e-6
DEGENERATE_SPREAD = 1e-12
SELECTOR_KINDS = ("gmm", "spd", "small_loss", "oracle")


@dataclass
class SelectorConfig:
    kind: str = "gmm"
    clean_threshold: float = 0.5
    keep_fraction: float = 0.6
    em_tol: float = 1e-6
    em_max_iter: int = 100
    window: int = 0  # 0: fit on the batch alone; W > 0: trailing buffer of the last W losses

    def validate(self):
        problems = []
        if self.kind not in SELECTOR_KINDS:
            problems.append(f"selector.kind must be one of {', '.join(SELECTOR_KINDS)}, got {self.kind!r}")
        if not 0.0 < self.clean_threshold < 1.0:
            problems.append(f"selector.clean_threshold must lie in (0, 1), got {self.clean_threshold}")
        if not 0.0 < self.keep_fraction <= 1.0:
            problems.append(f"selector.keep_fraction must lie in (0, 1], got {self.keep_fraction}")
        if self.em_tol <= 0:
            problems.append("selector.em_tol must be positive")
        if self.em_max_iter < 1:
            problems.append("selector.em_max_iter must be >= 1")
        if self.window < 0:
            problems.append("selector.window must be >= 0")
        return problems

    @property
    def gives_posterior(self):
        return self.kind in ("gmm", "oracle")


@dataclass
class GmmParams:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    degenerate: bool = False
    loglik: np.ndarray = None  # EM log-likelihood after each M-step, index 0 = init
    # min/max used to normalise the fitted losses, for mapping new losses
    lo: float = 0.0
    hi: float = 1.0


@dataclass
class BatchPartition:
    clean: np.ndarray  # positions within the batch
    unlabeled: np.ndarray
    clean_posterior: np.ndarray = None  # per batch position

    @property
    def size(self):
        return len(self.clean) + len(self.unlabeled)

    @classmethod
    def from_mask(cls, mask, posterior=None):
        mask = np.asarray(mask, dtype=bool)
        return cls(np.flatnonzero(mask), np.flatnonzero(~mask), posterior)


def clamp_losses(losses):
    return np.clip(np.nan_to_num(np.asarray(losses, dtype=np.float64), nan=LOSS_CLAMP, posinf=LOSS_CLAMP),
                   0.0, LOSS_CLAMP)


def _normalize(losses):
    lo, hi = float(losses.min()), float(losses.max())
    return (losses - lo) / (hi - lo), lo, hi


def fit_gmm_1d(losses, config=None):
    """Fit a two-component 1-D Gaussian mixture to per-sample losses with EM.

    Losses are clamped to [0, 50] and min-max normalised to [0, 1] first.
    Initialisation is deterministic: means at the 10th/90th percentiles,
    equal weights, both variances equal to the sample variance.  Components
    are relabelled so that component 0 (the clean one) has the smaller mean.
    A batch whose losses span less than 1e-12 comes back ``degenerate``.
    """
    cfg = config or SelectorConfig()
    x = clamp_losses(losses)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("need at least two losses to fit a mixture")
    if float(x.max() - x.min()) < DEGENERATE_SPREAD:
        return GmmParams(np.array([x[0], x[0]]), np.array([VAR_FLOOR, VAR_FLOOR]), np.array([0.5, 0.5]),
                         degenerate=True, loglik=np.zeros(0), lo=float(x.min()), hi=float(x.max()))
    z, lo, hi = _normalize(x)
    means = np.percentile(z, [10.0, 90.0])
    var0 = max(float(z.var()), VAR_FLOOR)
    mu, var, w, hist, _ = _kernels.em_gmm2(z, means, np.array([var0, var0]), np.array([0.5, 0.5]),
                                          cfg.em_tol, cfg.em_max_iter, VAR_FLOOR)
    if mu[0] > mu[1]:
        mu, var, w = mu[::-1].copy(), var[::-1].copy(), w[::-1].copy()
    return GmmParams(np.asarray(mu), np.asarray(var), np.asarray(w), False, np.asarray(hist), lo, hi)


def gmm_m_step(z, resp0, var_floor=VAR_FLOOR):
    """One M-step from clean-component responsibilities ``resp0``.

    Returns ``(means, variances, weights)``; the same update the EM kernels run.
    """
    z = np.asarray(z, dtype=np.float64)
    r = np.stack([resp0, 1.0 - np.asarray(resp0, dtype=np.float64)], axis=1)
    nk = np.maximum(r.sum(axis=0), 1e-300)
    mu = (r * z[:, None]).sum(axis=0) / nk
    var = np.maximum((r * (z[:, None] - mu) ** 2).sum(axis=0) / nk, var_floor)
    return mu, var, nk / nk.sum()


def component_posteriors(z, params):
    """Posterior of both components for normalised loss(es) ``z``; columns sum to one."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    lj = (np.log(params.weights)[None, :] - 0.5 * np.log(2.0 * np.pi * params.variances)[None, :]
          - 0.5 * (z[:, None] - params.means[None, :]) ** 2 / params.variances[None, :])
    m = lj.max(axis=1, keepdims=True)
    e = np.exp(lj - m)
    return e / e.sum(axis=1, keepdims=True)


def gmm_posterior_clean(loss, params):
    """p(clean | loss) for a loss already on the fitted (normalised) scale."""
    return float(component_posteriors(loss, params)[0, 0])


class LossWindow:
    """Trailing buffer of recent raw (clamped) losses; single writer."""

    def __init__(self, size):
        self.buf = deque(maxlen=size)

    def extend(self, losses):
        self.buf.extend(float(v) for v in losses)

    def values(self):
        return np.fromiter(self.buf, dtype=np.float64, count=len(self.buf))


def select_gmm(per_sample_losses, config=None, window=None):
    """Clean iff p(clean | loss) exceeds ``clean_threshold``.

    With a ``LossWindow`` the mixture is fitted on the window plus the current
    batch and the window is then extended with the batch's losses.
    """
    cfg = config or SelectorConfig()
    x = clamp_losses(per_sample_losses)
    m = len(x)
    if m == 0:
        return BatchPartition(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    pool = x
    if window is not None:
        pool = np.concatenate([window.values(), x])
        window.extend(x)
    if len(pool) < 2 or float(pool.max() - pool.min()) < DEGENERATE_SPREAD:
        return BatchPartition(np.arange(m), np.zeros(0, int), np.ones(m))
    params = fit_gmm_1d(pool, cfg)
    z = (x - params.lo) / (params.hi - params.lo)
    post = component_posteriors(z, params)[:, 0]
    return BatchPartition.from_mask(post > cfg.clean_threshold, post)


def select_spd(logits, given_labels):
    """Clean iff the model's argmax prediction equals the given label (ties -> lowest class)."""
    pred = np.argmax(np.asarray(logits), axis=1)
    mask = pred == np.asarray(given_labels)
    return BatchPartition.from_mask(mask, mask.astype(np.float64))


def select_small_loss(per_sample_losses, keep_fraction):
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    x = np.asarray(per_sample_losses, dtype=np.float64)
    m = len(x)
    k = math.ceil(keep_fraction * m)
    order = np.argsort(x, kind="stable")
    mask = np.zeros(m, dtype=bool)
    mask[order[:k]] = True
    return BatchPartition.from_mask(mask, mask.astype(np.float64))


def select_oracle(given_labels, true_labels):
    """Test-only selector that reads ground truth."""
    mask = np.asarray(given_labels) == np.asarray(true_labels)
    return BatchPartition.from_mask(mask, mask.astype(np.float64))


def selection_metrics(partition, true_clean_mask):
    """(precision, recall) of the clean set against the ground-truth clean mask."""
    truth = np.asarray(true_clean_mask, dtype=bool)
    chosen = np.zeros(len(truth), dtype=bool)
    chosen[partition.clean] = True
    hit = int(np.count_nonzero(chosen & truth))
    n_chosen = int(np.count_nonzero(chosen))
    n_true = int(np.count_nonzero(truth))
    precision = hit / n_chosen if n_chosen else 1.0
    recall = hit / n_true if n_true else 1.0
    return precision, recall
