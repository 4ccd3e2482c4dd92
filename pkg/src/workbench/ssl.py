"""Semi-supervised backbones that turn a (labeled, unlabeled) split into one SGD update.

Every ``*_step`` function mutates ``params``/``opt`` in place and returns the
scalar objective it descended.  Targets produced from the model itself
(guessed labels, pseudo-labels, ensemble targets) are constants of the step:
gradients never flow into the forward pass that produced them.
"""

from dataclasses import dataclass

import numpy as np

from .nncore import backward, ce_loss_and_grad, log_softmax, mlp_forward, sgd_step, softmax

BACKBONE_KINDS = ("ce_only", "temporal_ensembling", "mixmatch", "pseudo_label")


@dataclass
class BackboneConfig:
    kind: str = "pseudo_label"
    lambda_u: float = 25.0
    ema_decay: float = 0.6
    sharpen_T: float = 0.5
    mixup_alpha: float = 4.0
    k_augment: int = 2
    jitter_std: float = 0.05
    min_labeled_per_batch: int = 4
    ramp_epochs: float = 10.0
    reg_prior: float = 0.8
    reg_entropy: float = 0.4
    # uniform-prior penalty inside MixMatch (DivideMix-style); 0 keeps plain MixMatch
    mixmatch_prior: float = 0.0
    # diagnostic override: use this mixing coefficient instead of sampling one
    forced_lambda: float = None

    def validate(self):
        problems = []
        if self.kind not in BACKBONE_KINDS:
            problems.append(f"backbone.kind must be one of {', '.join(BACKBONE_KINDS)}, got {self.kind!r}")
        if self.lambda_u < 0:
            problems.append("backbone.lambda_u must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            problems.append(f"backbone.ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.sharpen_T <= 0:
            problems.append("backbone.sharpen_T must be positive")
        if self.mixup_alpha <= 0:
            problems.append("backbone.mixup_alpha must be positive")
        if self.k_augment < 1:
            problems.append("backbone.k_augment must be >= 1")
        if self.jitter_std < 0:
            problems.append("backbone.jitter_std must be nonnegative")
        if self.min_labeled_per_batch < 0:
            problems.append("backbone.min_labeled_per_batch must be >= 0")
        if self.ramp_epochs < 0:
            problems.append("backbone.ramp_epochs must be >= 0")
        if self.reg_prior < 0 or self.reg_entropy < 0 or self.mixmatch_prior < 0:
            problems.append("backbone regularizer weights must be nonnegative")
        if self.forced_lambda is not None and not 0.0 <= self.forced_lambda <= 1.0:
            problems.append("backbone.forced_lambda must lie in [0, 1]")
        return problems


class BackboneState:
    """Temporal-ensembling accumulator: EMA of logits per dataset row plus visit counts."""

    def __init__(self, n_rows, n_classes):
        self.ema = np.zeros((n_rows, n_classes))
        self.visits = np.zeros(n_rows, dtype=np.int64)
        self.steps = 0

    def targets(self, rows, gamma):
        """Bias-corrected ensemble logits for ``rows`` and a mask of rows that have one."""
        t = self.visits[rows]
        have = t > 0
        out = np.zeros((len(rows), self.ema.shape[1]))
        if have.any():
            corr = 1.0 - gamma ** t[have].astype(np.float64)
            out[have] = self.ema[rows[have]] / corr[:, None]
        return out, have

    def accumulate(self, rows, logits, gamma):
        self.ema[rows] = gamma * self.ema[rows] + (1.0 - gamma) * logits
        self.visits[rows] += 1


@dataclass
class SslBatch:
    """Inputs to one backbone step.

    ``t_lab`` holds soft targets for the labeled rows (one-hot given labels,
    or co-refined targets in two-network mode).  ``idx_*`` are dataset row
    ids, needed only by temporal ensembling.
    """
    x_lab: np.ndarray
    t_lab: np.ndarray
    x_unl: np.ndarray
    idx_lab: np.ndarray = None
    idx_unl: np.ndarray = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def sample_lambda(alpha, rng):
    lam = rng.beta(alpha, alpha)
    return max(lam, 1.0 - lam)


def mixup(x1, y1, x2, y2, alpha, rng, lam=None):
    """Convex combination ``lam * (x1, y1) + (1 - lam) * (x2, y2)`` with ``lam >= 0.5``.

    ``lam`` is drawn from Beta(alpha, alpha) and folded onto [0.5, 1] unless
    given explicitly.
    """
    if lam is None:
        if alpha <= 0:
            raise ValueError("mixup alpha must be positive")
        lam = sample_lambda(alpha, rng)
    return lam * x1 + (1.0 - lam) * x2, lam * y1 + (1.0 - lam) * y2, lam


def sharpen(p, T):
    """Temperature sharpening ``p^(1/T) / sum(p^(1/T))`` row-wise."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    if (p.sum(axis=1) <= 0).any():
        raise ValueError("cannot sharpen an all-zero vector")
    # in log space so tiny T does not underflow every entry
    with np.errstate(divide="ignore"):
        lp = np.log(p) / T
    lp -= lp.max(axis=1, keepdims=True)
    q = np.exp(lp)
    q /= q.sum(axis=1, keepdims=True)
    return q[0] if squeeze else q


def augment(x, jitter_std, rng, bounds=(0.0, 1.0)):
    """Additive Gaussian jitter, clamped to ``bounds`` (None = unbounded)."""
    if jitter_std < 0:
        raise ValueError("jitter_std must be nonnegative")
    if jitter_std == 0 or x.size == 0:
        return np.array(x, dtype=np.float64, copy=True)
    out = x + rng.normal(0.0, jitter_std, size=x.shape)
    if bounds is not None:
        np.clip(out, bounds[0], bounds[1], out=out)
    return out


def ramp_weight(lambda_u, progress, ramp_epochs):
    """Linear 0 -> lambda_u over the first ``ramp_epochs`` epochs of SSL training."""
    if ramp_epochs <= 0:
        return lambda_u
    return lambda_u * min(1.0, max(progress, 0.0) / ramp_epochs)


def softmax_backward(probs, grad_probs):
    """Chain rule through a row-wise softmax."""
    return probs * (grad_probs - (probs * grad_probs).sum(axis=1, keepdims=True))


def mse_probs_grad(probs, targets, denom):
    """Loss ``sum (p - t)^2 / denom`` and its gradient w.r.t. the logits behind ``p``."""
    diff = probs - targets
    loss = float((diff ** 2).sum() / denom)
    return loss, softmax_backward(probs, 2.0 * diff / denom)


def prior_penalty_grad(logits, probs):
    """``KL(uniform || mean prediction)`` over the batch, and its logit gradient."""
    n, c = probs.shape
    prior = np.full(c, 1.0 / c)
    mean_p = probs.mean(axis=0)
    loss = float((prior * (np.log(prior) - np.log(mean_p))).sum())
    grad_p = np.broadcast_to(-prior / (n * mean_p), probs.shape)
    return loss, softmax_backward(probs, grad_p)


def entropy_penalty_grad(logits, probs):
    """Mean prediction entropy over the batch, and its logit gradient."""
    n = probs.shape[0]
    logp = log_softmax(logits)
    loss = float(-(probs * logp).sum() / n)
    ent_row = (probs * logp).sum(axis=1, keepdims=True)
    return loss, -(probs * (logp - ent_row)) / n


def _descend(params, opt, x, grad_logits, pre):
    grads = backward(params, x, grad_logits, pre=pre, mean=False)
    sgd_step(params, grads, opt)
    if not params.is_finite():
        raise FloatingPointError("backbone step produced non-finite parameters")


# ---------------------------------------------------------------------------
# backbones
# ---------------------------------------------------------------------------

def ce_only_step(params, opt, x_lab, t_lab):
    """One SGD step on the mean cross-entropy of the labeled rows; no-op when empty."""
    if len(x_lab) == 0:
        return 0.0
    logits, pre = mlp_forward(params, x_lab, return_hidden=True)
    loss, g = ce_loss_and_grad(logits, t_lab)
    grads = backward(params, x_lab, g, pre=pre, mean=True)
    sgd_step(params, grads, opt)
    if not params.is_finite():
        raise FloatingPointError("ce step produced non-finite parameters")
    return float(loss.mean())


def temporal_ensembling_step(params, opt, state, batch, cfg, rng, progress=0.0, bounds=(0.0, 1.0)):
    """CE on labeled rows plus ramped MSE to bias-corrected EMA targets on all rows.

    Rows seen for the first time have no ensemble target yet and contribute
    no consistency term.  The EMA is updated with this step's (pre-update)
    logits once per visit.
    """
    n_x, n_u = len(batch.x_lab), len(batch.x_unl)
    n = n_x + n_u
    if n == 0:
        return 0.0
    rows = np.concatenate([np.asarray(batch.idx_lab, dtype=np.int64), np.asarray(batch.idx_unl, dtype=np.int64)])
    x = np.concatenate([batch.x_lab, batch.x_unl]) if n_u else batch.x_lab
    x = augment(x, cfg.jitter_std, rng, bounds)
    logits, pre = mlp_forward(params, x, return_hidden=True)
    c = logits.shape[1]
    g = np.zeros_like(logits)
    total = 0.0
    probs = None
    if n_x:
        ce, gce = ce_loss_and_grad(logits[:n_x], batch.t_lab)
        g[:n_x] = gce / n_x
        total += float(ce.mean())
    w = ramp_weight(cfg.lambda_u, progress, cfg.ramp_epochs)
    if w > 0:
        ens, have = state.targets(rows, cfg.ema_decay)
        if have.any():
            probs = softmax(logits)
            loss_c, gc = mse_probs_grad(probs[have], softmax(ens[have]), n * c)
            g[have] += w * gc
            total += w * loss_c
    _descend(params, opt, x, g, pre)
    state.accumulate(rows, logits, cfg.ema_decay)
    state.steps += 1
    return total


def guess_labels(guessers, x_unl, cfg, rng, bounds=(0.0, 1.0), sharpen_T=None):
    """Mean softmax over ``k_augment`` jittered copies and every network in ``guessers``.

    With ``sharpen_T`` the mean is temperature-sharpened.
    """
    acc = np.zeros((len(x_unl), guessers[0].w2.shape[0]))
    views = [augment(x_unl, cfg.jitter_std, rng, bounds) for _ in range(cfg.k_augment)]
    for p in guessers:
        for v in views:
            acc += softmax(mlp_forward(p, v))
    acc /= len(guessers) * len(views)
    return sharpen(acc, sharpen_T) if sharpen_T is not None else acc


def mixmatch_step(params, opt, batch, cfg, rng, progress=0.0, guessers=None, bounds=(0.0, 1.0)):
    """MixMatch-style update.

    Unlabeled rows get a sharpened guess averaged over ``k_augment`` jittered
    views (and over every network in ``guessers``).  Labeled and unlabeled
    rows are pooled, the pool is shuffled, and each row is mixed with one
    pool row using a single folded Beta(alpha, alpha) coefficient.  The loss
    is CE on the mixed labeled part plus ramped ``lambda_u`` times the
    per-element MSE on the mixed unlabeled part, plus ``mixmatch_prior``
    times the uniform-prior penalty over the whole mixed batch.
    """
    n_x, n_u = len(batch.x_lab), len(batch.x_unl)
    if n_x + n_u == 0:
        return 0.0
    guessers = guessers or [params]
    x_l = augment(batch.x_lab, cfg.jitter_std, rng, bounds)
    t_l = batch.t_lab
    if n_u:
        q = guess_labels(guessers, batch.x_unl, cfg, rng, bounds, cfg.sharpen_T)
        x_u = np.concatenate([augment(batch.x_unl, cfg.jitter_std, rng, bounds) for _ in range(cfg.k_augment)])
        t_u = np.tile(q, (cfg.k_augment, 1))
        all_x = np.concatenate([x_l, x_u])
        all_t = np.concatenate([t_l, t_u])
    else:
        all_x, all_t = x_l, t_l
    perm = rng.permutation(len(all_x))
    mixed_x, mixed_t, _ = mixup(all_x, all_t, all_x[perm], all_t[perm], cfg.mixup_alpha, rng, cfg.forced_lambda)

    logits, pre = mlp_forward(params, mixed_x, return_hidden=True)
    g = np.zeros_like(logits)
    total = 0.0
    if n_x:
        ce, gce = ce_loss_and_grad(logits[:n_x], mixed_t[:n_x])
        g[:n_x] = gce / n_x
        total += float(ce.mean())
    w = ramp_weight(cfg.lambda_u, progress, cfg.ramp_epochs)
    m_u = len(mixed_x) - n_x
    if m_u and w > 0:
        probs = softmax(logits[n_x:])
        loss_u, gu = mse_probs_grad(probs, mixed_t[n_x:], m_u * logits.shape[1])
        g[n_x:] = w * gu
        total += w * loss_u
    if cfg.mixmatch_prior > 0:
        lp, gp = prior_penalty_grad(logits, softmax(logits))
        g += cfg.mixmatch_prior * gp
        total += cfg.mixmatch_prior * lp
    _descend(params, opt, mixed_x, g, pre)
    return total


def pseudo_label_step(params, opt, batch, cfg, rng, guessers=None, bounds=(0.0, 1.0)):
    """Soft pseudo-labeling with MixUp and prior/entropy regularisation.

    Falls back to ``ce_only_step`` on the labeled rows when fewer than
    ``min_labeled_per_batch`` are available.
    """
    n_x, n_u = len(batch.x_lab), len(batch.x_unl)
    if n_x < cfg.min_labeled_per_batch:
        return ce_only_step(params, opt, batch.x_lab, batch.t_lab)
    guessers = guessers or [params]
    if n_u:
        pseudo = np.zeros((n_u, batch.t_lab.shape[1]))
        for p in guessers:
            pseudo += softmax(mlp_forward(p, batch.x_unl))
        pseudo /= len(guessers)
        x = np.concatenate([batch.x_lab, batch.x_unl])
        t = np.concatenate([batch.t_lab, pseudo])
    else:
        x, t = batch.x_lab, batch.t_lab
    x = augment(x, cfg.jitter_std, rng, bounds)
    perm = rng.permutation(len(x))
    mixed_x, mixed_t, _ = mixup(x, t, x[perm], t[perm], cfg.mixup_alpha, rng, cfg.forced_lambda)

    logits, pre = mlp_forward(params, mixed_x, return_hidden=True)
    n = len(mixed_x)
    ce, gce = ce_loss_and_grad(logits, mixed_t)
    g = gce / n
    total = float(ce.mean())
    if cfg.reg_prior > 0 or cfg.reg_entropy > 0:
        probs = softmax(logits)
        if cfg.reg_prior > 0:
            la, ga = prior_penalty_grad(logits, probs)
            g = g + cfg.reg_prior * ga
            total += cfg.reg_prior * la
        if cfg.reg_entropy > 0:
            lh, gh = entropy_penalty_grad(logits, probs)
            g = g + cfg.reg_entropy * gh
            total += cfg.reg_entropy * lh
    _descend(params, opt, mixed_x, g, pre)
    return total
