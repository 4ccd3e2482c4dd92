"""Two-layer ReLU MLP, softmax cross-entropy and SGD with momentum.

Everything is float64 numpy.  Gradients are hand-derived for this one
architecture; there is no autodiff.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


@dataclass
class MlpParams:
    w1: np.ndarray  # [hidden, input]
    b1: np.ndarray  # [hidden]
    w2: np.ndarray  # [classes, hidden]
    b2: np.ndarray  # [classes]

    @property
    def dims(self):
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def copy(self):
        return MlpParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self):
        return MlpParams(*(np.zeros_like(a) for a in self.arrays()))

    def is_finite(self):
        return all(np.isfinite(a).all() for a in self.arrays())

    def equal(self, other):
        """Bitwise equality of every array."""
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class OptState:
    velocity: MlpParams
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def copy(self):
        return OptState(self.velocity.copy(), self.lr, self.momentum, self.weight_decay)


def init_mlp(n_input, n_hidden, n_classes, rng):
    """Glorot-uniform weights, zero biases."""
    def glorot(fan_out, fan_in):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_out, fan_in))

    return MlpParams(
        w1=glorot(n_hidden, n_input),
        b1=np.zeros(n_hidden),
        w2=glorot(n_classes, n_hidden),
        b2=np.zeros(n_classes),
    )


def init_opt(params, lr=0.02, momentum=0.9, weight_decay=5e-4):
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
    return OptState(params.zeros_like(), lr, momentum, weight_decay)


def _check_batch(params, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.w1.shape[1]:
        raise ShapeError(f"batch shape {batch.shape} does not match input dimension {params.w1.shape[1]}")
    return batch


def mlp_forward(params, batch, return_hidden=False):
    """Logits ``relu(x W1^T + b1) W2^T + b2``.

    With ``return_hidden`` the pre-activation of the hidden layer is returned
    as well, so ``backward`` can skip recomputing it.
    """
    x = _check_batch(params, batch)
    pre = x @ params.w1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.w2.T + params.b2
    if return_hidden:
        return logits, pre
    return logits


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def ce_loss_and_grad(logits, targets):
    """Per-sample soft-target cross-entropy and its gradient w.r.t. logits.

    ``targets`` is an ``[n, classes]`` matrix whose rows lie on the simplex.
    The returned gradient is per sample (``softmax - targets``), not divided
    by ``n``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} must be equal 2-D shapes")
    if logits.shape[0] < 1:
        raise ShapeError("need at least one sample")
    loss, probs = _kernels.softmax_xent(logits, targets)
    return loss, probs - targets


def backward(params, batch, grad_logits, pre=None, mean=True):
    """Reverse-mode gradients of the loss w.r.t. every parameter.

    ``grad_logits`` row ``i`` is the derivative of sample ``i``'s loss w.r.t.
    its logits.  With ``mean=True`` the result is the gradient of the mean
    loss over the batch; with ``mean=False`` ``grad_logits`` is taken to be
    the derivative of the total scalar objective and is used unscaled.
    """
    x = _check_batch(params, batch)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (x.shape[0], params.w2.shape[0]):
        raise ShapeError(f"grad_logits shape {g.shape} does not match ({x.shape[0]}, {params.w2.shape[0]})")
    if pre is None:
        pre = x @ params.w1.T + params.b1
    if mean:
        g = g / x.shape[0]
    hidden = np.maximum(pre, 0.0)
    gw2 = g.T @ hidden
    gb2 = g.sum(axis=0)
    dh = g @ params.w2
    dh[pre <= 0.0] = 0.0
    gw1 = dh.T @ x
    gb1 = dh.sum(axis=0)
    return MlpParams(gw1, gb1, gw2, gb2)


def sgd_step(params, grads, state):
    """One momentum-SGD step with coupled weight decay, in place.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``.
    """
    for g in grads.arrays():
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient passed to sgd_step")
    for p, g, v in zip(params.arrays(), grads.arrays(), state.velocity.arrays()):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape} and velocity {v.shape} disagree")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= state.lr * v
    return params, state


def predict_proba(params, batch, chunk=4096):
    x = np.asarray(batch, dtype=np.float64)
    out = [softmax(mlp_forward(params, x[i:i + chunk])) for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.w2.shape[0]))
