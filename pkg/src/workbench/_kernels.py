"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``WORKBENCH_DISABLE_NUMBA`` is
unset (or ``0``).  Both paths compute the same quantities; results agree to
floating-point rounding, not bitwise, so determinism guarantees hold within
one backend.
"""

import math
import os

import numpy as np

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("WORKBENCH_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def softmax_xent_numpy(logits, targets):
    """Per-row loss ``-sum t * log_softmax(z)`` and the softmax probabilities."""
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(targets * logp).sum(axis=1)
    return loss, np.exp(logp)


def _softmax_xent_loop(logits, targets):
    n, c = logits.shape
    loss = np.empty(n)
    probs = np.empty((n, c))
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            s += math.exp(logits[i, j] - m)
        lse = math.log(s)
        acc = 0.0
        for j in range(c):
            lp = logits[i, j] - m - lse
            probs[i, j] = math.exp(lp)
            acc -= targets[i, j] * lp
        loss[i] = acc
    return loss, probs


# ---------------------------------------------------------------------------
# two-component 1-D Gaussian mixture EM
# ---------------------------------------------------------------------------

def em_gmm2_numpy(x, means, variances, weights, tol, max_iter, var_floor):
    """Run EM for a two-component 1-D Gaussian mixture.

    Returns ``(means, variances, weights, loglik_history, resp0_of_last_estep)``.
    ``loglik_history[k]`` is the data log-likelihood under the parameters
    after ``k`` M-steps (entry 0 is the initial parameters).
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.array(means, dtype=np.float64)
    var = np.array(variances, dtype=np.float64)
    w = np.array(weights, dtype=np.float64)
    n = x.shape[0]
    history = []

    def estep(mu, var, w):
        # log(w_k N(x | mu_k, var_k)) per component, then log-sum-exp
        lj = (np.log(w)[None, :] - 0.5 * (_LOG_2PI + np.log(var))[None, :]
              - 0.5 * (x[:, None] - mu[None, :]) ** 2 / var[None, :])
        m = lj.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(lj - m).sum(axis=1))
        resp = np.exp(lj - lse[:, None])
        return resp, lse.sum()

    resp, ll = estep(mu, var, w)
    history.append(ll)
    for _ in range(max_iter):
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        w = nk / n
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk
        var = np.maximum(var, var_floor)
        w = np.maximum(w, 1e-300)
        w = w / w.sum()
        resp, ll_new = estep(mu, var, w)
        history.append(ll_new)
        if ll_new - ll < tol:
            break
        ll = ll_new
    return mu, var, w, np.array(history), resp[:, 0].copy()


def _em_gmm2_loop(x, means, variances, weights, tol, max_iter, var_floor):
    n = x.shape[0]
    mu0, mu1 = means[0], means[1]
    v0, v1 = variances[0], variances[1]
    w0, w1 = weights[0], weights[1]
    resp = np.empty(n)
    history = np.empty(max_iter + 1)

    # E-step: responsibilities for component 0 and total log-likelihood
    ll = 0.0
    lw0 = math.log(w0) - 0.5 * (_LOG_2PI + math.log(v0))
    lw1 = math.log(w1) - 0.5 * (_LOG_2PI + math.log(v1))
    for i in range(n):
        a = lw0 - 0.5 * (x[i] - mu0) ** 2 / v0
        b = lw1 - 0.5 * (x[i] - mu1) ** 2 / v1
        m = a if a > b else b
        lse = m + math.log(math.exp(a - m) + math.exp(b - m))
        resp[i] = math.exp(a - lse)
        ll += lse
    history[0] = ll
    count = 1
    for _ in range(max_iter):
        n0 = 0.0
        n1 = 0.0
        s0 = 0.0
        s1 = 0.0
        for i in range(n):
            r = resp[i]
            n0 += r
            n1 += 1.0 - r
            s0 += r * x[i]
            s1 += (1.0 - r) * x[i]
        n0 = max(n0, 1e-300)
        n1 = max(n1, 1e-300)
        mu0 = s0 / n0
        mu1 = s1 / n1
        q0 = 0.0
        q1 = 0.0
        for i in range(n):
            r = resp[i]
            q0 += r * (x[i] - mu0) ** 2
            q1 += (1.0 - r) * (x[i] - mu1) ** 2
        v0 = max(q0 / n0, var_floor)
        v1 = max(q1 / n1, var_floor)
        w0 = max(n0 / n, 1e-300)
        w1 = max(n1 / n, 1e-300)
        tot = w0 + w1
        w0 /= tot
        w1 /= tot

        ll_new = 0.0
        lw0 = math.log(w0) - 0.5 * (_LOG_2PI + math.log(v0))
        lw1 = math.log(w1) - 0.5 * (_LOG_2PI + math.log(v1))
        for i in range(n):
            a = lw0 - 0.5 * (x[i] - mu0) ** 2 / v0
            b = lw1 - 0.5 * (x[i] - mu1) ** 2 / v1
            m = a if a > b else b
            lse = m + math.log(math.exp(a - m) + math.exp(b - m))
            resp[i] = math.exp(a - lse)
            ll_new += lse
        history[count] = ll_new
        count += 1
        if ll_new - ll < tol:
            break
        ll = ll_new
    mu = np.empty(2)
    var = np.empty(2)
    w = np.empty(2)
    mu[0], mu[1] = mu0, mu1
    var[0], var[1] = v0, v1
    w[0], w[1] = w0, w1
    return mu, var, w, history[:count].copy(), resp


if _HAVE_NUMBA:
    softmax_xent_numba = njit(cache=True)(_softmax_xent_loop)
    _em_gmm2_numba = njit(cache=True)(_em_gmm2_loop)

    def em_gmm2_numba(x, means, variances, weights, tol, max_iter, var_floor):
        return _em_gmm2_numba(np.ascontiguousarray(x, dtype=np.float64),
                              np.asarray(means, dtype=np.float64),
                              np.asarray(variances, dtype=np.float64),
                              np.asarray(weights, dtype=np.float64),
                              float(tol), int(max_iter), float(var_floor))
else:  # pragma: no cover
    softmax_xent_numba = None
    em_gmm2_numba = None


def softmax_xent(logits, targets):
    if USE_NUMBA:
        return softmax_xent_numba(np.ascontiguousarray(logits, dtype=np.float64),
                                  np.ascontiguousarray(targets, dtype=np.float64))
    return softmax_xent_numpy(logits, targets)


def em_gmm2(x, means, variances, weights, tol, max_iter, var_floor):
    if USE_NUMBA:
        return em_gmm2_numba(x, means, variances, weights, tol, max_iter, var_floor)
    return em_gmm2_numpy(x, means, variances, weights, tol, max_iter, var_floor)
