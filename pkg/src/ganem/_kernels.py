"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``GANEM_NUMBA`` is not
set to ``0``.  Both paths are exported under ``numba_impl`` / ``numpy_impl``
so the benchmark and the tests can compare them directly.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("GANEM_NUMBA", "1") != "0"


# ---------------------------------------------------------------- numpy path


def _np_leaky_relu(x, slope):
    return np.where(x > 0.0, x, slope * x)


def _np_leaky_relu_grad(x, g, slope):
    return np.where(x > 0.0, g, slope * g)


def _np_rmsprop_update(param, grad, acc, lr, decay, eps):
    acc *= decay
    acc += (1.0 - decay) * grad * grad
    param -= lr * grad / np.sqrt(acc + eps)


def _np_clip_inplace(param, c):
    np.clip(param, -c, c, out=param)


def _np_sq_dists(X, C):
    # explicit differences; the expanded |x|^2 - 2x.c + |c|^2 form loses
    # precision for near-identical points
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _np_assign_nearest(X, C):
    d = _np_sq_dists(X, C)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(len(X)), labels]


def _np_diag_gauss_logpdf(X, means, variances):
    diff = X[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff / variances[None, :, :], axis=2)
    logdet = np.sum(np.log(variances), axis=1)
    d = X.shape[1]
    return -0.5 * (quad + logdet[None, :] + d * np.log(2.0 * np.pi))


def _np_confusion(pred, truth, k):
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (pred, truth), 1)
    return table


def _np_mean_pool2(images):
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


numpy_impl = SimpleNamespace(
    leaky_relu=_np_leaky_relu,
    leaky_relu_grad=_np_leaky_relu_grad,
    rmsprop_update=_np_rmsprop_update,
    clip_inplace=_np_clip_inplace,
    sq_dists=_np_sq_dists,
    assign_nearest=_np_assign_nearest,
    diag_gauss_logpdf=_np_diag_gauss_logpdf,
    confusion=_np_confusion,
    mean_pool2=_np_mean_pool2,
)


# ---------------------------------------------------------------- numba path

if _HAVE_NUMBA:

    @njit(cache=True)
    def _nb_leaky_relu_flat(x, slope, out):
        for i in range(x.size):
            v = x[i]
            out[i] = v if v > 0.0 else slope * v

    @njit(cache=True)
    def _nb_leaky_relu_grad_flat(x, g, slope, out):
        for i in range(x.size):
            out[i] = g[i] if x[i] > 0.0 else slope * g[i]

    @njit(cache=True)
    def _nb_rmsprop_flat(param, grad, acc, lr, decay, eps):
        for i in range(param.size):
            gi = grad[i]
            a = decay * acc[i] + (1.0 - decay) * gi * gi
            acc[i] = a
            param[i] -= lr * gi / np.sqrt(a + eps)

    @njit(cache=True)
    def _nb_clip_flat(param, c):
        for i in range(param.size):
            v = param[i]
            if v > c:
                param[i] = c
            elif v < -c:
                param[i] = -c

    @njit(cache=True)
    def _nb_sq_dists(X, C):
        n, d = X.shape
        k = C.shape[0]
        out = np.empty((n, k))
        for i in range(n):
            for j in range(k):
                s = 0.0
                for t in range(d):
                    diff = X[i, t] - C[j, t]
                    s += diff * diff
                out[i, j] = s
        return out

    @njit(cache=True)
    def _nb_assign_nearest(X, C):
        d = _nb_sq_dists(X, C)
        n, k = d.shape
        labels = np.empty(n, dtype=np.int64)
        best = np.empty(n)
        for i in range(n):
            b = 0
            for j in range(1, k):
                if d[i, j] < d[i, b]:
                    b = j
            labels[i] = b
            best[i] = d[i, b]
        return labels, best

    @njit(cache=True)
    def _nb_diag_gauss_logpdf(X, means, variances):
        n, d = X.shape
        k = means.shape[0]
        log2pi = np.log(2.0 * np.pi)
        logdet = np.zeros(k)
        for j in range(k):
            for t in range(d):
                logdet[j] += np.log(variances[j, t])
        out = np.empty((n, k))
        for i in range(n):
            for j in range(k):
                q = 0.0
                for t in range(d):
                    diff = X[i, t] - means[j, t]
                    q += diff * diff / variances[j, t]
                out[i, j] = -0.5 * (q + logdet[j] + d * log2pi)
        return out

    @njit(cache=True)
    def _nb_confusion(pred, truth, k):
        table = np.zeros((k, k), dtype=np.int64)
        for i in range(pred.size):
            table[pred[i], truth[i]] += 1
        return table

    @njit(cache=True)
    def _nb_mean_pool2(images):
        n, h, w = images.shape
        out = np.empty((n, h // 2, w // 2))
        for s in range(n):
            for r in range(h // 2):
                for c in range(w // 2):
                    out[s, r, c] = 0.25 * (
                        images[s, 2 * r, 2 * c]
                        + images[s, 2 * r, 2 * c + 1]
                        + images[s, 2 * r + 1, 2 * c]
                        + images[s, 2 * r + 1, 2 * c + 1]
                    )
        return out

    def _nb_leaky_relu(x, slope):
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty_like(x)
        _nb_leaky_relu_flat(x.reshape(-1), float(slope), out.reshape(-1))
        return out

    def _nb_leaky_relu_grad(x, g, slope):
        x = np.ascontiguousarray(x, dtype=np.float64)
        g = np.ascontiguousarray(g, dtype=np.float64)
        out = np.empty_like(x)
        _nb_leaky_relu_grad_flat(x.reshape(-1), g.reshape(-1), float(slope), out.reshape(-1))
        return out

    def _nb_rmsprop_update(param, grad, acc, lr, decay, eps):
        # in-place on contiguous parameter buffers only
        _nb_rmsprop_flat(
            param.reshape(-1),
            np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
            acc.reshape(-1),
            float(lr),
            float(decay),
            float(eps),
        )

    def _nb_clip_inplace(param, c):
        _nb_clip_flat(param.reshape(-1), float(c))

    def _nb_confusion_wrapper(pred, truth, k):
        return _nb_confusion(
            np.ascontiguousarray(pred, dtype=np.int64),
            np.ascontiguousarray(truth, dtype=np.int64),
            int(k),
        )

    def _f64(a):
        return np.ascontiguousarray(a, dtype=np.float64)

    numba_impl = SimpleNamespace(
        leaky_relu=_nb_leaky_relu,
        leaky_relu_grad=_nb_leaky_relu_grad,
        rmsprop_update=_nb_rmsprop_update,
        clip_inplace=_nb_clip_inplace,
        sq_dists=lambda X, C: _nb_sq_dists(_f64(X), _f64(C)),
        assign_nearest=lambda X, C: _nb_assign_nearest(_f64(X), _f64(C)),
        diag_gauss_logpdf=lambda X, m, v: _nb_diag_gauss_logpdf(_f64(X), _f64(m), _f64(v)),
        confusion=_nb_confusion_wrapper,
        mean_pool2=lambda images: _nb_mean_pool2(_f64(images)),
    )
else:  # pragma: no cover
    numba_impl = numpy_impl


def active():
    """Kernel namespace selected by the environment at call time."""
    return numba_impl if numba_enabled() else numpy_impl


def leaky_relu(x, slope):
    return active().leaky_relu(x, slope)


def leaky_relu_grad(x, g, slope):
    return active().leaky_relu_grad(x, g, slope)


def rmsprop_update(param, grad, acc, lr, decay, eps):
    active().rmsprop_update(param, grad, acc, lr, decay, eps)


def clip_inplace(param, c):
    active().clip_inplace(param, c)


def sq_dists(X, C):
    return active().sq_dists(X, C)


def assign_nearest(X, C):
    return active().assign_nearest(X, C)


def diag_gauss_logpdf(X, means, variances):
    return active().diag_gauss_logpdf(X, means, variances)


def confusion(pred, truth, k):
    return active().confusion(pred, truth, k)


def mean_pool2(images):
    return active().mean_pool2(images)
