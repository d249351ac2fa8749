"""Exact discrete verifiers for the M-step theory, and classical baselines.

Discrete instances live on a finite support of S points.  Divergences use
the 0·log 0 = 0 convention and accept unnormalised non-negative measures.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _kernels

log = logging.getLogger(__name__)

LOG2 = np.log(2.0)


# ------------------------------------------------------------------ divergences


def _xlogy_ratio(p, q):
    """Elementwise p*log(p/q) with 0·log(0/q) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    out = np.zeros(np.broadcast(p, q).shape)
    m = p > 0
    with np.errstate(divide="ignore"):
        out[m] = p[m] * (np.log(p[m]) - np.log(np.broadcast_to(q, out.shape)[m]))
    return out


def kl(p, q) -> float:
    """KL(p || q) for non-negative measures; +inf when p charges a q-null point."""
    return float(np.sum(_xlogy_ratio(p, q)))


def jsd(p, q) -> float:
    """Half the sum of KL divergences to the midpoint measure.

    For unnormalised inputs this is the quantity produced by the
    optimal-discriminator algebra, not a divergence between probability laws.
    """
    m = 0.5 * (np.asarray(p, dtype=np.float64) + np.asarray(q, dtype=np.float64))
    return 0.5 * (kl(p, m) + kl(q, m))


def _check_distribution(p, name, tol=1e-12):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"{name} is not a probability vector (sum={p.sum()!r})")
    return p


# ------------------------------------------------------------------ game instances


@dataclass
class DiscreteGameInstance:
    """Real law over S points, cluster weights (K, S) and fake laws (K, S)."""

    p_real: np.ndarray
    weights: np.ndarray
    p_fake: np.ndarray

    def __post_init__(self):
        self.p_real = _check_distribution(self.p_real, "p_real")
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.p_fake = np.atleast_2d(np.asarray(self.p_fake, dtype=np.float64))
        s = self.p_real.size
        if self.weights.shape[1] != s or self.p_fake.shape != self.weights.shape:
            raise ValueError("weights and fake laws must be (K, S) with S matching p_real")
        if np.any((self.weights < 0) | (self.weights > 1)):
            raise ValueError("weights must lie in [0, 1]")
        for i, row in enumerate(self.p_fake):
            _check_distribution(row, f"p_fake[{i}]")

    @property
    def n_clusters(self) -> int:
        return self.weights.shape[0]

    def weighted_real(self, i) -> np.ndarray:
        """Unnormalised w_i·P_r."""
        return self.weights[i] * self.p_real


def reweighted_distribution(p_real, w_i, normalize=True):
    """w_i·P_r, divided by its mass Z when ``normalize``; returns (measure, Z)."""
    m = np.asarray(w_i, dtype=np.float64) * np.asarray(p_real, dtype=np.float64)
    z = float(m.sum())
    if normalize:
        if z <= 0:
            raise ValueError("cluster weight has zero mass under P_r")
        m = m / z
    return m, z


@dataclass
class OptimalDiscriminator:
    values: np.ndarray  # NaN at excluded points
    excluded: np.ndarray  # bool mask of points where both measures vanish


def optimal_discriminator(inst: DiscreteGameInstance, i: int) -> OptimalDiscriminator:
    pr = inst.weighted_real(i)
    pf = inst.p_fake[i]
    denom = pr + pf
    excluded = denom <= 0
    if excluded.any():
        log.warning("cluster %d: %d support points carry no mass and are excluded", i, excluded.sum())
    values = np.full(pr.shape, np.nan)
    values[~excluded] = pr[~excluded] / denom[~excluded]
    return OptimalDiscriminator(values, excluded)


def game_value(inst: DiscreteGameInstance, i: int, d) -> float:
    """Per-cluster objective sum_x w_i P_r log D + P_fi log(1 - D), with 0·log 0 = 0."""
    pr = inst.weighted_real(i)
    pf = inst.p_fake[i]
    d = np.asarray(d, dtype=np.float64)
    total = 0.0
    with np.errstate(divide="ignore"):
        m = pr > 0
        total += float(np.sum(pr[m] * np.log(d[m])))
        m = pf > 0
        total += float(np.sum(pf[m] * np.log1p(-d[m])))
    return total


@dataclass
class IdentityCheck:
    value_at_optimum: float
    closed_form: float
    residual: float
    jsd: float


def game_value_identity(inst: DiscreteGameInstance, i: int, w_const: float | None = None) -> IdentityCheck:
    """Compare L_i(D*) against -(w_i + 1)·log 2 + 2·JSD(w_i P_r, P_fi)."""
    w = inst.weights[i]
    if w_const is None:
        w_const = float(w[0])
    if not np.allclose(w, w_const, rtol=0, atol=0):
        raise ValueError("identity requires a constant cluster weight over the support")
    dstar = optimal_discriminator(inst, i)
    d = np.where(dstar.excluded, 0.5, dstar.values)
    direct = game_value(inst, i, d)
    div = jsd(inst.weighted_real(i), inst.p_fake[i])
    closed = -(w_const + 1.0) * LOG2 + 2.0 * div
    return IdentityCheck(direct, closed, direct - closed, div)


def brute_force_discriminator(inst: DiscreteGameInstance, i: int, tol=1e-10) -> np.ndarray:
    """Maximise the per-cluster objective point by point with golden-section search.

    The objective separates over support points, and each term is concave in
    D(x), so a bracketing search on (0, 1) per point finds the global optimum.
    """
    pr = inst.weighted_real(i)
    pf = inst.p_fake[i]
    out = np.empty(pr.size)
    g = (np.sqrt(5.0) - 1.0) / 2.0
    for s in range(pr.size):
        a, b = pr[s], pf[s]
        if a == 0 and b == 0:
            out[s] = np.nan
            continue
        if b == 0:
            out[s] = 1.0
            continue
        if a == 0:
            out[s] = 0.0
            continue

        def f(d):
            return a * np.log(d) + b * np.log1p(-d)

        lo, hi = 0.0, 1.0
        x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
        f1, f2 = f(x1), f(x2)
        while hi - lo > tol:
            if f1 < f2:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + g * (hi - lo)
                f2 = f(x2)
            else:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - g * (hi - lo)
                f1 = f(x1)
        out[s] = 0.5 * (lo + hi)
    return out


def random_instance(rng, support=8, n_clusters=1, constant_weight=True, sparsity=0.0):
    """Random game instance; ``sparsity`` zeroes that fraction of each law's mass points."""

    def law():
        p = rng.random(support)
        if sparsity:
            p[rng.random(support) < sparsity] = 0.0
            if p.sum() == 0:
                p[rng.integers(support)] = 1.0
        return p / p.sum()

    if constant_weight:
        weights = np.repeat(rng.uniform(0.05, 1.0, size=(n_clusters, 1)), support, axis=1)
    else:
        weights = rng.uniform(0.0, 1.0, size=(n_clusters, support))
    return DiscreteGameInstance(law(), weights, np.stack([law() for _ in range(n_clusters)]))


# ------------------------------------------------------------------ Q function


@dataclass
class QValue:
    q: float
    q1: float
    q2: float
    infinite: bool = False


def q2_value(w, phi, p_real=None) -> float:
    w = np.asarray(w, dtype=np.float64)
    pr = _row_weights(w, p_real)
    with np.errstate(divide="ignore"):
        lp = np.log(np.asarray(phi, dtype=np.float64))
    terms = np.where(w > 0, w * lp[None, :], 0.0)
    return float(pr @ terms.sum(axis=1))


def _row_weights(w, p_real):
    n = w.shape[0]
    if p_real is None:
        return np.full(n, 1.0 / n)
    return _check_distribution(p_real, "p_real", tol=1e-9)


def exact_q(w, phi, likelihood, p_real=None) -> QValue:
    """Q = Q1 + Q2 for a tabulated model.

    ``likelihood[n, i]`` is P(x_n | c = i); rows of ``w`` are posteriors.
    Expectations over x use ``p_real`` (uniform over rows by default).
    """
    w = np.asarray(w, dtype=np.float64)
    lik = np.asarray(likelihood, dtype=np.float64)
    if lik.shape != w.shape:
        raise ValueError(f"likelihood table {lik.shape} does not match w {w.shape}")
    pr = _row_weights(w, p_real)
    bad = (w > 0) & (lik <= 0)
    with np.errstate(divide="ignore"):
        ll = np.log(lik)
    q1_terms = np.where(w > 0, w * np.where(bad, 0.0, ll), 0.0)
    q1 = float(pr @ q1_terms.sum(axis=1))
    q2 = q2_value(w, phi, p_real)
    infinite = bool(np.any(bad[pr > 0])) or not np.isfinite(q2)
    if np.any(bad[pr > 0]):
        log.warning("zero likelihood under nonzero posterior weight; Q1 is -inf")
        q1 = -np.inf
    return QValue(q1 + q2, q1, q2, infinite)


def bayes_posterior(likelihood, phi) -> np.ndarray:
    """Exact E-step: P(c=i|x) proportional to P(x|c=i)·phi_i."""
    joint = np.asarray(likelihood, dtype=np.float64) * np.asarray(phi, dtype=np.float64)[None, :]
    z = joint.sum(axis=1, keepdims=True)
    if np.any(z <= 0):
        raise ValueError("a sample has zero probability under every cluster")
    return joint / z


def discrete_gan_em(p_real, init_fake, phi=None, n_iter=20):
    """EM on a finite support where each cluster's "generator" is a tabulated law.

    The M-step fits each fake law by exact MLE on the reweighted real law, which
    is what an ideal generator minimising KL(P_ri || P_fi) reaches.  Returns the
    final (phi, fake laws) and per-iteration records of Q before/after the
    M-step and the data log-likelihood.
    """
    from .emcore import update_prior

    p_real = _check_distribution(p_real, "p_real")
    fake = np.array(init_fake, dtype=np.float64)
    k = fake.shape[0]
    phi = np.full(k, 1.0 / k) if phi is None else np.asarray(phi, dtype=np.float64)
    trace = []
    support = np.flatnonzero(p_real > 0)
    for _ in range(n_iter):
        lik = fake[:, support].T  # (S', K)
        w = bayes_posterior(lik, phi)
        pr = p_real[support]
        q_before = exact_q(w, phi, lik, pr)
        new_phi = update_prior(w, sample_weights=pr)
        new_fake = np.zeros_like(fake)
        for i in range(k):
            m = np.zeros(p_real.size)
            m[support] = w[:, i] * pr
            if m.sum() > 0:
                new_fake[i] = m / m.sum()
            else:
                new_fake[i] = fake[i]
        q_after = exact_q(w, new_phi, new_fake[:, support].T, pr)
        mix = (new_fake[:, support] * new_phi[:, None]).sum(axis=0)
        trace.append({"q_before": q_before.q, "q_after": q_after.q, "loglik": float(pr @ np.log(mix))})
        phi, fake = new_phi, new_fake
    return phi, fake, trace


# ------------------------------------------------------------------ K-means


@dataclass
class KMeansFit:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_trace: list
    reseeded: int = 0


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d = _kernels.sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d), rng.random() * total))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d = np.minimum(d, _kernels.sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(X, centroids, max_iter, tol):
    k = len(centroids)
    trace = []
    reseeded = 0
    labels, dist = _kernels.assign_nearest(X, centroids)
    trace.append(float(dist.sum()))
    for _ in range(max_iter):
        new = np.empty_like(centroids)
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
            else:
                # empty cluster: move it onto the point worst served by the others
                far = int(np.argmax(dist))
                new[j] = X[far]
                dist[far] = 0.0
                reseeded += 1
        labels, dist = _kernels.assign_nearest(X, new)
        trace.append(float(dist.sum()))
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        if shift <= tol:
            break
    return labels, centroids, trace, reseeded


def kmeans_fit(X, k, seed=0, n_init=10, max_iter=300, tol=0.0) -> KMeansFit:
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) < k:
        raise ValueError(f"need at least {k} samples, got {len(X)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, cents, trace, reseeded = _lloyd(X, _kmeanspp(X, k, rng), max_iter, tol)
        fit = KMeansFit(labels, cents, trace[-1], trace, reseeded)
        if best is None or fit.inertia < best.inertia:
            best = fit
    if best.reseeded:
        log.info("k-means re-seeded %d empty clusters", best.reseeded)
    return best


def brute_force_kmeans(X, k=2) -> tuple[float, np.ndarray]:
    """Minimum inertia over every assignment of points to k nonempty clusters."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    best, best_labels = np.inf, None
    for labels in itertools.product(range(k), repeat=n):
        labels = np.array(labels)
        if len(np.unique(labels)) < k:
            continue
        inertia = sum(float(np.sum((X[labels == j] - X[labels == j].mean(axis=0)) ** 2)) for j in range(k))
        if inertia < best:
            best, best_labels = inertia, labels
    return best, best_labels


# ------------------------------------------------------------------ GMM


@dataclass
class GmmModel:
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d) diagonal or (K, d, d) full
    weights: np.ndarray  # (K,)
    covariance_type: str = "diag"

    def log_joint(self, X) -> np.ndarray:
        """log phi_i + log N(x | mu_i, Sigma_i), shape (N, K)."""
        X = np.asarray(X, dtype=np.float64)
        if self.covariance_type == "diag":
            lp = _kernels.diag_gauss_logpdf(X, self.means, self.covariances)
        else:
            lp = np.empty((len(X), len(self.means)))
            d = X.shape[1]
            for j, (mu, cov) in enumerate(zip(self.means, self.covariances)):
                chol = np.linalg.cholesky(cov)
                sol = np.linalg.solve(chol, (X - mu).T)
                lp[:, j] = -0.5 * (np.sum(sol**2, axis=0) + d * np.log(2 * np.pi)) - np.sum(np.log(np.diag(chol)))
        with np.errstate(divide="ignore"):
            return lp + np.log(self.weights)[None, :]

    def responsibilities(self, X):
        lj = self.log_joint(X)
        lse = logsumexp(lj, axis=1, keepdims=True)
        return np.exp(lj - lse), float(np.mean(lse))


@dataclass
class GmmFit:
    model: GmmModel
    w: np.ndarray
    loglik_trace: list  # mean per-sample log-likelihood
    floored: int = 0
    converged: bool = False
    history: list = field(default_factory=list)


def _gmm_m_step(X, resp, covariance_type, floor):
    nk = resp.sum(axis=0)
    n, d = X.shape
    floored = 0
    nk_safe = np.where(nk > 0, nk, 1.0)
    means = (resp.T @ X) / nk_safe[:, None]
    weights = nk / n
    if covariance_type == "diag":
        cov = (resp.T @ (X * X)) / nk_safe[:, None] - means**2
        cov = np.maximum(cov, 0.0)
        low = cov < floor
        floored = int(low.sum())
        cov[low] = floor
    else:
        cov = np.empty((len(nk), d, d))
        for j in range(len(nk)):
            diff = X - means[j]
            c = (resp[:, j, None] * diff).T @ diff / nk_safe[j]
            c = 0.5 * (c + c.T)
            ev = np.linalg.eigvalsh(c)
            if ev.min() < floor:
                floored += 1
                c = c + (floor - min(ev.min(), 0.0)) * np.eye(d)
            cov[j] = c
    return GmmModel(means, cov, weights, covariance_type), floored


def gmm_em_fit(X, k, seed=0, covariance_type="diag", max_iter=500, tol=1e-10, var_floor=1e-6, n_init=1) -> GmmFit:
    """Classical EM for a Gaussian mixture, initialised from K-means.

    Stops when the mean log-likelihood improves by less than ``tol``.  A
    variance floor guards against collapse; floored entries are counted.
    """
    X = np.asarray(X, dtype=np.float64)
    if covariance_type not in ("diag", "full"):
        raise ValueError(f"unknown covariance type {covariance_type!r}")
    if len(X) <= k:
        raise ValueError(f"need more than {k} samples, got {len(X)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        km = kmeans_fit(X, k, seed=rng, n_init=1)
        resp = np.zeros((len(X), k))
        resp[np.arange(len(X)), km.labels] = 1.0
        model, floored = _gmm_m_step(X, resp, covariance_type, var_floor)
        trace = []
        converged = False
        for _ in range(max_iter):
            resp, ll = model.responsibilities(X)
            trace.append(ll)
            if len(trace) > 1 and trace[-1] - trace[-2] < tol:
                converged = True
                break
            model, f = _gmm_m_step(X, resp, covariance_type, var_floor)
            floored += f
        fit = GmmFit(model, resp, trace, floored, converged)
        if best is None or fit.loglik_trace[-1] > best.loglik_trace[-1]:
            best = fit
    if best.floored:
        log.warning("GMM variance floor %.1e applied %d times", var_floor, best.floored)
    return best
