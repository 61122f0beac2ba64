"""Full-covariance Gaussian mixture fitted by EM.

Descriptors are clustered raw (no PCA, no standardization): the embedding
half is already unit-hypersphere constrained. Initialization is k-means++
seeded hard assignment; covariances carry a small ridge; a collapsing
component (weight below 1e-8) is re-seeded once before giving up.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg


class GmmError(ValueError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray        # (K,) nonnegative, sums to 1
    means: np.ndarray          # (K, D)
    covariances: np.ndarray    # (K, D, D) symmetric positive-definite
    loglik_trace: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0

    @property
    def n_components(self):
        return len(self.weights)


def _log_gaussian(X, mean, cov):
    """Row-wise log density via Cholesky; raises if cov is not SPD."""
    D = X.shape[1]
    L = linalg.cholesky(cov, lower=True)
    diff = (X - mean).T
    sol = linalg.solve_triangular(L, diff, lower=True)
    return (-0.5 * D * np.log(2 * np.pi)
            - np.log(np.diag(L)).sum()
            - 0.5 * (sol ** 2).sum(axis=0))


def _log_resp(X, weights, means, covs):
    N, K = X.shape[0], len(weights)
    lp = np.empty((N, K))
    for k in range(K):
        lp[:, k] = np.log(weights[k]) + _log_gaussian(X, means[k], covs[k])
    norm = np.logaddexp.reduce(lp, axis=1)
    return lp - norm[:, None], norm


def kmeanspp_centers(X, K, rng):
    """Standard k-means++ seeding; selection probabilities are scale invariant."""
    N = X.shape[0]
    centers = [X[int(rng.integers(N))]]
    for _ in range(K - 1):
        d2 = np.min(
            [((X - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total == 0:
            centers.append(X[int(rng.integers(N))])
            continue
        centers.append(X[int(rng.choice(N, p=d2 / total))])
    return np.stack(centers)


def _mstep(X, resp, reg):
    N, D = X.shape
    K = resp.shape[1]
    nk = resp.sum(axis=0)
    weights = nk / N
    means = (resp.T @ X) / np.maximum(nk, 1e-300)[:, None]
    covs = np.empty((K, D, D))
    for k in range(K):
        diff = X - means[k]
        cov = (resp[:, k][:, None] * diff).T @ diff / max(nk[k], 1e-300)
        covs[k] = 0.5 * (cov + cov.T) + reg * np.eye(D)
    return weights, means, covs


def fit_gmm(X, K: int = 5, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            reg: float = 1e-6) -> GmmModel:
    """EM with full covariances on raw descriptors.

    The log-likelihood trace is recorded every iteration and is
    nondecreasing up to numerical slack; convergence is declared when the
    relative improvement drops below `tol`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise GmmError(f"expected (N, D) descriptor matrix, got shape {X.shape}")
    N, D = X.shape
    if N <= K:
        raise GmmError(f"need more points than components: N={N}, K={K}")

    rng = np.random.default_rng(seed)
    centers = kmeanspp_centers(X, K, rng)
    # Hard assignment to the seeded centers initializes responsibilities.
    d2 = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
    resp = np.zeros((N, K))
    resp[np.arange(N), d2.argmin(axis=1)] = 1.0
    weights, means, covs = _mstep(X, resp, reg)

    trace = []
    reinit_done = False
    prev_ll = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        log_r, norm = _log_resp(X, weights, means, covs)
        ll = float(norm.sum())
        trace.append(ll)
        resp = np.exp(log_r)

        if np.isfinite(prev_ll) and abs(ll - prev_ll) < tol * abs(prev_ll):
            converged = True
            break
        prev_ll = ll

        weights, means, covs = _mstep(X, resp, reg)

        small = weights < 1e-8
        if small.any():
            if reinit_done:
                raise GmmError(
                    f"component collapse (weights {weights[small]}) after re-init"
                )
            # One rescue: move each empty component to the worst-modeled point.
            reinit_done = True
            _, norm_now = _log_resp(X, weights, means, covs)
            worst = np.argsort(norm_now)
            overall = np.cov(X.T) + reg * np.eye(D)
            for j, k in enumerate(np.flatnonzero(small)):
                means[k] = X[worst[j]]
                covs[k] = overall
                weights[k] = 1.0 / N
            weights = weights / weights.sum()

    return GmmModel(weights=weights, means=means, covariances=covs,
                    loglik_trace=trace, converged=converged, n_iter=it)


def assign_clusters(model: GmmModel, X):
    """(hard labels, posterior responsibilities with rows summing to 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.means.shape[1]:
        raise GmmError(
            f"descriptor dim {X.shape[1]} does not match model dim {model.means.shape[1]}"
        )
    log_r, _ = _log_resp(X, model.weights, model.means, model.covariances)
    resp = np.exp(log_r)
    return resp.argmax(axis=1), resp
