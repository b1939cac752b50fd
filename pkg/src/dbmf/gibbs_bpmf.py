"""Full Gibbs sampler for matrix factorization with Gaussian-Wishart
hyper-priors: the accuracy baseline.

Factor conditionals are Gaussian with a dense D x D precision, so each
draw costs O(D^3); the per-sweep work is O((L + M) D^3). The inner sweep
runs as a compiled kernel so that cost is the actual cubic arithmetic
rather than per-row call overhead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .cluster import BurnInMonitor, SampleStore, collect_sample
from .core import ChainState
from .evaluation import rmse
from .samplers import NoiseSource


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianWishartParams:
    """Hyper-prior: mean mu0 with strength beta0, Wishart scale w0 with
    nu0 degrees of freedom."""

    mu0: np.ndarray
    beta0: float
    w0: np.ndarray
    nu0: float

    def __post_init__(self):
        d = len(self.mu0)
        if self.w0.shape != (d, d):
            raise ValueError("w0 must be D x D")
        if not np.allclose(self.w0, self.w0.T):
            raise ValueError("w0 must be symmetric")
        if np.linalg.eigvalsh(self.w0).min() <= 0:
            raise ValueError("w0 must be positive-definite")
        if self.nu0 < d:
            raise ValueError("nu0 must be >= D")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")

    @classmethod
    def default(cls, d: int) -> "GaussianWishartParams":
        return cls(mu0=np.zeros(d), beta0=2.0, w0=np.eye(d), nu0=float(d))


@dataclass
class FactorHyper:
    mu: np.ndarray
    lam: np.ndarray  # full D x D precision


@njit(cache=True)
def _conditional_sweep(starts, counts, nbr, vals, opp, prec, prec_mu, tau, z, out):
    """Draw every row's Gaussian conditional given the opposite factors.

    Row i has ratings vals[starts[i]:starts[i]+counts[i]] against opposite
    rows nbr[...]. Writes mean + chol(P)^-T z into out; a non-PD precision
    surfaces as NaNs for the caller to detect.

    The D x D systems are held interleaved (row index innermost) so the
    factorization and solves vectorize across rows; per-row call overhead
    would otherwise swamp the cubic arithmetic at small D.
    """
    rows, d = out.shape
    p = np.empty((d, d, rows))
    rhs = np.empty((d, rows))
    w = np.empty((d, rows))
    x = np.empty((d, rows))

    for a in range(d):
        va = prec_mu[a]
        for i in range(rows):
            rhs[a, i] = va
        for b in range(d):
            pab = prec[a, b]
            for i in range(rows):
                p[a, b, i] = pab
    for i in range(rows):
        for k in range(starts[i], starts[i] + counts[i]):
            j = nbr[k]
            r = vals[k]
            for a in range(d):
                va = tau * opp[j, a]
                rhs[a, i] += r * va
                for b in range(a + 1):
                    p[a, b, i] += va * opp[j, b]

    # batched Cholesky on the lower triangle, in place
    for a in range(d):
        for b in range(a + 1):
            for c in range(b):
                for i in range(rows):
                    p[a, b, i] -= p[a, c, i] * p[b, c, i]
            if a == b:
                for i in range(rows):
                    p[a, a, i] = np.sqrt(p[a, a, i])
            else:
                for i in range(rows):
                    p[a, b, i] /= p[b, b, i]

    # mean-plus-noise via one fused pass: the draw is
    # chol^-T (chol^-1 rhs + z), so forward-solve rhs, add z, back-solve once
    for a in range(d):
        for i in range(rows):
            w[a, i] = rhs[a, i]
        for c in range(a):
            for i in range(rows):
                w[a, i] -= p[a, c, i] * w[c, i]
        for i in range(rows):
            w[a, i] = w[a, i] / p[a, a, i]
    for a in range(d):
        for i in range(rows):
            w[a, i] += z[i, a]
    for a in range(d - 1, -1, -1):
        for c in range(a + 1, d):
            for i in range(rows):
                w[a, i] -= p[c, a, i] * x[c, i]
        for i in range(rows):
            x[a, i] = w[a, i] / p[a, a, i]

    for a in range(d):
        for i in range(rows):
            out[i, a] = x[a, i]


def _csr_by(keys: np.ndarray, nbr: np.ndarray, vals: np.ndarray, n_rows: int):
    order = np.argsort(keys, kind="stable")
    keys_sorted = keys[order]
    counts = np.bincount(keys_sorted, minlength=n_rows).astype(np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return starts, counts, nbr[order].astype(np.int64), vals[order].astype(np.float64)


def _wishart_bartlett(nu: float, scale: np.ndarray, noise: NoiseSource) -> np.ndarray:
    d = scale.shape[0]
    try:
        chol = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Wishart scale matrix is not positive-definite") from exc
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = math.sqrt(float(noise.chisquare(nu - i)))
        for j in range(i):
            a[i, j] = float(noise.standard_normal(()))
    la = chol @ a
    return la @ la.T


def sample_hyper(factors: np.ndarray, prior: GaussianWishartParams, noise: NoiseSource) -> FactorHyper:
    """Conjugate Normal-Wishart posterior draw from a factor matrix."""
    n, d = factors.shape
    if n < 1:
        raise ValueError("need at least one factor row")
    xbar = factors.mean(axis=0)
    diff = factors - xbar
    scatter = diff.T @ diff
    beta_n = prior.beta0 + n
    nu_n = prior.nu0 + n
    mu_n = (prior.beta0 * prior.mu0 + n * xbar) / beta_n
    dm = (xbar - prior.mu0)[:, None]
    try:
        w_inv = np.linalg.inv(prior.w0) + scatter + (prior.beta0 * n / beta_n) * (dm @ dm.T)
        w_inv = 0.5 * (w_inv + w_inv.T)
        w_n = np.linalg.inv(w_inv)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("posterior scale matrix is singular") from exc
    w_n = 0.5 * (w_n + w_n.T)
    lam = _wishart_bartlett(nu_n, w_n, noise)
    lam = 0.5 * (lam + lam.T)
    try:
        chol = np.linalg.cholesky(beta_n * lam)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("sampled precision is not positive-definite") from exc
    mu = mu_n + np.linalg.solve(chol.T, noise.standard_normal(d))
    return FactorHyper(mu=mu, lam=lam)


def sample_user_conditional(rated_items, rating_values, opposite_factors,
                            hyper: FactorHyper, tau: float, noise: NoiseSource) -> np.ndarray:
    """One draw from a single row's Gaussian conditional.

    Precision is hyper.lam + tau * sum of outer products of the rated
    opposite rows; rows with no ratings draw from the prior.
    """
    d = opposite_factors.shape[1]
    rated_items = np.asarray(rated_items, dtype=np.int64)
    rating_values = np.asarray(rating_values, dtype=np.float64)
    z = np.asarray(noise.standard_normal(d), dtype=np.float64).reshape(1, d)
    out = np.empty((1, d))
    starts = np.zeros(1, dtype=np.int64)
    counts = np.array([len(rated_items)], dtype=np.int64)
    _conditional_sweep(
        starts, counts, rated_items, rating_values,
        np.ascontiguousarray(opposite_factors, dtype=np.float64),
        np.ascontiguousarray(hyper.lam, dtype=np.float64),
        hyper.lam @ hyper.mu, tau, z, out,
    )
    if not np.isfinite(out).all():
        raise NumericalError("conditional precision is not positive-definite")
    return out[0]


class GibbsSampler:
    """Alternates hyper draws with full user/item conditional sweeps.

    Rows within one side are conditionally independent given the opposite
    side, so each side's draws can run in parallel; the item pass then
    conditions on the user draws just made, keeping the joint chain on
    target.
    """

    def __init__(self, dataset, prior: GaussianWishartParams, n_factors: int,
                 tau: float = 2.0, seed: int = 0, warm_start=None, init_scale: float = 0.1):
        self.prior = prior
        self.tau = tau
        self.n_factors = n_factors
        self.n_users = dataset.n_users
        self.n_items = dataset.n_items
        train = dataset.train
        users = train[:, 0].astype(np.int64)
        items = train[:, 1].astype(np.int64)
        vals = train[:, 2]
        self._by_user = _csr_by(users, items, vals, self.n_users)
        self._by_item = _csr_by(items, users, vals, self.n_items)
        self.noise = NoiseSource(seed)
        if warm_start is not None:
            u0, v0 = warm_start
            self.user_factors = np.array(u0, dtype=np.float64, copy=True)
            self.item_factors = np.array(v0, dtype=np.float64, copy=True)
        else:
            self.user_factors = init_scale * self.noise.standard_normal((self.n_users, n_factors))
            self.item_factors = init_scale * self.noise.standard_normal((self.n_items, n_factors))
        self.sweeps_done = 0

    def sweep(self) -> None:
        """One full pass: hyper draws, then all users, then all items."""
        hyper_u = sample_hyper(self.user_factors, self.prior, self.noise)
        hyper_v = sample_hyper(self.item_factors, self.prior, self.noise)
        self._hyper_u, self._hyper_v = hyper_u, hyper_v

        d = self.n_factors

        z_u = self.noise.standard_normal((self.n_users, d))
        new_users = np.empty((self.n_users, d))
        starts, counts, nbr, vals = self._by_user
        _conditional_sweep(starts, counts, nbr, vals, self.item_factors,
                           hyper_u.lam, hyper_u.lam @ hyper_u.mu, self.tau, z_u, new_users)
        if not np.isfinite(new_users).all():
            raise NumericalError(f"sweep {self.sweeps_done + 1}: non-finite user draw")
        self.user_factors = new_users

        z_v = self.noise.standard_normal((self.n_items, d))
        new_items = np.empty((self.n_items, d))
        starts, counts, nbr, vals = self._by_item
        _conditional_sweep(starts, counts, nbr, vals, self.user_factors,
                           hyper_v.lam, hyper_v.lam @ hyper_v.mu, self.tau, z_v, new_items)
        if not np.isfinite(new_items).all():
            raise NumericalError(f"sweep {self.sweeps_done + 1}: non-finite item draw")
        self.item_factors = new_items
        self.sweeps_done += 1

    def snapshot(self) -> ChainState:
        """Prediction-ready copy; diagonal of the full precisions stands in
        for the simplified model's precision vectors."""
        return ChainState(
            user_factors=self.user_factors.copy(),
            item_factors=self.item_factors.copy(),
            user_bias=np.zeros(self.n_users),
            item_bias=np.zeros(self.n_items),
            prec_user=np.diag(self._hyper_u.lam).copy(),
            prec_item=np.diag(self._hyper_v.lam).copy(),
            prec_user_bias=1.0,
            prec_item_bias=1.0,
            iteration=self.sweeps_done,
        )

    def test_rmse(self, dataset) -> float:
        test = dataset.test
        if len(test) == 0:
            return float("nan")
        users = test[:, 0].astype(np.int64)
        items = test[:, 1].astype(np.int64)
        preds = np.einsum("nd,nd->n", self.user_factors[users], self.item_factors[items])
        return rmse(preds, test[:, 2])


def run_gibbs(dataset, prior: GaussianWishartParams, sweeps: int, *,
              n_factors: int, tau: float = 2.0, thin: int = 1,
              burn_in_threshold: float = float("inf"), seed: int = 0,
              warm_start=None, metrics_hook=None) -> SampleStore:
    """Run the sampler for a fixed number of sweeps and store thinned
    post-burn-in snapshots."""
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    sampler = GibbsSampler(dataset, prior, n_factors, tau=tau, seed=seed, warm_start=warm_start)
    store = SampleStore()
    monitor = BurnInMonitor(burn_in_threshold)
    for t in range(1, sweeps + 1):
        try:
            sampler.sweep()
        except NumericalError as exc:
            raise NumericalError(f"sweep {t}: {exc}") from exc
        current = sampler.test_rmse(dataset)
        if math.isfinite(burn_in_threshold) and not math.isnan(current):
            monitor.update([current])
        else:
            monitor.complete = True
        store.burn_in_complete = monitor.complete
        if monitor.complete:
            collect_sample(store, 0, sampler.snapshot(), t, thin)
        if metrics_hook is not None:
            metrics_hook({"round": t, "test_rmse": current, "samples_collected": store.count()})
    return store
