"""Parameter update rules.

Langevin steps with bias-corrected stochastic gradients, conjugate Gibbs
draws for the diagonal precisions, a noise-free SGD baseline, and the
annealed step-size schedule. Update functions return new values and never
mutate their inputs; ``minibatch_sweep`` is the vectorized in-place form
used by workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    ChainState,
    ModelConfig,
    RatingsBlock,
    RatingTuple,
    minibatch_mean_item_bias_score,
    minibatch_mean_score,
    minibatch_mean_score_item,
    minibatch_mean_user_bias_score,
)


class DivergenceError(RuntimeError):
    """A sampler produced a non-finite parameter value."""

    def __init__(self, message, chain_id=None, iteration=None):
        super().__init__(message)
        self.chain_id = chain_id
        self.iteration = iteration


@dataclass(frozen=True)
class StepSchedule:
    """Annealing schedule eps0 * (1 + t/kappa) ** (-gamma_decay).

    gamma_decay in (0.5, 1] keeps the step sums divergent and the squared
    sums summable.
    """

    eps0: float
    kappa: float
    gamma_decay: float = 0.51

    def __post_init__(self):
        if self.eps0 <= 0:
            raise ValueError("eps0 must be positive")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0.5 < self.gamma_decay <= 1.0:
            raise ValueError("gamma_decay must lie in (0.5, 1]")


def step_size(sched: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return sched.eps0 * (1.0 + t / sched.kappa) ** (-sched.gamma_decay)


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float

    def __post_init__(self):
        if self.shape <= 0 or self.rate <= 0:
            raise ValueError("Gamma parameters must be positive")

    @property
    def mean(self) -> float:
        return self.shape / self.rate


class NoiseSource:
    """Reproducible random stream keyed by (seed, stream_id).

    Identical keys replay identical draw sequences; distinct stream ids
    are statistically independent. Also used for minibatch index draws so
    a worker round is a pure function of its request.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._rng = np.random.Generator(np.random.PCG64(ss))

    def standard_normal(self, shape=()):
        return self._rng.standard_normal(shape)

    def gamma(self, shape_param, rate, size=None):
        return self._rng.gamma(shape_param, scale=1.0 / np.asarray(rate), size=size)

    def chisquare(self, df, size=None):
        return self._rng.chisquare(df, size=size)

    def integers(self, n, size=None):
        return self._rng.integers(0, n, size=size)


class ZeroNoise:
    """Noise stream that returns zeros; turns a Langevin step into SGD."""

    def standard_normal(self, shape=()):
        return np.zeros(shape)


def dsgld_update_user(
    state: ChainState,
    block: RatingsBlock,
    minibatch: Sequence[RatingTuple],
    user: int,
    v_s: float,
    h_bar: float,
    eps: float,
    noise,
    tau: float,
) -> np.ndarray:
    """One Langevin step on a user's factor vector.

    Drift is half the corrected gradient estimate; injected noise has
    variance eps per coordinate. The single-machine rule is the special
    case v_s = 1.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0 < h_bar <= 1:
        raise ValueError("h_bar must lie in (0, 1]")
    mean = minibatch_mean_score(state, minibatch, user, tau)
    n_eff = block.n / v_s
    drift = 0.5 * eps * (n_eff * mean - state.prec_user * state.user_factors[user] / h_bar)
    new = state.user_factors[user] + drift + math.sqrt(eps) * noise.standard_normal(state.n_factors)
    if not np.isfinite(new).all():
        raise DivergenceError(
            f"user {user} factor update diverged",
            chain_id=state.chain_id,
            iteration=state.iteration,
        )
    return new


def dsgld_update_item(
    state: ChainState,
    block: RatingsBlock,
    minibatch: Sequence[RatingTuple],
    item: int,
    v_s: float,
    h_bar: float,
    eps: float,
    noise,
    tau: float,
) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0 < h_bar <= 1:
        raise ValueError("h_bar must lie in (0, 1]")
    mean = minibatch_mean_score_item(state, minibatch, item, tau)
    n_eff = block.n / v_s
    drift = 0.5 * eps * (n_eff * mean - state.prec_item * state.item_factors[item] / h_bar)
    new = state.item_factors[item] + drift + math.sqrt(eps) * noise.standard_normal(state.n_factors)
    if not np.isfinite(new).all():
        raise DivergenceError(
            f"item {item} factor update diverged",
            chain_id=state.chain_id,
            iteration=state.iteration,
        )
    return new


def dsgld_update_biases(
    state: ChainState,
    block: RatingsBlock,
    minibatch: Sequence[RatingTuple],
    user: int,
    item: int,
    v_s: float,
    h_bars: tuple[float, float],
    eps: float,
    noise,
    tau: float,
) -> tuple[float, float]:
    """Langevin steps on one user bias and one item bias."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    h_user, h_item = h_bars
    if not (0 < h_user <= 1 and 0 < h_item <= 1):
        raise ValueError("h_bars must lie in (0, 1]")
    n_eff = block.n / v_s
    mean_a = minibatch_mean_user_bias_score(state, minibatch, user, tau)
    mean_b = minibatch_mean_item_bias_score(state, minibatch, item, tau)
    drift_a = 0.5 * eps * (n_eff * mean_a - state.prec_user_bias * state.user_bias[user] / h_user)
    drift_b = 0.5 * eps * (n_eff * mean_b - state.prec_item_bias * state.item_bias[item] / h_item)
    root = math.sqrt(eps)
    new_a = state.user_bias[user] + drift_a + root * float(noise.standard_normal(()))
    new_b = state.item_bias[item] + drift_b + root * float(noise.standard_normal(()))
    if not (math.isfinite(new_a) and math.isfinite(new_b)):
        raise DivergenceError(
            f"bias update diverged at user {user} / item {item}",
            chain_id=state.chain_id,
            iteration=state.iteration,
        )
    return new_a, new_b


def sgd_update_user(
    state: ChainState,
    block: RatingsBlock,
    minibatch: Sequence[RatingTuple],
    user: int,
    eps: float,
    tau: float,
    v_s: float = 1.0,
    h_bar: float = 1.0,
) -> np.ndarray:
    """Noise-free baseline: the Langevin drift term alone."""
    return dsgld_update_user(state, block, minibatch, user, v_s, h_bar, eps, ZeroNoise(), tau)


class PrecisionDraw(NamedTuple):
    prec_user: np.ndarray
    prec_item: np.ndarray
    prec_user_bias: float
    prec_item_bias: float


def gibbs_sample_precisions(state: ChainState, cfg: ModelConfig, noise: NoiseSource) -> PrecisionDraw:
    """Conjugate Gamma draws for the four precision groups.

    Each factor dimension gets shape alpha0 + n/2 and rate beta0 plus half
    the squared column sum; the bias precisions are the scalar analogues.
    Draw order: user factors, item factors, user bias, item bias.
    """
    shape_u = cfg.alpha0 + state.n_users / 2.0
    shape_v = cfg.alpha0 + state.n_items / 2.0
    rate_u = cfg.beta0 + 0.5 * (state.user_factors**2).sum(axis=0)
    rate_v = cfg.beta0 + 0.5 * (state.item_factors**2).sum(axis=0)
    rate_a = cfg.beta0 + 0.5 * float(state.user_bias @ state.user_bias)
    rate_b = cfg.beta0 + 0.5 * float(state.item_bias @ state.item_bias)
    return PrecisionDraw(
        prec_user=noise.gamma(shape_u, rate_u, size=state.n_factors),
        prec_item=noise.gamma(shape_v, rate_v, size=state.n_factors),
        prec_user_bias=float(noise.gamma(shape_u, rate_a)),
        prec_item_bias=float(noise.gamma(shape_v, rate_b)),
    )


def minibatch_sweep(
    user_factors: np.ndarray,
    item_factors: np.ndarray,
    user_bias: np.ndarray,
    item_bias: np.ndarray,
    prec_user: np.ndarray,
    prec_item: np.ndarray,
    prec_user_bias: float,
    prec_item_bias: float,
    users: np.ndarray,
    items: np.ndarray,
    ratings: np.ndarray,
    batch_idx: np.ndarray,
    tau: float,
    n_eff: float,
    h_user: np.ndarray,
    h_item: np.ndarray,
    eps: float,
    noise,
    langevin: bool = True,
) -> None:
    """Simultaneously update every user and item present in a minibatch.

    Vectorized equivalent of applying the per-row update rules to each
    distinct user and item against the pre-sweep state (all reads happen
    before any write). Index arrays are local to the factor matrices;
    ``h_user``/``h_item`` are aligned with the factor rows. Mutates the
    factor and bias arrays in place.

    Noise draw order: user factor noise for present users in ascending
    index order, then item factor noise, then user bias, then item bias.
    """
    m = len(batch_idx)
    pu = users[batch_idx]
    qi = items[batch_idx]
    # overflow surfaces as the explicit divergence check below, not a warning
    with np.errstate(over="ignore", invalid="ignore"):
        resid = tau * (
            ratings[batch_idx]
            - np.einsum("nd,nd->n", user_factors[pu], item_factors[qi])
            - user_bias[pu]
            - item_bias[qi]
        )

        upresent, upos = np.unique(pu, return_inverse=True)
        ipresent, ipos = np.unique(qi, return_inverse=True)
        d = user_factors.shape[1]

        mean_u = np.zeros((len(upresent), d))
        np.add.at(mean_u, upos, resid[:, None] * item_factors[qi])
        mean_u /= m
        mean_v = np.zeros((len(ipresent), d))
        np.add.at(mean_v, ipos, resid[:, None] * user_factors[pu])
        mean_v /= m
        mean_a = np.bincount(upos, weights=resid, minlength=len(upresent)) / m
        mean_b = np.bincount(ipos, weights=resid, minlength=len(ipresent)) / m

        half = 0.5 * eps
        new_u = user_factors[upresent] + half * (
            n_eff * mean_u - prec_user * user_factors[upresent] / h_user[upresent, None]
        )
        new_v = item_factors[ipresent] + half * (
            n_eff * mean_v - prec_item * item_factors[ipresent] / h_item[ipresent, None]
        )
        new_a = user_bias[upresent] + half * (
            n_eff * mean_a - prec_user_bias * user_bias[upresent] / h_user[upresent]
        )
        new_b = item_bias[ipresent] + half * (
            n_eff * mean_b - prec_item_bias * item_bias[ipresent] / h_item[ipresent]
        )

        if langevin:
            root = math.sqrt(eps)
            new_u += root * noise.standard_normal((len(upresent), d))
            new_v += root * noise.standard_normal((len(ipresent), d))
            new_a += root * noise.standard_normal(len(upresent))
            new_b += root * noise.standard_normal(len(ipresent))

    if not (
        np.isfinite(new_u).all()
        and np.isfinite(new_v).all()
        and np.isfinite(new_a).all()
        and np.isfinite(new_b).all()
    ):
        raise DivergenceError("minibatch sweep produced non-finite parameters")

    user_factors[upresent] = new_u
    item_factors[ipresent] = new_v
    user_bias[upresent] = new_a
    item_bias[ipresent] = new_b
