"""Model arithmetic shared by every sampler.

Predictions, log-posterior score terms and gradients, minibatch gradient
estimates, and the inclusion-probability correction that keeps the
sparse-support estimator unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class RatingTuple(NamedTuple):
    user: int
    item: int
    rating: float


@dataclass(frozen=True)
class ModelConfig:
    """Likelihood precision, Gamma hyper-prior, and minibatch settings."""

    n_factors: int
    tau: float = 2.0
    alpha0: float = 1.0
    beta0: float = 1.0
    minibatch_size: int = 50

    def __post_init__(self):
        if self.n_factors < 1:
            raise ValueError("n_factors must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha0 <= 0 or self.beta0 <= 0:
            raise ValueError("Gamma hyper-prior parameters must be positive")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")


@dataclass
class RatingsBlock:
    """A contiguous rectangle of the rating matrix in sparse triple form.

    ``users``/``items`` hold global indices; ``row_range``/``col_range``
    are half-open [lo, hi) intervals the triples must fall inside.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    row_range: tuple[int, int]
    col_range: tuple[int, int]
    user_counts: dict[int, int] = field(default_factory=dict)
    item_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("triple arrays must have equal length")
        if not self.user_counts:
            uniq, cnt = np.unique(self.users, return_counts=True)
            self.user_counts = dict(zip(uniq.tolist(), cnt.tolist()))
        if not self.item_counts:
            uniq, cnt = np.unique(self.items, return_counts=True)
            self.item_counts = dict(zip(uniq.tolist(), cnt.tolist()))

    @classmethod
    def from_tuples(cls, tuples, row_range, col_range):
        arr = np.asarray([(t[0], t[1], t[2]) for t in tuples], dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        return cls(
            users=arr[:, 0].astype(np.int64),
            items=arr[:, 1].astype(np.int64),
            ratings=arr[:, 2],
            row_range=tuple(row_range),
            col_range=tuple(col_range),
        )

    @property
    def n(self) -> int:
        return len(self.ratings)

    @property
    def tuples(self) -> list[RatingTuple]:
        return [
            RatingTuple(int(u), int(i), float(r))
            for u, i, r in zip(self.users, self.items, self.ratings)
        ]

    def validate(self):
        r0, r1 = self.row_range
        c0, c1 = self.col_range
        if self.n and not (
            (self.users >= r0).all()
            and (self.users < r1).all()
            and (self.items >= c0).all()
            and (self.items < c1).all()
        ):
            raise ValueError("block holds a triple outside its index ranges")
        if not np.isfinite(self.ratings).all():
            raise ValueError("non-finite rating in block")
        if sum(self.user_counts.values()) != self.n:
            raise ValueError("user_counts do not sum to block size")
        if sum(self.item_counts.values()) != self.n:
            raise ValueError("item_counts do not sum to block size")


@dataclass
class ChainState:
    """One Markov chain's parameters.

    Factor matrices are (n_users, D) and (n_items, D); ``prec_user`` and
    ``prec_item`` are the diagonal precisions of the factor priors,
    stored as length-D vectors.
    """

    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    prec_user: np.ndarray
    prec_item: np.ndarray
    prec_user_bias: float
    prec_item_bias: float
    chain_id: int = 0
    iteration: int = 0

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def n_factors(self) -> int:
        return self.user_factors.shape[1]

    def validate(self):
        if self.item_factors.shape[1] != self.n_factors:
            raise ValueError("factor matrices disagree on dimension")
        if self.user_bias.shape != (self.n_users,) or self.item_bias.shape != (self.n_items,):
            raise ValueError("bias vector shape mismatch")
        if self.prec_user.shape != (self.n_factors,) or self.prec_item.shape != (self.n_factors,):
            raise ValueError("precision vector shape mismatch")
        for arr in (self.user_factors, self.item_factors, self.user_bias, self.item_bias):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite parameter entry")
        if (
            (self.prec_user <= 0).any()
            or (self.prec_item <= 0).any()
            or self.prec_user_bias <= 0
            or self.prec_item_bias <= 0
        ):
            raise ValueError("precisions must be positive")

    def copy(self) -> "ChainState":
        return ChainState(
            user_factors=self.user_factors.copy(),
            item_factors=self.item_factors.copy(),
            user_bias=self.user_bias.copy(),
            item_bias=self.item_bias.copy(),
            prec_user=self.prec_user.copy(),
            prec_item=self.prec_item.copy(),
            prec_user_bias=self.prec_user_bias,
            prec_item_bias=self.prec_item_bias,
            chain_id=self.chain_id,
            iteration=self.iteration,
        )


def _check_user(state: ChainState, user: int):
    if not 0 <= user < state.n_users:
        raise IndexError(f"user index {user} out of range [0, {state.n_users})")


def _check_item(state: ChainState, item: int):
    if not 0 <= item < state.n_items:
        raise IndexError(f"item index {item} out of range [0, {state.n_items})")


def predict(state: ChainState, user: int, item: int) -> float:
    """Point prediction: factor inner product plus the two bias terms."""
    _check_user(state, user)
    _check_item(state, item)
    return float(
        state.user_factors[user] @ state.item_factors[item]
        + state.user_bias[user]
        + state.item_bias[item]
    )


def residual(state: ChainState, tup: RatingTuple, tau: float) -> float:
    """tau-scaled prediction residual of a single rating."""
    return tau * (tup.rating - predict(state, tup.user, tup.item))


def score_term(state: ChainState, tup: RatingTuple, user: int, tau: float) -> np.ndarray:
    """Per-tuple log-likelihood gradient w.r.t. one user's factor vector.

    Zero unless the tuple belongs to ``user``.
    """
    _check_user(state, user)
    if tup.user != user:
        return np.zeros(state.n_factors)
    return residual(state, tup, tau) * state.item_factors[tup.item]


def item_score_term(state: ChainState, tup: RatingTuple, item: int, tau: float) -> np.ndarray:
    _check_item(state, item)
    if tup.item != item:
        return np.zeros(state.n_factors)
    return residual(state, tup, tau) * state.user_factors[tup.user]


def user_bias_score(state: ChainState, tup: RatingTuple, user: int, tau: float) -> float:
    _check_user(state, user)
    if tup.user != user:
        return 0.0
    return residual(state, tup, tau)


def item_bias_score(state: ChainState, tup: RatingTuple, item: int, tau: float) -> float:
    _check_item(state, item)
    if tup.item != item:
        return 0.0
    return residual(state, tup, tau)


def _block_residuals(state: ChainState, block: RatingsBlock, tau: float) -> np.ndarray:
    preds = (
        np.einsum("nd,nd->n", state.user_factors[block.users], state.item_factors[block.items])
        + state.user_bias[block.users]
        + state.item_bias[block.items]
    )
    return tau * (block.ratings - preds)


def full_gradient_user(state: ChainState, block: RatingsBlock, user: int, tau: float) -> np.ndarray:
    """Exact log-posterior gradient w.r.t. one user's factors over a block."""
    _check_user(state, user)
    mask = block.users == user
    total = np.zeros(state.n_factors)
    if mask.any():
        res = _block_residuals(state, block, tau)[mask]
        total = res @ state.item_factors[block.items[mask]]
    return total - state.prec_user * state.user_factors[user]


def full_gradient_item(state: ChainState, block: RatingsBlock, item: int, tau: float) -> np.ndarray:
    _check_item(state, item)
    mask = block.items == item
    total = np.zeros(state.n_factors)
    if mask.any():
        res = _block_residuals(state, block, tau)[mask]
        total = res @ state.user_factors[block.users[mask]]
    return total - state.prec_item * state.item_factors[item]


def full_gradient_user_bias(state: ChainState, block: RatingsBlock, user: int, tau: float) -> float:
    _check_user(state, user)
    mask = block.users == user
    total = float(_block_residuals(state, block, tau)[mask].sum()) if mask.any() else 0.0
    return total - state.prec_user_bias * float(state.user_bias[user])


def full_gradient_item_bias(state: ChainState, block: RatingsBlock, item: int, tau: float) -> float:
    _check_item(state, item)
    mask = block.items == item
    total = float(_block_residuals(state, block, tau)[mask].sum()) if mask.any() else 0.0
    return total - state.prec_item_bias * float(state.item_bias[item])


def minibatch_mean_score(
    state: ChainState, minibatch: Sequence[RatingTuple], user: int, tau: float
) -> np.ndarray:
    """Arithmetic mean of ``score_term`` over a minibatch."""
    if len(minibatch) == 0:
        raise ValueError("minibatch must be nonempty")
    total = np.zeros(state.n_factors)
    for tup in minibatch:
        total += score_term(state, tup, user, tau)
    return total / len(minibatch)


def minibatch_mean_score_item(
    state: ChainState, minibatch: Sequence[RatingTuple], item: int, tau: float
) -> np.ndarray:
    if len(minibatch) == 0:
        raise ValueError("minibatch must be nonempty")
    total = np.zeros(state.n_factors)
    for tup in minibatch:
        total += item_score_term(state, tup, item, tau)
    return total / len(minibatch)


def minibatch_mean_user_bias_score(
    state: ChainState, minibatch: Sequence[RatingTuple], user: int, tau: float
) -> float:
    if len(minibatch) == 0:
        raise ValueError("minibatch must be nonempty")
    return sum(user_bias_score(state, tup, user, tau) for tup in minibatch) / len(minibatch)


def minibatch_mean_item_bias_score(
    state: ChainState, minibatch: Sequence[RatingTuple], item: int, tau: float
) -> float:
    if len(minibatch) == 0:
        raise ValueError("minibatch must be nonempty")
    return sum(item_bias_score(state, tup, item, tau) for tup in minibatch) / len(minibatch)


def bias_corrector(n_i: int, n: int, m: int) -> float:
    """Probability that a size-m with-replacement minibatch contains at
    least one of a user's ``n_i`` ratings out of ``n`` total.

    Divides the prior gradient in the sparse-support estimator; undefined
    for users with no ratings in the block.
    """
    if n_i <= 0:
        raise ValueError("corrector undefined for a user with no ratings in the block")
    if n_i > n:
        raise ValueError("per-user count exceeds block size")
    if m < 1:
        raise ValueError("minibatch size must be >= 1")
    return 1.0 - (1.0 - n_i / n) ** m


def distributed_corrector(per_block: Sequence[tuple[float, float]]) -> float:
    """Visit-rate weighted mean of per-block inclusion probabilities.

    ``per_block`` holds (visit rate, corrector) pairs; rates must sum to
    one. Blocks where the user never appears contribute corrector 0.
    """
    if not per_block:
        raise ValueError("need at least one block")
    rates = np.array([v for v, _ in per_block], dtype=np.float64)
    hs = np.array([h for _, h in per_block], dtype=np.float64)
    if abs(rates.sum() - 1.0) > 1e-12:
        raise ValueError(f"visit rates must sum to 1, got {rates.sum()!r}")
    if (rates <= 0).any() or (rates > 1).any():
        raise ValueError("visit rates must lie in (0, 1]")
    if (hs < 0).any() or (hs > 1).any():
        raise ValueError("correctors must lie in [0, 1]")
    return float(rates @ hs)


def g3_estimator(
    state: ChainState,
    block: RatingsBlock,
    minibatch: Sequence[RatingTuple],
    user: int,
    h_bar: float,
    tau: float,
    v_s: float = 1.0,
) -> np.ndarray:
    """Bias-corrected sparse-support gradient estimate for one user.

    Scales the minibatch mean score by the effective dataset size
    (block size over visit rate) and divides the prior term by the
    inclusion probability. Evaluates to zero when the user has no tuple
    in the minibatch.
    """
    if h_bar <= 0:
        raise ValueError("h_bar must be positive")
    if h_bar > 1:
        raise ValueError("h_bar cannot exceed 1")
    if not 0 < v_s <= 1:
        raise ValueError("v_s must lie in (0, 1]")
    present = any(t.user == user for t in minibatch)
    if not present:
        return np.zeros(state.n_factors)
    n_eff = block.n / v_s
    mean = minibatch_mean_score(state, minibatch, user, tau)
    return n_eff * mean - state.prec_user * state.user_factors[user] / h_bar
