"""Shared fixtures and independent oracles for the test suite.

Oracles here are deliberately written as plain per-tuple loops so they
never share code paths with the vectorized implementations they check.
"""

from __future__ import annotations

import itertools

import numpy as np

from dbmf.core import ChainState, RatingsBlock, RatingTuple

# three ratings, two users, two items
T1_TUPLES = [RatingTuple(0, 0, 5.0), RatingTuple(0, 1, 3.0), RatingTuple(1, 0, 4.0)]


def t1_block() -> RatingsBlock:
    return RatingsBlock.from_tuples(T1_TUPLES, (0, 2), (0, 2))


def make_state(n_users, n_items, n_factors, seed=None, scale=1.0, prec=1.0,
               bias_scale=0.0, chain_id=0) -> ChainState:
    if seed is None:
        user_factors = np.ones((n_users, n_factors)) * scale
        item_factors = np.ones((n_items, n_factors)) * scale
        user_bias = np.zeros(n_users)
        item_bias = np.zeros(n_items)
    else:
        rng = np.random.default_rng(seed)
        user_factors = scale * rng.uniform(-2, 2, (n_users, n_factors))
        item_factors = scale * rng.uniform(-2, 2, (n_items, n_factors))
        user_bias = bias_scale * rng.uniform(-2, 2, n_users)
        item_bias = bias_scale * rng.uniform(-2, 2, n_items)
    return ChainState(
        user_factors=user_factors,
        item_factors=item_factors,
        user_bias=user_bias,
        item_bias=item_bias,
        prec_user=np.full(n_factors, prec, dtype=np.float64),
        prec_item=np.full(n_factors, prec, dtype=np.float64),
        prec_user_bias=float(prec),
        prec_item_bias=float(prec),
        chain_id=chain_id,
    )


def log_joint(state: ChainState, tuples, tau: float) -> float:
    """Log likelihood plus log priors, up to constants. Plain loops."""
    total = 0.0
    for t in tuples:
        pred = 0.0
        for d in range(state.n_factors):
            pred += state.user_factors[t.user, d] * state.item_factors[t.item, d]
        pred += state.user_bias[t.user] + state.item_bias[t.item]
        total += -0.5 * tau * (t.rating - pred) ** 2
    for i in range(state.n_users):
        for d in range(state.n_factors):
            total += -0.5 * state.prec_user[d] * state.user_factors[i, d] ** 2
        total += -0.5 * state.prec_user_bias * state.user_bias[i] ** 2
    for j in range(state.n_items):
        for d in range(state.n_factors):
            total += -0.5 * state.prec_item[d] * state.item_factors[j, d] ** 2
        total += -0.5 * state.prec_item_bias * state.item_bias[j] ** 2
    return total


def fd_gradient(state: ChainState, tuples, tau: float, kind: str, index: int,
                step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``log_joint`` in one parameter group."""

    def perturbed(delta, d=None):
        s = state.copy()
        if kind == "user":
            s.user_factors[index, d] += delta
        elif kind == "item":
            s.item_factors[index, d] += delta
        elif kind == "user_bias":
            s.user_bias[index] += delta
        elif kind == "item_bias":
            s.item_bias[index] += delta
        else:
            raise ValueError(kind)
        return log_joint(s, tuples, tau)

    if kind in ("user", "item"):
        out = np.empty(state.n_factors)
        for d in range(state.n_factors):
            out[d] = (perturbed(step, d) - perturbed(-step, d)) / (2 * step)
        return out
    return np.array([(perturbed(step) - perturbed(-step)) / (2 * step)])


def enumerate_minibatches(tuples, m):
    """All ordered with-replacement minibatches of size m."""
    for combo in itertools.product(range(len(tuples)), repeat=m):
        yield [tuples[k] for k in combo]


def reference_full_gradient_user(state, tuples, user, tau):
    """Loop-based gradient oracle for one user's factors."""
    total = np.zeros(state.n_factors)
    for t in tuples:
        if t.user != user:
            continue
        pred = float(
            state.user_factors[t.user] @ state.item_factors[t.item]
            + state.user_bias[t.user]
            + state.item_bias[t.item]
        )
        total += tau * (t.rating - pred) * state.item_factors[t.item]
    return total - state.prec_user * state.user_factors[user]


def op_level_sweep(state, block, minibatch, v_s, h_user, h_item, eps, noise, tau,
                   langevin=True):
    """Replay one simultaneous minibatch update through the per-row ops.

    Mirrors the vectorized sweep's draw order (present users ascending,
    then items, then user biases, then item biases) and installs all new
    values only after everything is computed. Returns updated copies of
    the four parameter arrays.
    """
    import math

    from dbmf.samplers import ZeroNoise, dsgld_update_item, dsgld_update_user
    from dbmf.core import minibatch_mean_item_bias_score, minibatch_mean_user_bias_score

    src = noise if langevin else ZeroNoise()
    present_users = sorted({t.user for t in minibatch})
    present_items = sorted({t.item for t in minibatch})
    new_u = {
        i: dsgld_update_user(state, block, minibatch, i, v_s, h_user[i], eps, src, tau)
        for i in present_users
    }
    new_v = {
        j: dsgld_update_item(state, block, minibatch, j, v_s, h_item[j], eps, src, tau)
        for j in present_items
    }
    n_eff = block.n / v_s
    root = math.sqrt(eps)
    new_a = {}
    for i in present_users:
        mean = minibatch_mean_user_bias_score(state, minibatch, i, tau)
        drift = 0.5 * eps * (n_eff * mean - state.prec_user_bias * state.user_bias[i] / h_user[i])
        new_a[i] = state.user_bias[i] + drift + root * float(src.standard_normal(()))
    new_b = {}
    for j in present_items:
        mean = minibatch_mean_item_bias_score(state, minibatch, j, tau)
        drift = 0.5 * eps * (n_eff * mean - state.prec_item_bias * state.item_bias[j] / h_item[j])
        new_b[j] = state.item_bias[j] + drift + root * float(src.standard_normal(()))

    u = state.user_factors.copy()
    v = state.item_factors.copy()
    a = state.user_bias.copy()
    b = state.item_bias.copy()
    for i, val in new_u.items():
        u[i] = val
    for j, val in new_v.items():
        v[j] = val
    for i, val in new_a.items():
        a[i] = val
    for j, val in new_b.items():
        b[j] = val
    return u, v, a, b
