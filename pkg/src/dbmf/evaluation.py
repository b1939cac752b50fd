"""RMSE, posterior predictive averaging, and baseline-relative reporting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ChainState, predict


def predict_pairs(state: ChainState, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Vectorized point predictions for parallel index arrays."""
    return (
        np.einsum("nd,nd->n", state.user_factors[users], state.item_factors[items])
        + state.user_bias[users]
        + state.item_bias[items]
    )


def rmse(predictions, targets, clip: tuple[float, float] | None = None) -> float:
    """Root mean squared error; optionally clip predictions to a rating range."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets must have the same shape")
    if predictions.size == 0:
        raise ValueError("empty test set")
    if clip is not None:
        predictions = np.clip(predictions, clip[0], clip[1])
    # a blown-up state reads as inf, not a warning
    with np.errstate(over="ignore"):
        err = predictions - targets
        return float(np.sqrt(np.mean(err * err)))


@dataclass
class PredictiveEnsemble:
    """Snapshots pooled from one or more chains, all weighted equally."""

    snapshots: list[ChainState]

    def __post_init__(self):
        if len(self.snapshots) < 1:
            raise ValueError("ensemble needs at least one snapshot")
        d = self.snapshots[0].n_factors
        for snap in self.snapshots:
            if snap.n_factors != d:
                raise ValueError("snapshots disagree on factor dimension")

    @property
    def size(self) -> int:
        return len(self.snapshots)

    @classmethod
    def from_store(cls, store) -> "PredictiveEnsemble":
        snaps = [snap for _, snap in store.all_snapshots()]
        return cls(snapshots=snaps)


def posterior_predict(ensemble: PredictiveEnsemble, user: int, item: int) -> float:
    """Predictive mean: average of per-snapshot point predictions."""
    total = 0.0
    for snap in ensemble.snapshots:
        total += predict(snap, user, item)
    return total / ensemble.size


class RunningPredictive:
    """Incremental posterior-predictive mean over a fixed evaluation set.

    Adding a snapshot costs one vectorized pass over the pairs, so RMSE
    evaluation stays O(set size) per call no matter how many snapshots
    have been folded in.
    """

    def __init__(self, users, items, targets):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.float64)
        self._sum = np.zeros(len(self.targets))
        self.count = 0

    def add_snapshot(self, state: ChainState) -> None:
        self._sum += predict_pairs(state, self.users, self.items)
        self.count += 1

    def mean_predictions(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no snapshots folded in yet")
        return self._sum / self.count

    def rmse(self, clip=None) -> float:
        return rmse(self.mean_predictions(), self.targets, clip=clip)


def relative_improvement(r_x: float, r_d: float) -> float:
    """Baseline-relative RMSE change (r_d - r_x) / r_d."""
    if r_d <= 0:
        raise ValueError("baseline RMSE must be positive")
    return (r_d - r_x) / r_d
