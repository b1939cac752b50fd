"""Rating ingestion, ID relabeling, train/test splitting, and synthetic
data with known ground truth.

Input format: UTF-8 text, one rating per line, tab-separated
``user<TAB>item<TAB>rating``. User/item tokens are arbitrary strings;
internal indices are dense and 0-based, assigned by a seeded random
permutation so contiguous index ranges behave like random partitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    def __init__(self, message, line_no):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class GroundTruth:
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    noise_sd: float

    def predict_all(self, users, items):
        return (
            np.einsum("nd,nd->n", self.user_factors[users], self.item_factors[items])
            + self.user_bias[users]
            + self.item_bias[items]
        )


@dataclass
class Dataset:
    """Train/test rating triples as (N, 3) arrays of (user, item, rating).

    ``user_ids``/``item_ids`` map original tokens to internal indices;
    the inverse lists recover the original tokens.
    """

    train: np.ndarray
    test: np.ndarray
    n_users: int
    n_items: int
    user_ids: dict = field(default_factory=dict)
    item_ids: dict = field(default_factory=dict)
    user_tokens: list = field(default_factory=list)
    item_tokens: list = field(default_factory=list)
    truth: GroundTruth | None = None

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.float64).reshape(-1, 3)
        self.test = np.asarray(self.test, dtype=np.float64).reshape(-1, 3)

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_test(self) -> int:
        return len(self.test)


@dataclass(frozen=True)
class SynthSpec:
    n_users: int
    n_items: int
    true_rank: int
    noise_sd: float
    density: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.density * self.n_users * self.n_items < 1:
            raise ValueError("density too low to draw a single rating")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


def load_ratings(path, seed: int = 0) -> Dataset:
    """Load tab-separated triples; everything lands in the train split.

    Tokens are relabeled to dense internal indices via a seeded random
    permutation of their first-appearance order.
    """
    users_raw, items_raw, ratings = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line_no)
            try:
                value = float(parts[2])
            except ValueError:
                raise ParseError(f"non-numeric rating {parts[2]!r}", line_no) from None
            if not np.isfinite(value):
                raise ParseError(f"non-finite rating {parts[2]!r}", line_no)
            users_raw.append(parts[0])
            items_raw.append(parts[1])
            ratings.append(value)

    user_ids, user_tokens = _relabel(users_raw, np.random.default_rng([int(seed), 0]))
    item_ids, item_tokens = _relabel(items_raw, np.random.default_rng([int(seed), 1]))
    n = len(ratings)
    train = np.empty((n, 3))
    for k in range(n):
        train[k] = (user_ids[users_raw[k]], item_ids[items_raw[k]], ratings[k])
    return Dataset(
        train=train,
        test=np.empty((0, 3)),
        n_users=len(user_tokens),
        n_items=len(item_tokens),
        user_ids=user_ids,
        item_ids=item_ids,
        user_tokens=user_tokens,
        item_tokens=item_tokens,
    )


def _relabel(tokens, rng):
    uniq = list(dict.fromkeys(tokens))
    perm = rng.permutation(len(uniq))
    mapping = {tok: int(perm[k]) for k, tok in enumerate(uniq)}
    inverse = [None] * len(uniq)
    for tok, idx in mapping.items():
        inverse[idx] = tok
    return mapping, inverse


def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> Dataset:
    """Seeded uniform split of the train triples, without replacement."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    pool = np.concatenate([dataset.train, dataset.test]) if dataset.n_test else dataset.train
    n = len(pool)
    n_test = int(round(test_fraction * n))
    order = np.random.default_rng([int(seed), 2]).permutation(n)
    test_idx = order[:n_test]
    train_idx = order[n_test:]
    return Dataset(
        train=pool[np.sort(train_idx)],
        test=pool[np.sort(test_idx)],
        n_users=dataset.n_users,
        n_items=dataset.n_items,
        user_ids=dataset.user_ids,
        item_ids=dataset.item_ids,
        user_tokens=dataset.user_tokens,
        item_tokens=dataset.item_tokens,
        truth=dataset.truth,
    )


def synth_generate(spec: SynthSpec) -> Dataset:
    """Low-rank ratings with Gaussian noise and recorded ground truth.

    Factors and biases are unit Gaussians scaled by 1/sqrt(true_rank);
    observed cells are sampled uniformly without replacement at the
    requested density.
    """
    rng = np.random.default_rng([int(spec.seed), 3])
    scale = 1.0 / np.sqrt(spec.true_rank)
    truth = GroundTruth(
        user_factors=scale * rng.standard_normal((spec.n_users, spec.true_rank)),
        item_factors=scale * rng.standard_normal((spec.n_items, spec.true_rank)),
        user_bias=scale * rng.standard_normal(spec.n_users),
        item_bias=scale * rng.standard_normal(spec.n_items),
        noise_sd=spec.noise_sd,
    )
    n_cells = int(round(spec.density * spec.n_users * spec.n_items))
    cells = rng.choice(spec.n_users * spec.n_items, size=n_cells, replace=False)
    users = cells // spec.n_items
    items = cells % spec.n_items
    values = truth.predict_all(users, items) + spec.noise_sd * rng.standard_normal(n_cells)
    train = np.column_stack([users.astype(np.float64), items.astype(np.float64), values])
    return Dataset(
        train=train,
        test=np.empty((0, 3)),
        n_users=spec.n_users,
        n_items=spec.n_items,
        user_ids={k: k for k in range(spec.n_users)},
        item_ids={k: k for k in range(spec.n_items)},
        user_tokens=list(range(spec.n_users)),
        item_tokens=list(range(spec.n_items)),
        truth=truth,
    )


def dump_ratings(dataset: Dataset, path, include_test: bool = True) -> None:
    """Write triples back out in the input format, using original tokens."""
    rows = [dataset.train]
    if include_test and dataset.n_test:
        rows.append(dataset.test)
    with open(path, "w", encoding="utf-8") as fh:
        for block in rows:
            for u, i, r in block:
                fh.write(f"{dataset.user_tokens[int(u)]}\t{dataset.item_tokens[int(i)]}\t{r:.17g}\n")


def dump_truth(truth: GroundTruth, path) -> None:
    """Sidecar dump of the generating factors, row-major text."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"noise_sd {truth.noise_sd:.17g}\n")
        for name, arr in (
            ("user_factors", truth.user_factors),
            ("item_factors", truth.item_factors),
            ("user_bias", truth.user_bias),
            ("item_bias", truth.item_bias),
        ):
            arr2 = np.atleast_2d(arr)
            fh.write(f"{name} {arr2.shape[0]} {arr2.shape[1]}\n")
            for row in arr2:
                fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")
