"""Rating-matrix block decomposition and the cyclic block scheduler.

Blocks tile the training ratings exactly; an orthogonal group is a set of
blocks sharing no rows and no columns, so one chain can update all of a
group's blocks in parallel with the same result as updating them one at
a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RatingsBlock


@dataclass(frozen=True)
class OrthogonalGroup:
    block_ids: tuple[int, ...]


@dataclass
class VisitFrequencies:
    """Normalized long-run visiting rates of the cyclic scheduler.

    ``per_group`` sums to one over the rotation; every block inherits its
    group's rate in ``per_block``, which is the scaling rate used by the
    distributed update rule.
    """

    per_group: dict[int, float]
    per_block: dict[int, float]

    def __post_init__(self):
        total = sum(self.per_group.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"group visit rates must sum to 1, got {total!r}")
        for v in self.per_group.values():
            if not 0 < v <= 1:
                raise ValueError("visit rates must lie in (0, 1]")


@dataclass
class PartitionPlan:
    """Grid decomposition of the rating matrix plus its orthogonal groups."""

    row_boundaries: list[int]
    col_boundaries: list[int]
    blocks: dict[int, RatingsBlock]
    groups: list[OrthogonalGroup]
    scheme: str
    grid: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block_visit_rate(self, block_id: int) -> float:
        """Rate at which a chain's tour lands on this block: 1 / n_groups."""
        if block_id not in self.blocks:
            raise KeyError(f"unknown block id {block_id}")
        return 1.0 / self.n_groups

    def group_of_block(self, block_id: int) -> int:
        for gid, group in enumerate(self.groups):
            if block_id in group.block_ids:
                return gid
        raise KeyError(f"block {block_id} belongs to no group")

    def summary(self) -> str:
        """One line per block: id, row range, col range, rating count."""
        lines = []
        for bid in sorted(self.blocks):
            blk = self.blocks[bid]
            lines.append(
                f"block {bid}: rows [{blk.row_range[0]}, {blk.row_range[1]}) "
                f"cols [{blk.col_range[0]}, {blk.col_range[1]}) n={blk.n}"
            )
        return "\n".join(lines)

    def validate(self):
        total = sum(blk.n for blk in self.blocks.values())
        for blk in self.blocks.values():
            blk.validate()
        for group in self.groups:
            ids = list(group.block_ids)
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    if not is_orthogonal(self.blocks[ids[i]], self.blocks[ids[j]]):
                        raise ValueError(f"group {group} contains non-orthogonal blocks")
        return total


def _cuts(n: int, parts: int) -> list[int]:
    # equal-size stripes; the remainder goes to the last one
    size = n // parts
    cuts = [i * size for i in range(parts)]
    cuts.append(n)
    return cuts


def _bin_triples(dataset, row_cuts, col_cuts):
    """Assign each training triple to its grid cell."""
    train = dataset.train
    users = train[:, 0].astype(np.int64)
    items = train[:, 1].astype(np.int64)
    rbin = np.clip(np.searchsorted(row_cuts, users, side="right") - 1, 0, len(row_cuts) - 2)
    cbin = np.clip(np.searchsorted(col_cuts, items, side="right") - 1, 0, len(col_cuts) - 2)
    return users, items, train[:, 2], rbin, cbin


def split_square(dataset, p: int) -> PartitionPlan:
    """p x p grid with the p diagonals as orthogonal groups.

    Group g holds blocks (r, (r + g) mod p), so each group covers every
    row stripe and every column stripe exactly once.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if p > min(dataset.n_users, dataset.n_items):
        raise ValueError(f"p={p} exceeds matrix dimensions {dataset.n_users}x{dataset.n_items}")
    row_cuts = _cuts(dataset.n_users, p)
    col_cuts = _cuts(dataset.n_items, p)
    users, items, ratings, rbin, cbin = _bin_triples(dataset, row_cuts, col_cuts)

    blocks = {}
    grid = {}
    for r in range(p):
        for c in range(p):
            bid = r * p + c
            mask = (rbin == r) & (cbin == c)
            blocks[bid] = RatingsBlock(
                users=users[mask],
                items=items[mask],
                ratings=ratings[mask],
                row_range=(row_cuts[r], row_cuts[r + 1]),
                col_range=(col_cuts[c], col_cuts[c + 1]),
            )
            grid[(r, c)] = bid
    groups = [
        OrthogonalGroup(tuple(grid[(r, (r + g) % p)] for r in range(p))) for g in range(p)
    ]
    return PartitionPlan(
        row_boundaries=row_cuts,
        col_boundaries=col_cuts,
        blocks=blocks,
        groups=groups,
        scheme="square",
        grid=grid,
    )


def split_column(dataset, s: int) -> PartitionPlan:
    """s row stripes sharing all columns; each block is its own group."""
    if s < 1:
        raise ValueError("s must be >= 1")
    if s > dataset.n_users:
        raise ValueError(f"s={s} exceeds user count {dataset.n_users}")
    row_cuts = _cuts(dataset.n_users, s)
    col_cuts = [0, dataset.n_items]
    users, items, ratings, rbin, _ = _bin_triples(dataset, row_cuts, col_cuts)

    blocks = {}
    grid = {}
    for r in range(s):
        mask = rbin == r
        blocks[r] = RatingsBlock(
            users=users[mask],
            items=items[mask],
            ratings=ratings[mask],
            row_range=(row_cuts[r], row_cuts[r + 1]),
            col_range=(0, dataset.n_items),
        )
        grid[(r, 0)] = r
    groups = [OrthogonalGroup((r,)) for r in range(s)]
    return PartitionPlan(
        row_boundaries=row_cuts,
        col_boundaries=col_cuts,
        blocks=blocks,
        groups=groups,
        scheme="column",
        grid=grid,
    )


def is_orthogonal(b1: RatingsBlock, b2: RatingsBlock) -> bool:
    """True iff the blocks share no row range and no column range."""

    def disjoint(a, b):
        return a[1] <= b[0] or b[1] <= a[0]

    return disjoint(b1.row_range, b2.row_range) and disjoint(b1.col_range, b2.col_range)


def schedule_round(plan: PartitionPlan, chain_count: int, t: int) -> dict[int, OrthogonalGroup]:
    """Cyclic-shift assignment: chain c works group (c + t) mod G."""
    g = plan.n_groups
    if chain_count > g:
        raise ValueError(f"chain_count {chain_count} exceeds group count {g}")
    if chain_count < 1:
        raise ValueError("chain_count must be >= 1")
    return {c: plan.groups[(c + t) % g] for c in range(chain_count)}


def visit_frequencies(plan: PartitionPlan, horizon: int) -> VisitFrequencies:
    """Empirical visiting rates of one chain over ``horizon`` rounds."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    counts = {gid: 0 for gid in range(plan.n_groups)}
    for t in range(horizon):
        group = schedule_round(plan, 1, t)[0]
        gid = plan.groups.index(group)
        counts[gid] += 1
    per_group = {gid: counts[gid] / horizon for gid in counts}
    per_block = {}
    for gid, group in enumerate(plan.groups):
        for bid in group.block_ids:
            per_block[bid] = per_group[gid]
    return VisitFrequencies(per_group=per_group, per_block=per_block)
