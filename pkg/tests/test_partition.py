import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbmf.data import SynthSpec, synth_generate
from dbmf.partition import (
    OrthogonalGroup,
    VisitFrequencies,
    is_orthogonal,
    schedule_round,
    split_column,
    split_square,
    visit_frequencies,
)
from helpers import T1_TUPLES


def small_dataset(n_users=8, n_items=8, seed=0, density=0.4):
    return synth_generate(
        SynthSpec(n_users=n_users, n_items=n_items, true_rank=2, noise_sd=0.1,
                  density=density, seed=seed)
    )


def t1_dataset():
    from dbmf.data import Dataset

    train = np.array([[t.user, t.item, t.rating] for t in T1_TUPLES])
    return Dataset(train=train, test=np.empty((0, 3)), n_users=2, n_items=2)


class TestSplitSquare:
    def test_single_block(self):
        plan = split_square(small_dataset(), 1)
        assert plan.n_blocks == 1
        assert plan.groups == [OrthogonalGroup((0,))]

    def test_two_by_two_groups_are_diagonals(self):
        plan = split_square(small_dataset(), 2)
        assert plan.n_blocks == 4
        ids = {gid: set(g.block_ids) for gid, g in enumerate(plan.groups)}
        # grid ids: 0 1 / 2 3 ; main diagonal and anti-diagonal
        assert ids[0] == {0, 3}
        assert ids[1] == {1, 2}

    def test_t1_tiles_exactly(self):
        plan = split_square(t1_dataset(), 2)
        total = plan.validate()
        assert total == 3
        membership = []
        for t in T1_TUPLES:
            owners = [
                bid for bid, blk in plan.blocks.items()
                if blk.row_range[0] <= t.user < blk.row_range[1]
                and blk.col_range[0] <= t.item < blk.col_range[1]
            ]
            membership.append(owners)
        assert all(len(owners) == 1 for owners in membership)

    def test_oversized_split_rejected(self):
        with pytest.raises(ValueError):
            split_square(t1_dataset(), 3)

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_tiling_conservation(self, p):
        ds = small_dataset(n_users=10, n_items=9, seed=p)
        plan = split_square(ds, p)
        assert sum(blk.n for blk in plan.blocks.values()) == ds.n_train
        # pairwise disjoint triples
        seen = set()
        for blk in plan.blocks.values():
            for row in zip(blk.users.tolist(), blk.items.tolist(), blk.ratings.tolist()):
                assert row not in seen
                seen.add(row)

    @pytest.mark.parametrize("p", [2, 3, 4])
    def test_groups_are_orthogonal_and_cover(self, p):
        plan = split_square(small_dataset(n_users=12, n_items=12, seed=p), p)
        plan.validate()
        assert len(plan.groups) == p
        all_ids = set()
        for group in plan.groups:
            assert len(group.block_ids) == p
            all_ids.update(group.block_ids)
        assert all_ids == set(plan.blocks)

    def test_remainder_goes_to_last_stripe(self):
        plan = split_square(small_dataset(n_users=10, n_items=10), 3)
        assert plan.row_boundaries == [0, 3, 6, 10]


class TestSplitColumn:
    def test_whole_matrix(self):
        ds = small_dataset()
        plan = split_column(ds, 1)
        assert plan.n_blocks == 1
        blk = plan.blocks[0]
        assert blk.row_range == (0, ds.n_users)
        assert blk.col_range == (0, ds.n_items)

    def test_two_stripes_on_four_users(self):
        ds = small_dataset(n_users=4, n_items=5, density=0.9)
        plan = split_column(ds, 2)
        assert plan.blocks[0].row_range == (0, 2)
        assert plan.blocks[1].row_range == (2, 4)
        for blk in plan.blocks.values():
            assert blk.col_range == (0, 5)

    def test_stripes_partition_dataset(self):
        ds = small_dataset(n_users=9, n_items=7, seed=3)
        plan = split_column(ds, 3)
        rows = []
        for blk in plan.blocks.values():
            rows += list(zip(blk.users.tolist(), blk.items.tolist(), blk.ratings.tolist()))
        want = sorted(map(tuple, ds.train[:, :3].tolist()))
        got = sorted((float(u), float(i), r) for u, i, r in rows)
        assert got == want

    def test_each_block_is_singleton_group(self):
        plan = split_column(small_dataset(), 4)
        assert [g.block_ids for g in plan.groups] == [(0,), (1,), (2,), (3,)]

    def test_too_many_stripes_rejected(self):
        with pytest.raises(ValueError):
            split_column(small_dataset(n_users=4), 5)


class TestOrthogonality:
    def test_diagonal_blocks_orthogonal(self):
        plan = split_square(small_dataset(), 2)
        assert is_orthogonal(plan.blocks[0], plan.blocks[3])
        assert is_orthogonal(plan.blocks[1], plan.blocks[2])
        assert not is_orthogonal(plan.blocks[0], plan.blocks[1])

    def test_column_stripes_share_columns(self):
        plan = split_column(small_dataset(), 2)
        assert not is_orthogonal(plan.blocks[0], plan.blocks[1])

    def test_block_not_orthogonal_to_itself(self):
        plan = split_square(small_dataset(), 2)
        for blk in plan.blocks.values():
            assert not is_orthogonal(blk, blk)


class TestSchedule:
    def test_two_chain_rotation(self):
        plan = split_square(small_dataset(), 2)
        first = schedule_round(plan, 2, 0)
        assert first[0] == plan.groups[0]
        assert first[1] == plan.groups[1]
        second = schedule_round(plan, 2, 1)
        assert second[0] == plan.groups[1]
        assert second[1] == plan.groups[0]

    def test_single_chain_single_group_constant(self):
        plan = split_column(small_dataset(), 1)
        for t in range(5):
            assert schedule_round(plan, 1, t)[0] == plan.groups[0]

    def test_distinct_chains_get_distinct_groups(self):
        plan = split_column(small_dataset(), 4)
        for t in range(8):
            groups = list(schedule_round(plan, 4, t).values())
            assert len({g.block_ids for g in groups}) == 4

    @given(st.integers(1, 4), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_fair_rotation_counts(self, chains, k):
        plan = split_column(small_dataset(n_users=8), 4)
        if chains > plan.n_groups:
            return
        g = plan.n_groups
        counts = {}
        for t in range(g * k):
            for c, group in schedule_round(plan, chains, t).items():
                counts[(c, group.block_ids)] = counts.get((c, group.block_ids), 0) + 1
        assert all(v == k for v in counts.values())

    def test_too_many_chains_rejected(self):
        plan = split_square(small_dataset(), 2)
        with pytest.raises(ValueError):
            schedule_round(plan, 3, 0)


class TestVisitFrequencies:
    def test_single_block(self):
        plan = split_column(small_dataset(), 1)
        vf = visit_frequencies(plan, 10)
        assert vf.per_block == {0: 1.0}

    def test_column_uniform(self):
        plan = split_column(small_dataset(), 4)
        vf = visit_frequencies(plan, 100)
        assert vf.per_block == {bid: pytest.approx(0.25) for bid in range(4)}
        assert sum(vf.per_group.values()) == pytest.approx(1.0)

    def test_square_two_by_two(self):
        plan = split_square(small_dataset(), 2)
        vf = visit_frequencies(plan, 100)
        for bid in plan.blocks:
            assert vf.per_block[bid] == pytest.approx(0.5)
        assert plan.block_visit_rate(0) == pytest.approx(0.5)

    def test_normalization_enforced(self):
        with pytest.raises(ValueError):
            VisitFrequencies(per_group={0: 0.6, 1: 0.6}, per_block={})


class TestSummary:
    def test_one_line_per_block(self):
        plan = split_square(small_dataset(n_users=6, n_items=6), 2)
        text = plan.summary()
        lines = text.splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("block 0: rows [0, 3) cols [0, 3) n=")
        total = sum(int(line.rsplit("n=", 1)[1]) for line in lines)
        assert total == sum(b.n for b in plan.blocks.values())
