import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vibmark import mss
from vibmark.info import JointPMF, entropy, random_joint
from vibmark.mss import Partition

BELL = [1, 1, 2, 5, 15, 52, 203, 877]


@pytest.mark.parametrize("n", range(1, 8))
def test_partition_count_is_bell_number(n):
    parts = mss.enumerate_partitions(n)
    assert len(parts) == BELL[n]
    assert len({p.block_of for p in parts}) == BELL[n]


def test_partitions_match_itertools_oracle():
    # every labelling of 5 symbols, canonicalised, covers each partition once
    labels = {tuple(mss.canonical(lab)) for lab in itertools.product(range(5), repeat=5)}
    assert labels == {p.block_of for p in mss.enumerate_partitions(5)}


def test_enumeration_guard():
    with pytest.raises(ValueError):
        mss.enumerate_partitions(mss.MAX_ENUM + 1)
    with pytest.raises(ValueError):
        mss.enumerate_partitions(0)


def test_partition_helpers():
    p = Partition([7, 3, 7, 1])
    assert p.block_of == (0, 1, 0, 2)
    assert p.n_blocks == 3
    assert p.blocks() == [[0, 2], [1], [3]]
    assert p.restrict([1, 3]).block_of == (0, 1)
    assert str(p) == "0,2|1|3"


def test_four_symbol_channel():
    j = mss.four_symbol_channel()
    rep = mss.verify_theorems(j)
    assert rep.mss.block_of == (0, 0, 1, 1)
    assert rep.rate == pytest.approx(np.log(2), abs=1e-15)
    assert rep.theorem2_holds and rep.theorem3_holds and not rep.flagged


def test_copy_and_independent_channels():
    rep = mss.verify_theorems(mss.copy_channel())
    assert rep.mss.block_of == (0, 1)
    assert rep.rate == pytest.approx(np.log(2))
    rep = mss.verify_theorems(mss.independent_channel(2, 4))
    assert rep.mss.n_blocks == 1 and rep.rate == pytest.approx(0.0, abs=1e-15)
    assert rep.theorem2_holds and rep.theorem3_holds


def test_zero_mass_symbols_are_grouped_but_not_flagged():
    j = JointPMF([[0.25, 0.0, 0.25, 0.0], [0.25, 0.0, 0.25, 0.0]])
    rep = mss.verify_theorems(j)
    assert rep.mss.block_of[1] == rep.mss.block_of[3]
    assert rep.flags and not rep.flagged
    assert rep.theorem2_holds and rep.theorem3_holds


def test_sufficiency_report_fields():
    j = mss.four_symbol_channel()
    rep = mss.is_sufficient(j, Partition([0, 1, 0, 1]))
    assert not rep.sufficient
    assert rep.gap == pytest.approx(np.log(2))
    with pytest.raises(ValueError):
        mss.is_sufficient(j, Partition([0, 1]))


def test_statistic_rate_is_entropy_of_block_mass():
    j = random_joint(np.random.default_rng(5), 2, 5)
    t = Partition([0, 0, 1, 2, 2])
    mass = [j.p_x[:2].sum(), j.p_x[2], j.p_x[3:].sum()]
    assert mss.statistic_rate(j, t) == pytest.approx(entropy(mass), abs=1e-14)


@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_planted_structure_is_recovered(m, x, groups, seed):
    j = mss.planted_joint(np.random.default_rng(seed), m, x, groups)
    rep = mss.verify_theorems(j)
    if not rep.flagged:
        assert rep.theorem2_holds and rep.theorem3_holds
        # the MSS never has more blocks than planted posterior classes
        assert rep.mss.n_blocks <= min(groups, x)


@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_theorems_on_random_joints(m, x, seed):
    rep = mss.verify_theorems(random_joint(np.random.default_rng(seed), m, x))
    if not rep.flagged:
        assert rep.theorem2_holds and rep.theorem3_holds


def test_report_serialises():
    d = mss.verify_theorems(mss.four_symbol_channel()).to_dict()
    assert d["mss"] == [0, 0, 1, 1]
    assert d["theorem2_holds"] is True
    assert all("rate" in s for s in d["sufficient"])
