import pytest
from hypothesis import given, strategies as st

from ilc_density.datamodel import (BEYOND, CategoryPartition, CountAnnotation, LossReport,
                                   clamp_raw_count, partition_categories)


def part(labels):
    return partition_categories(CountAnnotation("x", labels))


def test_partition_examples():
    # 0-based indices; labels [0, 2, BEYOND]
    assert part([0, 2, BEYOND]) == CategoryPartition(frozenset({0}), frozenset({1}), frozenset({2}))
    p = part([0, 0, 0, 0])
    assert p.absent == {0, 1, 2, 3} and not p.within and not p.beyond
    p = part([4, 1, 0, BEYOND, 3])
    assert (p.absent, p.within, p.beyond) == ({2}, {0, 1, 4}, {3})


@pytest.mark.parametrize("raw, label", [(0, 0), (4, 4), (5, BEYOND), (11, BEYOND)])
def test_clamp(raw, label):
    assert clamp_raw_count(raw) == label


def test_clamp_rejects_negative():
    with pytest.raises(ValueError):
        clamp_raw_count(-1)


def test_clamp_custom_threshold():
    assert clamp_raw_count(3, t_tilde=3) == BEYOND
    assert clamp_raw_count(2, t_tilde=3) == 2


def test_annotation_rejects_raw_counts():
    with pytest.raises(ValueError):
        CountAnnotation("x", [0, 7])
    with pytest.raises(ValueError):
        CountAnnotation("x", [])


def test_annotation_is_immutable():
    a = CountAnnotation("x", [1, 2])
    with pytest.raises(AttributeError):
        a.counts = (0, 0)


@given(st.lists(st.integers(0, 50), min_size=1, max_size=30))
def test_partition_covers_all(raw):
    ann = CountAnnotation.from_raw("x", raw)
    p = partition_categories(ann)
    assert len(p.absent) + len(p.within) + len(p.beyond) == len(raw)
    assert p.absent | p.within | p.beyond == set(range(len(raw)))
    assert not (p.absent & p.within) and not (p.absent & p.beyond) and not (p.within & p.beyond)


@given(st.lists(st.integers(0, 50), min_size=1, max_size=10))
def test_reclamping_is_idempotent(raw):
    once = CountAnnotation.from_raw("x", raw)
    # re-clamping an already clamped label (BEYOND read back as >= 5) changes nothing
    again = CountAnnotation.from_raw("x", [5 if c == BEYOND else c for c in once.counts])
    assert once == again
    assert partition_categories(once) == partition_categories(again)


def test_loss_report_total():
    r = LossReport(class_loss=1, sp_plus=2, sp_minus=3, mse=4, rank=10, lambda_rank=0.1)
    assert r.total == pytest.approx(11.0)
