import numpy as np
import pytest
from hypothesis import given, reject, settings
from hypothesis import strategies as st

from fedcanon.partitioning import (
    PartitionError,
    PartitionSpec,
    heterogeneity_report,
    largest_remainder,
    partition,
    partition_indices,
)
from fedcanon.problems import Dataset, synth_classification


@pytest.fixture(scope="module")
def balanced10():
    return synth_classification(1000, 2, 10, seed=0)


def test_single_client_gets_everything(balanced10):
    for spec in (PartitionSpec("iid", 1), PartitionSpec("dirichlet", 1, eta=0.1)):
        (shard,) = partition(balanced10, spec)
        np.testing.assert_array_equal(shard.indices, np.arange(1000))


def test_iid_equal_split():
    ds = synth_classification(10, 2, 2, seed=0)
    shards = partition(ds, PartitionSpec("iid", 2, seed=3))
    assert sorted(s.m for s in shards) == [5, 5]
    assert [s.owner for s in shards] == [0, 1]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["iid", "dirichlet"]), st.integers(1, 12), st.floats(0.05, 50.0), st.integers(0, 10_000))
def test_shards_disjoint_and_exhaustive(mode, n_clients, eta, seed):
    ds = synth_classification(150, 2, 5, seed=1)
    try:
        idx = partition_indices(ds, PartitionSpec(mode, n_clients, eta, seed))
    except PartitionError:
        # strong skew with more clients than classes can leave a client empty on every redraw
        assert mode == "dirichlet" and eta < 0.2 and n_clients > 5
        reject()
    assert len(idx) == n_clients and all(len(s) >= 1 for s in idx)
    allidx = np.concatenate(idx)
    assert len(allidx) == len(ds)
    np.testing.assert_array_equal(np.sort(allidx), np.arange(len(ds)))


def test_partition_is_deterministic(balanced10):
    spec = PartitionSpec("dirichlet", 10, 0.3, seed=8)
    a, b = partition_indices(balanced10, spec), partition_indices(balanced10, spec)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_dirichlet_small_eta_is_skewed(balanced10):
    fracs = [heterogeneity_report(partition(balanced10, PartitionSpec("dirichlet", 10, 0.05, s)), balanced10)
             .mean_max_class_fraction for s in range(20)]
    assert np.mean(fracs) >= 0.5


def test_skew_monotone_in_eta(balanced10):
    def mean_tv(eta):
        return np.mean([heterogeneity_report(partition(balanced10, PartitionSpec("dirichlet", 10, eta, s)),
                                             balanced10).mean_tv for s in range(20)])

    assert mean_tv(0.05) > mean_tv(1.0) > mean_tv(100.0)


def test_iid_split_has_small_tv():
    ds = synth_classification(20_000, 2, 10, seed=2)
    tvs = [heterogeneity_report(partition(ds, PartitionSpec("iid", 10, seed=s)), ds).mean_tv for s in range(5)]
    assert max(tvs) <= 0.1


def test_tv_of_one_client_per_class(balanced10):
    shards = [np.flatnonzero(balanced10.labels == c) for c in range(10)]
    rep = heterogeneity_report(shards, balanced10)
    np.testing.assert_allclose(rep.tv_distance, 0.9)
    assert rep.histograms.sum() == 1000


def test_single_class_dataset_has_zero_tv():
    ds = Dataset.from_dense(np.ones((30, 1)), np.zeros(30, dtype=int), num_classes=3)
    rep = heterogeneity_report(partition(ds, PartitionSpec("iid", 4, seed=0)), ds)
    np.testing.assert_allclose(rep.tv_distance, 0.0)


def test_too_few_samples():
    ds = synth_classification(3, 2, 2, seed=0)
    with pytest.raises(PartitionError):
        partition(ds, PartitionSpec("iid", 4))


def test_min_one_sample_unreachable_raises():
    # a single sample per class cannot be spread over many clients
    ds = synth_classification(12, 2, 12, seed=0)
    with pytest.raises(PartitionError, match="Dirichlet draws"):
        partition(ds, PartitionSpec("dirichlet", 12, eta=0.01, seed=0))


@pytest.mark.parametrize("bad", [dict(mode="shards"), dict(mode="dirichlet"), dict(mode="dirichlet", eta=0.0),
                                 dict(n_clients=0)])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        PartitionSpec.from_dict(bad)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.integers(0, 500))
def test_largest_remainder_sums_and_tracks(weights, total):
    w = np.asarray(weights)
    if w.sum() == 0:
        w = np.ones_like(w)
    p = w / w.sum()
    counts = largest_remainder(p, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - p * total) < 1.0 + 1e-9)
