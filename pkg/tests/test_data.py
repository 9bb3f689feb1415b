import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from nflsim.data import (
    AllocationScheme,
    SyntheticTaskSpec,
    allocate,
    class_means,
    export_clients,
    generate_task,
    import_clients,
    pooled_test,
)
from nflsim.errors import ConfigurationError


def all_indices(clients, dataset):
    """Map every allocated sample back to its row in ``dataset`` by exact match."""
    lookup = {row.tobytes(): i for i, row in enumerate(dataset.inputs)}
    rows = []
    for c in clients:
        for part in (c.train, c.test):
            rows.extend(lookup[x.tobytes()] for x in part.inputs)
    return rows


class TestGenerate:
    def test_degenerate_noise_collapses_to_means(self):
        spec = SyntheticTaskSpec(noise=1e-9, n_total=40)
        ds = generate_task(spec)
        means = class_means(spec)
        assert np.abs(ds.inputs - means[ds.labels]).max() < 1e-6

    def test_balanced_classes(self):
        ds = generate_task(SyntheticTaskSpec(n_classes=4, n_total=400))
        assert np.array_equal(np.bincount(ds.labels), [100] * 4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 6), st.integers(6, 300))
    def test_balance_within_one(self, c, n):
        ds = generate_task(SyntheticTaskSpec(n_classes=c, n_total=max(n, c)))
        counts = np.bincount(ds.labels, minlength=c)
        assert counts.max() - counts.min() <= 1 and counts.sum() == max(n, c)

    def test_rerun_is_byte_identical(self):
        spec = SyntheticTaskSpec(seed=7, n_total=100)
        a, b = generate_task(spec), generate_task(spec)
        assert a.inputs.tobytes() == b.inputs.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_means_on_sphere(self):
        spec = SyntheticTaskSpec(separation=2.5)
        np.testing.assert_allclose(np.linalg.norm(class_means(spec), axis=1), 2.5)

    @pytest.mark.parametrize("kw", [{"n_classes": 1}, {"n_features": 1}, {"separation": 0}, {"noise": 0}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigurationError):
            SyntheticTaskSpec(**kw)


class TestAllocate:
    def test_iid_equal_sizes_and_uniform_histograms(self):
        for seed in range(20):
            ds = generate_task(SyntheticTaskSpec(n_total=1000, seed=seed))
            clients = allocate(ds, AllocationScheme(kind="iid"), 10, seed)
            for c in clients:
                assert c.size == 100
                labels = np.concatenate([c.train.labels, c.test.labels])
                assert chisquare(np.bincount(labels, minlength=4)).pvalue > 0.01

    def test_non_iid_two_classes(self):
        ds = generate_task(SyntheticTaskSpec(n_classes=4, n_total=2000))
        for c in allocate(ds, AllocationScheme(kind="non_iid", k=2), 20, 0):
            assert np.count_nonzero(c.histogram) == 2

    def test_mixed_groups(self):
        ds = generate_task(SyntheticTaskSpec(n_classes=4, n_total=2000))
        scheme = AllocationScheme(kind="mixed", groups=((5, 4), (3, 2), (2, 1)))
        counts = [np.count_nonzero(c.histogram) for c in allocate(ds, scheme, 10, 0)]
        assert counts == [4] * 5 + [2] * 3 + [1] * 2

    def test_mixed_groups_must_cover_clients(self):
        ds = generate_task(SyntheticTaskSpec(n_total=400))
        with pytest.raises(ConfigurationError):
            allocate(ds, AllocationScheme(kind="mixed", groups=((5, 4),)), 10, 0)

    def test_k_larger_than_classes(self):
        ds = generate_task(SyntheticTaskSpec(n_classes=4, n_total=400))
        with pytest.raises(ConfigurationError):
            allocate(ds, AllocationScheme(kind="non_iid", k=5), 10, 0)

    @settings(max_examples=20, deadline=None)
    @given(kind=st.sampled_from(["iid", "non_iid"]), sizes=st.sampled_from(["equal", "log_normal"]),
           n_clients=st.integers(2, 12), seed=st.integers(0, 10_000))
    def test_partition_conserves_samples(self, kind, sizes, n_clients, seed):
        ds = generate_task(SyntheticTaskSpec(n_total=600, seed=seed))
        scheme = AllocationScheme(kind=kind, k=2 if kind == "non_iid" else None, sizes=sizes)
        clients = allocate(ds, scheme, n_clients, seed)
        rows = all_indices(clients, ds)
        assert len(rows) == len(set(rows)) == len(ds)
        assert sum(c.size for c in clients) == len(ds)

    def test_histogram_is_train_histogram(self):
        ds = generate_task(SyntheticTaskSpec(n_total=800))
        for c in allocate(ds, AllocationScheme(kind="non_iid", k=3, sizes="log_normal"), 8, 3):
            expected = np.bincount(c.train.labels, minlength=4) / len(c.train)
            assert np.array_equal(c.histogram, expected)
            assert c.histogram.sum() == pytest.approx(1.0)

    def test_train_and_test_share_classes(self):
        ds = generate_task(SyntheticTaskSpec(n_total=2000))
        for c in allocate(ds, AllocationScheme(kind="non_iid", k=2), 20, 1):
            assert set(np.unique(c.test.labels)) == set(np.unique(c.train.labels))
            assert len(c.test) == pytest.approx(0.1 * c.size, abs=2)

    def test_log_normal_spread_grows_with_sigma(self):
        ds = generate_task(SyntheticTaskSpec(n_total=2000))
        spreads = []
        for sigma in (0.25, 0.5, 1.0):
            scheme = AllocationScheme(kind="iid", sizes="log_normal", sigma_ln=sigma)
            stds = [np.std([c.size for c in allocate(ds, scheme, 20, seed)]) for seed in range(50)]
            spreads.append(np.mean(stds))
        assert spreads[0] < spreads[1] < spreads[2]


def test_export_import_round_trip(tmp_path):
    ds = generate_task(SyntheticTaskSpec(n_total=200))
    clients = allocate(ds, AllocationScheme(kind="non_iid", k=2), 5, 0)
    path = tmp_path / "clients.csv"
    export_clients(clients, path)
    back = import_clients(path)
    assert len(back) == len(clients)
    for a, b in zip(clients, back):
        assert a.client_id == b.client_id
        assert np.array_equal(a.train.inputs, b.train.inputs) and np.array_equal(a.train.labels, b.train.labels)
        assert np.array_equal(a.test.inputs, b.test.inputs)
        assert np.array_equal(a.histogram, b.histogram)


def test_pooled_test_concatenates():
    ds = generate_task(SyntheticTaskSpec(n_total=400))
    clients = allocate(ds, AllocationScheme(kind="iid"), 4, 0)
    assert len(pooled_test(clients)) == sum(len(c.test) for c in clients)
