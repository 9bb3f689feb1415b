import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nflsim.data import AllocationScheme, Dataset, SyntheticTaskSpec, allocate, generate_task, sample_class
from nflsim.errors import ConfigurationError, ProtocolError
from nflsim.federation import (
    AttackConfig,
    ClientState,
    DpConfig,
    FederationConfig,
    aggregate_dp,
    aggregate_plain,
    attacker_update,
    choose_attackers,
    client_update,
    clip_update,
    poisoned_batches,
    sample_active,
)
from nflsim.nn import Batch, LayerStack, WeightVector, loss_and_grad, sgd_step

LAY = lambda n: ((0, (n,)),)  # noqa: E731


def wv(values):
    values = np.asarray(values, dtype=np.float64)
    return WeightVector(values, LAY(values.size))


def naive_mean(vectors):
    n, d = len(vectors), len(vectors[0].values)
    out = [0.0] * d
    for v in vectors:
        for k in range(d):
            out[k] += v.values[k]
    return np.array([x / n for x in out])


def naive_clip(delta, bound):
    norm = math.sqrt(sum(x * x for x in delta.values))
    if norm <= bound:
        return np.array(delta.values)
    return np.array([x * bound / norm for x in delta.values])


@pytest.fixture(scope="module")
def small_world():
    task = generate_task(SyntheticTaskSpec(n_features=4, n_total=400))
    clients = allocate(task, AllocationScheme(kind="non_iid", k=2), 4, 0)
    stack = LayerStack.mlp([4, 5, 4])
    w0 = stack.init(np.random.default_rng(0))
    return task, clients, stack, w0


class TestSampling:
    def test_all_clients_when_k_equals_n(self):
        cfg = FederationConfig(n_clients=6, clients_per_round=6)
        attack = AttackConfig(fraction=2 / 6, per_round=2)
        attackers = (1, 4)
        got = sample_active(1, cfg, attack, attackers, np.random.default_rng(0))
        assert got == tuple(range(6))

    def test_quota_respected(self):
        cfg = FederationConfig(n_clients=100, clients_per_round=10)
        attack = AttackConfig(fraction=0.2, per_round=2)
        rng = np.random.default_rng(1)
        attackers = choose_attackers(100, attack, rng)
        assert len(attackers) == 20
        for r in range(200):
            c = sample_active(r, cfg, attack, attackers, rng)
            assert len(c) == 10 == len(set(c))
            assert sum(i in attackers for i in c) == 2

    def test_honest_selection_is_uniform(self):
        cfg = FederationConfig(n_clients=20, clients_per_round=10)
        attack = AttackConfig(fraction=0.2, per_round=2)
        attackers = (0, 5, 10, 15)
        honest = [i for i in range(20) if i not in attackers]
        rng = np.random.default_rng(2)
        counts = np.zeros(20)
        draws = 1000
        for r in range(draws):
            for i in sample_active(r, cfg, attack, attackers, rng):
                counts[i] += 1
        p = 8 / 16
        sd = math.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts[honest] - draws * p) < 3 * sd)

    def test_quota_exceeding_k_rejected(self):
        fed = FederationConfig(n_clients=10, clients_per_round=2)
        with pytest.raises(ConfigurationError):
            AttackConfig(fraction=0.5, per_round=3).validate(fed, 4)


class TestClientUpdate:
    def test_zero_lr_is_identity(self, small_world):
        _, clients, stack, w0 = small_world
        state = ClientState(0, clients[0])
        out = client_update(state, stack, w0, FederationConfig(local_epochs=3), 0.0, np.random.default_rng(0))
        assert out == w0

    def test_single_batch_equals_one_sgd_step(self, small_world):
        _, clients, stack, w0 = small_world
        data = clients[0]
        cfg = FederationConfig(batch_size=len(data.train), local_epochs=1)
        out = client_update(ClientState(0, data), stack, w0, cfg, 0.1, np.random.default_rng(0))
        # a full batch is order-independent up to summation order
        _, g = loss_and_grad(stack, w0, Batch(data.train.inputs, data.train.labels))
        np.testing.assert_allclose(out.values, sgd_step(w0, g, 0.1).values, rtol=0, atol=1e-14)

    def test_identical_data_and_seed_identical_updates(self, small_world):
        _, clients, stack, w0 = small_world
        a = client_update(ClientState(0, clients[1]), stack, w0, FederationConfig(), 0.1, np.random.default_rng(5))
        b = client_update(ClientState(9, clients[1]), stack, w0, FederationConfig(), 0.1, np.random.default_rng(5))
        assert a == b

    def test_does_not_touch_inputs(self, small_world):
        _, clients, stack, w0 = small_world
        before = w0.copy_values()
        state = ClientState(0, clients[0])
        client_update(state, stack, w0, FederationConfig(), 0.1, np.random.default_rng(0))
        assert np.array_equal(before, w0.values) and state.local is None


class TestAttacker:
    def test_empty_map_is_client_update_with_attack_epochs(self, small_world):
        _, clients, stack, w0 = small_world
        state = ClientState(0, clients[0], is_attacker=True)
        attack = AttackConfig(fraction=0.25, per_round=1, epochs=3)
        got = attacker_update(state, stack, w0, FederationConfig(), attack, None, 0.1, np.random.default_rng(3))
        want = client_update(state, stack, w0, FederationConfig(), 0.1, np.random.default_rng(3), epochs=3)
        assert got == want

    def test_every_batch_has_exact_mix(self):
        spec = SyntheticTaskSpec(n_features=4)
        rng = np.random.default_rng(0)
        data = Dataset(rng.normal(size=(47, 4)), rng.integers(0, 4, 47), 4)
        backdoor = Dataset(sample_class(spec, 0, 30, rng), np.zeros(30, dtype=np.int64), 4)
        attack = AttackConfig(label_map=((0, 1),), mix=3, epochs=2)
        marker = set(map(bytes, (x.tobytes() for x in backdoor.inputs)))
        n_batches = 0
        for x, y in poisoned_batches(data, backdoor, attack, 10, rng):
            poisoned = [i for i, row in enumerate(x) if row.tobytes() in marker]
            assert len(poisoned) == 3
            assert all(y[i] == 1 for i in poisoned)
            n_batches += 1
        assert n_batches == 2 * math.ceil(47 / 7)

    def test_target_out_of_range(self, small_world):
        _, clients, stack, w0 = small_world
        state = ClientState(0, clients[0], is_attacker=True)
        attack = AttackConfig(label_map=((0, 7),))
        with pytest.raises(ConfigurationError):
            attacker_update(state, stack, w0, FederationConfig(), attack, None, 0.1, np.random.default_rng(0))

    def test_honest_client_rejected(self, small_world):
        _, clients, stack, w0 = small_world
        with pytest.raises(ProtocolError):
            attacker_update(ClientState(0, clients[0]), stack, w0, FederationConfig(), AttackConfig(), None,
                            0.1, np.random.default_rng(0))


class TestAggregation:
    def test_single_update(self):
        u = wv([1.0, -2.0, 3.0])
        assert aggregate_plain([u]) == u

    def test_arithmetic(self):
        assert np.array_equal(aggregate_plain([wv([0, 2]), wv([2, 0])]).values, [1.0, 1.0])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        ups = [wv(rng.normal(size=13)) for _ in range(7)]
        np.testing.assert_allclose(aggregate_plain(ups).values, naive_mean(ups), rtol=0, atol=1e-12)

    def test_empty_is_protocol_error(self):
        with pytest.raises(ProtocolError):
            aggregate_plain([])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, k, seed, shuffler):
        rng = np.random.default_rng(seed)
        ups = [wv(rng.normal(size=5)) for _ in range(k)]
        perm = list(ups)
        shuffler.shuffle(perm)
        np.testing.assert_allclose(aggregate_plain(ups).values, aggregate_plain(perm).values, rtol=0, atol=1e-12)


class TestClip:
    def test_short_delta_unchanged(self):
        d = wv([0.3, 0.4])
        assert clip_update(d, 1.0) is d

    def test_example(self):
        np.testing.assert_allclose(clip_update(wv([3.0, 4.0]), 2.5).values, [1.5, 2.0], rtol=0, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 1e3))
    def test_norm_bound_and_oracle(self, values, bound):
        d = wv(values)
        out = clip_update(d, bound)
        assert out.norm() <= bound + 1e-9
        np.testing.assert_allclose(out.values, naive_clip(d, bound), rtol=0, atol=1e-12)


class TestDpAggregation:
    def test_noiseless_unclipped_equals_plain(self):
        rng = np.random.default_rng(1)
        prev = wv(rng.normal(size=9))
        ups = [prev + wv(0.1 * rng.normal(size=9)) for _ in range(5)]
        out, noise = aggregate_dp(prev, ups, DpConfig(enabled=True, clip=15.0, sigma=0.0), rng)
        np.testing.assert_allclose(out.values, aggregate_plain(ups).values, rtol=0, atol=1e-12)
        assert noise.norm == 0.0

    def test_infinite_clip_is_exactly_plain(self):
        rng = np.random.default_rng(2)
        prev = wv(rng.normal(size=9))
        ups = [wv(rng.normal(size=9) * 50) for _ in range(4)]
        out, _ = aggregate_dp(prev, ups, DpConfig(enabled=True, clip=math.inf, sigma=0.0), rng)
        assert out == aggregate_plain(ups)

    def test_every_clipped_contribution_has_norm_s(self):
        rng = np.random.default_rng(3)
        prev = wv(rng.normal(size=6))
        deltas = [wv(rng.normal(size=6)) for _ in range(5)]
        deltas = [d * (20.0 / d.norm()) for d in deltas]
        ups = [prev + d for d in deltas]
        out, _ = aggregate_dp(prev, ups, DpConfig(enabled=True, clip=2.0, sigma=0.0), rng)
        expected = prev.values + naive_mean([wv(naive_clip(d, 2.0)) for d in deltas])
        np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-12)
        for d in deltas:
            assert np.linalg.norm(naive_clip(d, 2.0)) == pytest.approx(2.0, abs=1e-12)

    def test_noise_second_moment(self):
        sigma, d = 0.01, 500
        rng = np.random.default_rng(4)
        prev = wv(np.zeros(d))
        sq = []
        for _ in range(200):
            _, noise = aggregate_dp(prev, [prev], DpConfig(enabled=True, sigma=sigma), rng)
            assert noise.norm == pytest.approx(np.linalg.norm(noise.vector.values), abs=1e-12)
            sq.append(noise.norm ** 2 / d)
        assert abs(np.mean(sq) / sigma ** 2 - 1) < 0.05

    def test_disabled_is_protocol_error(self):
        prev = wv([0.0])
        with pytest.raises(ProtocolError):
            aggregate_dp(prev, [prev], DpConfig(enabled=False), np.random.default_rng(0))


def test_lr_decay_schedule():
    cfg = FederationConfig(lr=0.1, lr_decay=0.5)
    assert cfg.lr_at(1) == pytest.approx(0.05)
    assert cfg.lr_at(3) == pytest.approx(0.0125)


@pytest.mark.parametrize("kw", [
    {"clients_per_round": 0}, {"clients_per_round": 30}, {"local_epochs": 0}, {"lr": 0.0}, {"lr_decay": 1.5},
])
def test_invalid_federation_config(kw):
    with pytest.raises(ConfigurationError):
        FederationConfig(**kw)
