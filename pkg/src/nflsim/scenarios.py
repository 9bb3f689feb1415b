"""Ready-made desk-scale scenarios.

Both presets use a 4-class, 16-feature Gaussian task, 20 clients with 10
sampled per round and a 16-32-32-4 MLP trained for 200 rounds.

``nfl_scenario`` is the failure case: every client holds two classes, a fifth
of the clients are backdoor attackers (two of them in every round) and updates
are aggregated with differential privacy. ``iid_scenario`` is the healthy
counterpart with an IID split, no attackers and plain averaging.
"""
from __future__ import annotations

from .data import AllocationScheme, SyntheticTaskSpec
from .federation import AttackConfig, DpConfig, FederationConfig
from .harness import EvalConfig, ScenarioConfig
from .lindt import LindtConfig
from .monitor import DetectorConfig

#: knobs shared by both presets; any of them can be overridden per call
DEFAULTS = dict(
    rounds=200,
    lr=0.1,
    lr_decay=0.992,
    local_epochs=1,
    noise=1.5,
    separation=3.0,
    n_total=4000,
    test_fraction=0.5,
    patience=50,
    cadence=1,
)


def _base(name: str, seed: int, lindt: LindtConfig | None, knobs: dict) -> ScenarioConfig:
    unknown = set(knobs) - set(DEFAULTS)
    if unknown:
        raise TypeError(f"unknown scenario knobs: {sorted(unknown)}")
    k = {**DEFAULTS, **knobs}
    return ScenarioConfig(
        name=name,
        seed=seed,
        task=SyntheticTaskSpec(n_classes=4, n_features=16, separation=k["separation"], noise=k["noise"],
                               n_total=k["n_total"]),
        hidden=(32, 32),
        federation=FederationConfig(n_clients=20, clients_per_round=10, rounds=k["rounds"], lr=k["lr"],
                                    lr_decay=k["lr_decay"], local_epochs=k["local_epochs"]),
        detector=DetectorConfig(epsilon=0.1, patience=k["patience"]),
        lindt=lindt or LindtConfig(enabled=False),
        eval=EvalConfig(cadence=k["cadence"], window=10),
        allocation=AllocationScheme(kind="iid", test_fraction=k["test_fraction"]),
    )


def nfl_scenario(seed: int = 0, lindt: LindtConfig | None = None, **knobs) -> ScenarioConfig:
    cfg = _base("nfl", seed, lindt, knobs)
    epochs = max(5, cfg.federation.local_epochs)
    return cfg.replace(
        allocation=AllocationScheme(kind="non_iid", k=2, test_fraction=cfg.allocation.test_fraction),
        dp=DpConfig(enabled=True),
        attack=AttackConfig(fraction=0.2, per_round=2, label_map=((0, 1), (2, 3)), epochs=epochs),
    )


def iid_scenario(seed: int = 0, lindt: LindtConfig | None = None, **knobs) -> ScenarioConfig:
    return _base("iid", seed, lindt, knobs).replace(dp=DpConfig(enabled=False), attack=AttackConfig())
