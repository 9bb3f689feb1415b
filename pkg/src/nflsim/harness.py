"""Scenario configuration, the end-to-end federation driver, run logs and
their comparison/export."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .data import AllocationScheme, Dataset, SyntheticTaskSpec, allocate, generate_task, pooled_test, sample_class
from .errors import ComparisonError, ConfigurationError, RunError
from .federation import (
    AttackConfig,
    ClientState,
    DpConfig,
    FederationConfig,
    Upload,
    aggregate_dp,
    aggregate_plain,
    attacker_update,
    choose_attackers,
    client_update,
    sample_active,
)
from .lindt import LindtConfig, RecoveryState, RoundEvents, dual_client_update, local_predict, recovery_controller
from .metrics import (
    baseline_epochs,
    central_and_local_accuracy,
    gain,
    nfl_verdict,
    train_private_baseline,
)
from .monitor import DetectorConfig, DetectorState, delta, detector_step, weight_divergence
from .nn import LayerStack, predict
from .rng import stream

WORKERS_ENV = "NFLSIM_WORKERS"

TABLE_COLUMNS = (
    "round", "w_div", "noise_norm", "delta", "count", "flag",
    "central_acc", "local_acc", "beta", "recovery_active",
)


@dataclass(frozen=True)
class EvalConfig:
    cadence: int = 5
    window: int = 10
    weighting: str = "equal"
    include_attackers: bool = False
    private_epochs: int | None = None  # None: match a client's expected federated training

    def __post_init__(self):
        if self.cadence < 1 or self.window < 1:
            raise ConfigurationError("cadence and window must be >= 1")
        if self.weighting not in ("equal", "by_size"):
            raise ConfigurationError(f"unsupported weighting {self.weighting!r} in a scenario")


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete, declarative description of one experiment.

    ``seed`` overrides the seeds of the nested task and federation configs so a
    scenario is reproduced from a single number.
    """

    name: str = "scenario"
    seed: int = 0
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    allocation: AllocationScheme = AllocationScheme()
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    federation: FederationConfig = FederationConfig(n_clients=100, clients_per_round=10)
    dp: DpConfig = DpConfig(enabled=True)
    attack: AttackConfig = AttackConfig()
    detector: DetectorConfig = DetectorConfig()
    lindt: LindtConfig = LindtConfig(enabled=False)
    eval: EvalConfig = EvalConfig()
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "task", dataclasses.replace(self.task, seed=self.seed))
        object.__setattr__(self, "federation", dataclasses.replace(self.federation, seed=self.seed))
        self.attack.validate(self.federation, self.task.n_classes)
        self.allocation.classes_per_client(self.federation.n_clients, self.task.n_classes)
        self.build_stack()

    def build_stack(self) -> LayerStack:
        widths = (self.task.n_features, *self.hidden, self.task.n_classes)
        return LayerStack.mlp(widths, self.activation)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = dict(raw)
        nested = {
            "task": SyntheticTaskSpec,
            "allocation": AllocationScheme,
            "federation": FederationConfig,
            "dp": DpConfig,
            "attack": AttackConfig,
            "detector": DetectorConfig,
            "lindt": LindtConfig,
            "eval": EvalConfig,
        }
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            if key in nested:
                kwargs[key] = _build(nested[key], value, key)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _build(kind, value: dict, where: str):
    if not isinstance(value, dict):
        raise ConfigurationError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(value) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return kind(**value)


def load_config(path: str | Path) -> ScenarioConfig:
    with open(path) as fh:
        return ScenarioConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------- run log


@dataclass
class RoundRecord:
    round: int
    participants: tuple[int, ...]
    lr: float
    w_div: float
    noise_norm: float
    delta: float
    count: int
    flag: bool
    recovery_active: bool
    central_acc: float | None = None
    local_acc: float | None = None
    beta: float | None = None

    def row(self) -> list:
        return [
            self.round, _fmt(self.w_div), _fmt(self.noise_norm), _fmt(self.delta), self.count,
            int(self.flag), _fmt(self.central_acc), _fmt(self.local_acc), _fmt(self.beta),
            int(self.recovery_active),
        ]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class RunLog:
    header: dict
    rounds: list[RoundRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    gains: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    @property
    def config(self) -> ScenarioConfig:
        return ScenarioConfig.from_dict(self.header["config"])

    def series(self, metric: str) -> list:
        if metric not in TABLE_COLUMNS:
            raise ConfigurationError(f"unknown metric {metric!r}")
        return [getattr(r, metric) for r in self.rounds]

    def event_rounds(self, kind: str) -> list[int]:
        return [e["round"] for e in self.events if e["kind"] == kind]

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "rounds": [dataclasses.asdict(r) for r in self.rounds],
            "events": self.events,
            "gains": self.gains,
            "final": self.final,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunLog":
        rounds = []
        for r in raw["rounds"]:
            r = dict(r)
            r["participants"] = tuple(r["participants"])
            rounds.append(RoundRecord(**r))
        return cls(raw["header"], rounds, list(raw["events"]), list(raw["gains"]), dict(raw["final"]))

    def __eq__(self, other) -> bool:
        return isinstance(other, RunLog) and self.to_dict() == other.to_dict()


def window_mean(log: RunLog, metric: str, window: int | None = None) -> float:
    """Mean of ``metric`` over evaluated rounds inside the final window."""
    window = window or log.header["config"]["eval"]["window"]
    horizon = log.rounds[-1].round if log.rounds else 0
    vals = [getattr(r, metric) for r in log.rounds if r.round > horizon - window]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------- driver


def _workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def _backdoor_pool(cfg: ScenarioConfig, size_per_class: int = 200) -> Dataset | None:
    if not cfg.attack.label_map or cfg.attack.n_attackers(cfg.federation.n_clients) == 0:
        return None
    rng = stream(cfg.seed, "data", 2)
    sources = sorted({s for s, _ in cfg.attack.label_map})
    xs = [sample_class(cfg.task, s, size_per_class, rng) for s in sources]
    ys = [np.full(size_per_class, s, dtype=np.int64) for s in sources]
    return Dataset(np.concatenate(xs), np.concatenate(ys), cfg.task.n_classes)


class _Phase:
    """Tags whatever fails inside the ``with`` block with round and phase."""

    def __init__(self, round_: int, name: str):
        self.round, self.name = round_, name

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, RunError):
            raise RunError(self.round, self.name, exc) from exc
        return False


def run_scenario(cfg: ScenarioConfig, workers: int | None = None,
                 upload_hooks: Sequence[Callable[[Upload], None]] = ()) -> RunLog:
    """Execute ``cfg.federation.rounds`` rounds and return the complete log.

    ``upload_hooks`` observe every client-to-server message.
    """
    fed, seed = cfg.federation, cfg.seed
    header = {"config": cfg.to_dict(), "version": __version__, "seed": seed}
    log = RunLog(header)

    with _Phase(0, "setup"):
        stack = cfg.build_stack()
        task = generate_task(cfg.task)
        datasets = allocate(task, cfg.allocation, fed.n_clients, seed)
        attackers = choose_attackers(fed.n_clients, cfg.attack, stream(seed, "sampling", 0))
        states = [ClientState(d.client_id, d, d.client_id in attackers) for d in datasets]
        backdoor = _backdoor_pool(cfg)
        w = stack.init(stream(seed, "init", 0))
        pooled = pooled_test(datasets)
        reportees = [s for s in states if cfg.eval.include_attackers or not s.is_attacker]
        epochs = cfg.eval.private_epochs if cfg.eval.private_epochs is not None else baseline_epochs(fed, cfg.attack)
        for s in reportees:
            s.private = train_private_baseline(
                s.data.train, stack, epochs, fed.lr, fed.batch_size, stream(seed, "init", 1, s.client_id)
            )
        private_acc = [float(np.mean(predict(stack, s.private, s.data.test.inputs) == s.data.test.labels))
                       for s in reportees]
        sizes = [s.data.size for s in reportees]

    detector = DetectorState()
    reports = []
    rec = RecoveryState.initial(cfg.lindt)
    if rec.active:
        log.events.append({"round": 1, "kind": "recovery_started"})
    n_workers = _workers(workers)
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None

    def local_step(cid: int, r: int, lr: float, w_global, dual: bool):
        state = states[cid]
        rng = stream(seed, "data", 1, r, cid)
        if state.is_attacker:
            return attacker_update(state, stack, w_global, fed, cfg.attack, backdoor, lr, rng)
        if dual:
            return dual_client_update(state, stack, w_global, fed, lr, rng)[0]
        return client_update(state, stack, w_global, fed, lr, rng)

    try:
        for r in range(1, fed.rounds + 1):
            with _Phase(r, "sample"):
                active = sample_active(r, fed, cfg.attack, attackers, stream(seed, "sampling", 1, r))
            lr = fed.lr_at(r)
            dual = rec.active
            with _Phase(r, "local_update"):
                if pool is None:
                    weights = [local_step(cid, r, lr, w, dual) for cid in active]
                else:
                    weights = list(pool.map(lambda cid: local_step(cid, r, lr, w, dual), active))
                uploads = [Upload(cid, r, wi) for cid, wi in zip(active, weights)]
                for hook in upload_hooks:
                    for up in uploads:
                        hook(up)
            with _Phase(r, "aggregate"):
                # reduction in client-id order keeps results independent of the pool
                received = [up.weights for up in uploads]
                if cfg.dp.enabled:
                    w_new, noise = aggregate_dp(w, received, cfg.dp, stream(seed, "noise", r))
                else:
                    w_new, noise = aggregate_plain(received), None
            with _Phase(r, "monitor"):
                w_div = weight_divergence(received, w_new)
                d = delta(w_div, noise)
                was_flagged = detector.flag
                detector = detector_step(detector, d, cfg.detector)
                if detector.flag and not was_flagged:
                    log.events.append({"round": r, "kind": "nfl_detected"})
            with _Phase(r, "recovery"):
                before = rec
                rec = recovery_controller(
                    rec, RoundEvents(r, detector.flag, active, d, cfg.detector.epsilon, fed.n_clients), cfg.lindt
                )
                if rec.active and not before.active:
                    log.events.append({"round": r, "kind": "recovery_started"})
                if rec.stopped_round is not None and before.stopped_round is None:
                    log.events.append({"round": r, "kind": "recovery_stopped"})
            w = w_new
            record = RoundRecord(
                r, tuple(active), lr, w_div, noise.norm if noise is not None else 0.0, d,
                detector.count, detector.flag, rec.active,
            )
            def serve(s):
                # a client's dual model pairs v_i with the w_i it was trained alongside;
                # without recovery everyone is served the global model
                if not rec.active or s.local is None:
                    return predict(stack, w, s.data.test.inputs)
                anchor = s.paired if s.paired is not None else w
                return local_predict(stack, anchor, s.local, s.data.test.inputs, True)

            if r % cfg.eval.cadence == 0 or r == fed.rounds:
                with _Phase(r, "evaluate"):
                    snap = central_and_local_accuracy(
                        predict(stack, w, pooled.inputs), pooled.labels,
                        [serve(s) for s in reportees],
                        [s.data.test.labels for s in reportees], r,
                    )
                    report = gain(snap.per_client, private_acc, sizes, cfg.eval.weighting, round_=r,
                                  clients=[s.client_id for s in reportees])
                record.central_acc, record.local_acc, record.beta = snap.central, snap.local, report.beta
                log.gains.append({"round": r, "beta": report.beta})
                reports.append(report)
                last_snap = snap
            log.rounds.append(record)
    finally:
        if pool is not None:
            pool.shutdown()

    if log.rounds:
        report, snap = reports[-1], last_snap
        horizon = fed.rounds
        window = min(cfg.eval.window, horizon)
        log.final = {
            "round": report.round,
            "clients": list(report.clients),
            "federated": [float(v) for v in report.federated],
            "private": [float(v) for v in report.private],
            "weights": [float(v) for v in report.weights],
            "beta": report.beta,
            "central_acc": snap.central,
            "local_acc": snap.local,
            "window_beta": window_mean(log, "beta", window),
            "window_local_acc": window_mean(log, "local_acc", window),
            "window_central_acc": window_mean(log, "central_acc", window),
            "nfl": nfl_verdict(reports, window, horizon=horizon),
        }
    return log


# ---------------------------------------------------------------- comparison and export


@dataclass
class Comparison:
    metric: str
    names: list[str]
    rounds: list[int]
    series: list[list]
    window_means: list[float]

    def differences(self, ref: int = 0) -> list[list]:
        """Per-round differences of every series against series ``ref``."""
        out = []
        for s in self.series:
            out.append([None if a is None or b is None else a - b for a, b in zip(s, self.series[ref])])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round"] + self.names)
        for i, r in enumerate(self.rounds):
            writer.writerow([r] + [_fmt(s[i]) for s in self.series])
        writer.writerow(["window_mean"] + [_fmt(m) for m in self.window_means])
        return buf.getvalue()


def compare_runs(logs: Sequence[RunLog], metric: str, names: Sequence[str] | None = None,
                 window: int | None = None) -> Comparison:
    if not logs:
        raise ComparisonError("nothing to compare")
    if metric not in TABLE_COLUMNS or metric == "round":
        raise ComparisonError(f"unknown metric {metric!r}")
    task = logs[0].header["config"]["task"]
    for lg in logs[1:]:
        if lg.header["config"]["task"] != task:
            raise ComparisonError("logs were produced on different tasks")
    horizon = min(len(lg.rounds) for lg in logs)
    names = list(names) if names is not None else [lg.header["config"]["name"] for lg in logs]
    rounds = [lg_round.round for lg_round in logs[0].rounds[:horizon]]
    series = [[getattr(r, metric) for r in lg.rounds[:horizon]] for lg in logs]
    window = window or logs[0].header["config"]["eval"]["window"]
    means = []
    for s in series:
        vals = [v for rr, v in zip(rounds, s) if v is not None and rr > horizon - window]
        means.append(float(np.mean(vals)) if vals else float("nan"))
    return Comparison(metric, names, rounds, series, means)


def metrics_table(log: RunLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for r in log.rounds:
        writer.writerow(r.row())
    return buf.getvalue()


def log_json(log: RunLog) -> str:
    return json.dumps(log.to_dict(), indent=1, sort_keys=True) + "\n"


def export(log: RunLog, path: str | Path, fmt: str = "table") -> Path:
    """Write the metrics table (``table``) or the full structured log (``log``)."""
    path = Path(path)
    if fmt == "table":
        text = metrics_table(log)
    elif fmt == "log":
        text = log_json(log)
    else:
        raise ConfigurationError(f"unknown export format {fmt!r}")
    path.write_text(text)
    return path


def import_log(path: str | Path) -> RunLog:
    return RunLog.from_dict(json.loads(Path(path).read_text()))


def replay(log: RunLog, workers: int | None = None) -> tuple[bool, RunLog]:
    """Re-run the logged config; report whether the new log is identical."""
    fresh = run_scenario(log.config, workers=workers)
    return log_json(fresh) == log_json(log), fresh
