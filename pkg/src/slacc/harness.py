"""Multi-device split-learning rounds with compressed smashed data.

One round, for every device in id order:

1. the device runs its client sub-model on one mini-batch;
2. the activations are scored and compressed, then encoded for the uplink;
3. the server decodes them, finishes the forward/backward pass, and sends back
   compressed gradients for the cut layer;
4. the device decodes the gradients and updates its client sub-model.

Client models are then averaged (FedAvg) unless ``client_mode`` is ``relay``.
"""
from __future__ import annotations

import dataclasses
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acii, cgc, codec
from .core import Direction, SmashedData, encode_tensor, decode_tensor
from .data import Dataset, load_mnist, partition_dirichlet, partition_iid, synth_blobs
from .model import (
    ClientModel,
    ServerModel,
    average_params,
    client_backward,
    client_forward,
    predict,
    server_forward_backward,
    sgd_step,
)
from .netsim import DOWNLINK, UPLINK, CommLedger, LinkModel


class ConfigError(ValueError):
    pass


_COMPRESSOR_RE = re.compile(r"^(slacc|none|uniform|topk)(?:[-(:]([0-9.]+)\)?)?$")


@dataclass(frozen=True)
class Compressor:
    name: str  # slacc | uniform | topk | none
    bits: int = 8
    keep: float = 0.1
    rand: float = 0.01

    @classmethod
    def parse(cls, spec) -> "Compressor":
        if isinstance(spec, Compressor):
            return spec
        if isinstance(spec, dict):
            spec = dict(spec)
            name = spec.pop("name", None)
            try:
                return cls(name=name, **spec)._checked()
            except TypeError as exc:
                raise ConfigError(f"bad compressor {spec!r}: {exc}") from None
        m = _COMPRESSOR_RE.match(str(spec).strip().lower())
        if not m:
            raise ConfigError(f"unknown compressor {spec!r}")
        name, arg = m.groups()
        if name == "uniform":
            return cls("uniform", bits=int(float(arg)) if arg else 8)._checked()
        if name == "topk":
            return cls("topk", keep=float(arg) if arg else 0.1)._checked()
        if arg:
            raise ConfigError(f"compressor {name!r} takes no argument")
        return cls(name)

    def _checked(self) -> "Compressor":
        if self.name not in ("slacc", "uniform", "topk", "none"):
            raise ConfigError(f"unknown compressor {self.name!r}")
        if not 1 <= self.bits <= 32:
            raise ConfigError(f"uniform bit width {self.bits} outside [1, 32]")
        if not 0 < self.keep <= 1 or not 0 <= self.rand < 1 or self.keep + self.rand > 1:
            raise ConfigError(f"invalid top-k fractions keep={self.keep} rand={self.rand}")
        return self

    @property
    def label(self) -> str:
        if self.name == "uniform":
            return f"uniform-{self.bits}"
        if self.name == "topk":
            return f"topk-{self.keep:g}"
        return self.name


@dataclass
class Config:
    devices: int = 5
    rounds: int = 60
    batch_size: int = 128
    lr: float = 0.08
    g: int = 4
    b_min: int = 2
    b_max: int = 8
    window: int = 5
    log_base: str = "e"
    constant_is_zero: bool = False
    partition: str = "iid"
    beta: float = 0.5
    compressor: Compressor = field(default_factory=lambda: Compressor("slacc"))
    seed: int = 0
    dataset: str = "mnist"
    data_root: str | None = None
    train_size: int = 2000
    test_size: int = 1000
    synth_per_class: int = 60
    synth_noise: float = 0.3
    synth_size: int = 12
    widths: tuple = (8, 8, 8)
    hidden: int = 128
    server_mode: str = "sequential"
    client_mode: str = "fedavg"
    bypass: bool = False
    uplink_rate: float = 1.25e6
    downlink_rate: float = 2.5e6
    latency: float = 0.01
    comm_mode: str = "parallel"
    compute_seconds: float = 0.0
    threads: int = 1

    def __post_init__(self):
        self.compressor = Compressor.parse(self.compressor)
        self.widths = tuple(self.widths)

    @classmethod
    def from_dict(cls, raw: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        part = raw.get("partition")
        if isinstance(part, dict):
            raw["partition"] = part.get("name", part.get("kind", "iid"))
            if "beta" in part:
                raw["beta"] = part["beta"]
        try:
            cfg = cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "Config":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["compressor"] = self.compressor.label
        d["widths"] = list(self.widths)
        return d

    def validate(self) -> None:
        checks = [
            (self.devices >= 1, "devices must be >= 1"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.g >= 1, "g must be >= 1"),
            (1 <= self.b_min <= self.b_max <= 32, "need 1 <= b_min <= b_max <= 32"),
            (self.window >= 1, "window must be >= 1"),
            (str(self.log_base) in ("e", "2"), "log_base must be 'e' or '2'"),
            (self.partition in ("iid", "dirichlet"), "partition must be iid or dirichlet"),
            (self.beta > 0, "beta must be positive"),
            (self.dataset in ("mnist", "synth"), "dataset must be mnist or synth"),
            (self.server_mode in ("sequential", "parallel"), "server_mode must be sequential or parallel"),
            (self.client_mode in ("fedavg", "relay"), "client_mode must be fedavg or relay"),
            (self.comm_mode in ("parallel", "sequential"), "comm_mode must be parallel or sequential"),
            (self.uplink_rate > 0 and self.downlink_rate > 0, "link rates must be positive"),
            (self.latency >= 0 and self.compute_seconds >= 0, "latency/compute must be >= 0"),
            (self.train_size >= self.devices, "train_size must be >= devices"),
            (self.test_size >= 1, "test_size must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
            (len(self.widths) >= 1, "widths must be non-empty"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.compressor._checked()

    @property
    def link(self) -> LinkModel:
        return LinkModel(self.uplink_rate, self.downlink_rate, self.latency)


@dataclass
class Device:
    id: int
    indices: np.ndarray
    client: ClientModel
    act_state: acii.EntropyState
    grad_state: acii.EntropyState
    rng: np.random.Generator
    _order: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    _pos: int = 0

    def next_batch(self, batch_size: int) -> np.ndarray:
        """Indices of the next mini-batch; reshuffles the shard at each epoch boundary."""
        if len(self.indices) == 0:
            raise ValueError(f"device {self.id} has an empty shard")
        size = min(batch_size, len(self.indices))
        if self._pos + size > len(self._order):
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        out = self._order[self._pos : self._pos + size]
        self._pos += size
        return out


@dataclass
class RoundReport:
    round: int
    losses: list[float]
    test_accuracy: float | None
    uplink_bytes: list[int]
    downlink_bytes: list[int]
    group_bits: list[dict]
    sim_comm_seconds: float
    sim_seconds: float
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        # wall-clock stays out so identical runs produce identical lines
        d = dataclasses.asdict(self)
        d.pop("wall_seconds")
        return json.dumps(d, sort_keys=True)


@dataclass
class Wire:
    """What crossed the link for one message: decoded smashed data plus metadata."""
    smashed: SmashedData
    blob: bytes
    bits: list[int] = field(default_factory=list)
    channels: list[int] = field(default_factory=list)  # channels per group


def transmit(s: SmashedData, scores, config: Config, seed) -> Wire:
    """Compress, encode, decode and decompress ``s`` as the receiving side would."""
    comp = config.compressor
    if config.bypass:
        return Wire(s, encode_tensor(s.tensor))
    if comp.name == "none":
        blob = encode_tensor(s.tensor)
        return Wire(SmashedData(decode_tensor(blob), s.round, s.direction), blob)
    if comp.name == "topk":
        sp = cgc.baseline_topk(s, comp.keep, comp.rand, seed=np.random.default_rng(seed).integers(2**63))
        blob = codec.encode_sparse(sp)
        return Wire(codec.decode_sparse(blob).to_smashed(), blob)
    if comp.name == "uniform":
        q = cgc.baseline_uniform(s, comp.bits)
    else:
        q = cgc.compress(s, scores, config.g, config.b_min, config.b_max)
    blob = codec.encode(q)
    received = codec.decode(blob)
    plan = received.plan
    return Wire(cgc.decompress(received), blob, [int(b) for b in plan.bits],
                [int(m) for m in plan.grouping.counts()])


def _score(s, state, t, config):
    if config.bypass or config.compressor.name != "slacc":
        return None
    return acii.score_channels(s, state, t, config.rounds, base=config.log_base,
                               constant_is_zero=config.constant_is_zero)


@dataclass
class Simulation:
    config: Config
    train_set: Dataset
    test_set: Dataset
    devices: list[Device]
    server: ServerModel
    ledger: CommLedger
    blobs: list[bytes] = field(default_factory=list)
    keep_blobs: bool = False
    on_scores: object = None  # callback(t, device, direction, ImportanceVector)


def build_datasets(config: Config) -> tuple[Dataset, Dataset]:
    if config.dataset == "synth":
        full = synth_blobs(10, config.synth_per_class, config.synth_noise, config.seed, config.synth_size)
        perm = np.random.default_rng([config.seed, 7]).permutation(len(full))
        n_test = max(1, len(full) // 4)
        return full.subset(perm[n_test:]), full.subset(perm[:n_test])
    train = load_mnist("train", config.data_root)
    test = load_mnist("test", config.data_root)
    rng = np.random.default_rng([config.seed, 3])
    if config.train_size > len(train) or config.test_size > len(test):
        raise ConfigError(f"requested {config.train_size}/{config.test_size} samples, "
                          f"have {len(train)}/{len(test)}")
    train = train.subset(rng.permutation(len(train))[: config.train_size])
    test = test.subset(rng.permutation(len(test))[: config.test_size])
    return train, test


def setup(config: Config, datasets=None) -> Simulation:
    config.validate()
    train, test = datasets if datasets is not None else build_datasets(config)
    if config.partition == "iid":
        shards = partition_iid(len(train), config.devices, seed=config.seed)
    else:
        shards = partition_dirichlet(train.labels, config.devices, config.beta, seed=config.seed)
    c_in, h, w = train.images.shape[1:]
    client0 = ClientModel.init(config.seed, c_in, config.widths)
    server = ServerModel.init(config.seed, config.widths[-1] * (h // 2) * (w // 2), config.hidden, train.num_classes)
    c = client0.out_channels
    devices = [
        Device(i, shard, client0.copy(), acii.EntropyState(c, config.window), acii.EntropyState(c, config.window),
               np.random.default_rng([config.seed, 4, i]))
        for i, shard in enumerate(shards)
    ]
    return Simulation(config, train, test, devices, server, CommLedger(config.link))


def _uplink(sim: Simulation, dev: Device, t: int):
    cfg = sim.config
    idx = dev.next_batch(cfg.batch_size)
    x, y = sim.train_set.images[idx], sim.train_set.labels[idx]
    acts, cache = client_forward(dev.client, x, round=t)
    scores = _score(acts, dev.act_state, t, cfg)
    if scores is not None and sim.on_scores:
        sim.on_scores(t, dev.id, Direction.ACTIVATIONS, scores)
    wire = transmit(acts, scores, cfg, [cfg.seed, t, dev.id, 0])
    return x, y, cache, wire


def run_round(sim: Simulation, t: int) -> RoundReport:
    cfg = sim.config
    if not 0 <= t < cfg.rounds:
        raise ValueError(f"round {t} outside [0, {cfg.rounds})")
    start = time.perf_counter()
    devices = sim.devices
    losses, up, down, bits = [], [], [], []

    prepared = {}
    if cfg.client_mode == "fedavg" and cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = {d.id: pool.submit(_uplink, sim, d, t) for d in devices}
            prepared = {k: f.result() for k, f in futures.items()}

    server_grads = []
    base_server = sim.server
    for i, dev in enumerate(devices):
        if cfg.client_mode == "relay" and i > 0:
            dev.client = devices[i - 1].client.copy()
        x, y, cache, up_wire = prepared.get(dev.id) or _uplink(sim, dev, t)
        sim.ledger.record(t, dev.id, UPLINK, len(up_wire.blob))

        server = base_server if cfg.server_mode == "parallel" else sim.server
        loss, grad_s, sgrads = server_forward_backward(server, up_wire.smashed, y)
        if cfg.server_mode == "sequential":
            sim.server = ServerModel(sgd_step(sim.server.params, sgrads, cfg.lr))
        else:
            server_grads.append(sgrads)

        g_scores = _score(grad_s, dev.grad_state, t, cfg)
        if g_scores is not None and sim.on_scores:
            sim.on_scores(t, dev.id, Direction.GRADIENTS, g_scores)
        down_wire = transmit(grad_s, g_scores, cfg, [cfg.seed, t, dev.id, 1])
        sim.ledger.record(t, dev.id, DOWNLINK, len(down_wire.blob))

        cgrads = client_backward(dev.client, x, down_wire.smashed, cache)
        dev.client = ClientModel(sgd_step(dev.client.params, cgrads, cfg.lr))

        if sim.keep_blobs:
            sim.blobs.extend([up_wire.blob, down_wire.blob])
        losses.append(loss)
        up.append(len(up_wire.blob))
        down.append(len(down_wire.blob))
        bits.append({name: {"bits": w.bits, "channels": w.channels}
                     for name, w in (("activations", up_wire), ("gradients", down_wire))})

    if cfg.server_mode == "parallel":
        sim.server = ServerModel(sgd_step(base_server.params, average_params(server_grads), cfg.lr))
    if cfg.client_mode == "fedavg":
        avg = average_params([d.client.params for d in devices])
        for d in devices:
            d.client = ClientModel({k: v.copy() for k, v in avg.items()})
    else:
        last = devices[-1].client
        for d in devices:
            d.client = last.copy()

    comm = sim.ledger.round_time(t, cfg.comm_mode)
    return RoundReport(
        round=t,
        losses=losses,
        test_accuracy=None,
        uplink_bytes=up,
        downlink_bytes=down,
        group_bits=bits,
        sim_comm_seconds=comm,
        sim_seconds=comm + cfg.compute_seconds,
        wall_seconds=time.perf_counter() - start,
    )


def evaluate(server: ServerModel, client: ClientModel, test_set: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy with an uncompressed forward pass."""
    correct = 0
    for lo in range(0, len(test_set), batch_size):
        logits = predict(client, server, test_set.images[lo : lo + batch_size])
        correct += int((logits.argmax(axis=1) == test_set.labels[lo : lo + batch_size]).sum())
    return correct / len(test_set)


def train(config: Config, datasets=None, sim: Simulation | None = None, on_report=None) -> list[RoundReport]:
    sim = sim or setup(config, datasets)
    reports = []
    for t in range(config.rounds):
        report = run_round(sim, t)
        report.test_accuracy = evaluate(sim.server, sim.devices[0].client, sim.test_set)
        reports.append(report)
        if on_report:
            on_report(report, sim)
    return reports
