"""Training and evaluation driver, telemetry, checkpoints and bit-width reports."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .blocks import ArchHyper, BlockOptim, Network, build_preset
from .data import NormStats, batch_iter
from .itensor import IntTensor, as_int, intdiv, max_abs, sub
from .layers import HEAD_RANGE_SHIFT, Conv2D, Linear
from .optim import FW_RULES, AmplificationContext, IntegerSGDParams, PlateauScheduler

log = logging.getLogger(__name__)

# Tables of tuned hyperparameters, keyed by (preset, dataset).
# Values: gamma_inv, eta_fw, eta_lr, d_lr, p_c, p_l (dropout in percent).
TUNED_DEFAULTS: dict[tuple[str, str], dict] = {
    ("MLP1", "mnist"): dict(gamma_inv=512, eta_fw=12000, eta_lr=3000, p_l=0),
    ("MLP2", "fashionmnist"): dict(gamma_inv=512, eta_fw=10000, eta_lr=8000, p_l=0),
    ("MLP3", "mnist"): dict(gamma_inv=512, eta_fw=28000, eta_lr=5000, p_l=0),
    ("MLP3", "fashionmnist"): dict(gamma_inv=512, eta_fw=29000, eta_lr=6000, p_l=0),
    ("MLP4", "cifar10"): dict(gamma_inv=512, eta_fw=19000, eta_lr=7500, p_l=10),
    ("VGG8B", "mnist"): dict(gamma_inv=512, eta_fw=30000, eta_lr=3000, d_lr=4096, p_c=0, p_l=0),
    ("VGG8B", "fashionmnist"): dict(gamma_inv=512, eta_fw=28000, eta_lr=3500, d_lr=4096, p_c=0,
                                    p_l=10),
    ("VGG8B", "cifar10"): dict(gamma_inv=512, eta_fw=25000, eta_lr=3000, d_lr=4096, p_c=0, p_l=15),
    ("VGG11B", "cifar10"): dict(gamma_inv=512, eta_fw=28000, eta_lr=4500, d_lr=4096, p_c=0, p_l=0),
    # small CNN borrows the VGG8B/MNIST row
    ("CNN2", "mnist"): dict(gamma_inv=512, eta_fw=30000, eta_lr=3000, d_lr=4096, p_c=0, p_l=0),
}

CHECKPOINT_MAGIC = b"NTRD"
CHECKPOINT_VERSION = 1
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


@dataclass
class TrainConfig:
    preset: str = "MLP1"
    dataset: str = "mnist"
    gamma_inv: int = 512
    eta_fw: int = 12000
    eta_lr: int = 3000
    d_lr: int = 4096
    p_c: int = 0
    p_l: int = 0
    alpha_inv: int = 64
    batch_size: int = 64
    epochs: int = 150
    seed: int = 0
    patience: int = 10
    min_delta: int = 10
    limit: int | None = None
    test_limit: int | None = None
    threads: int = 1
    data_dir: str | None = None
    fw_rule: str = "af-delta"
    head_shift: int = HEAD_RANGE_SHIFT

    def __post_init__(self):
        positive = ("gamma_inv", "d_lr", "alpha_inv", "batch_size", "patience", "threads")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("eta_fw", "eta_lr", "epochs", "seed", "min_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("p_c", "p_l"):
            if not 0 <= getattr(self, name) <= 99:
                raise ValueError(f"{name} is a dropout percentage in [0, 99]")
        if self.fw_rule not in FW_RULES:
            raise ValueError(f"fw_rule must be one of {FW_RULES}, got {self.fw_rule!r}")

    @classmethod
    def for_experiment(cls, preset: str, dataset: str, **overrides) -> "TrainConfig":
        """Config pre-filled with the tuned values for ``(preset, dataset)``."""
        key = (preset, dataset.lower().replace("-", "").replace("_", ""))
        values = dict(TUNED_DEFAULTS.get(key, {}))
        values.update(overrides)
        return cls(preset=preset, dataset=key[1], **values)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hyper(self) -> ArchHyper:
        return ArchHyper(alpha_inv=self.alpha_inv, d_lr=self.d_lr, p_c=self.p_c, p_l=self.p_l,
                         head_shift=self.head_shift)


class Telemetry:
    """Running maxima of magnitudes seen per layer during training."""

    KEYS = ("weight", "z", "z_star", "act", "out", "delta_fw", "grad_w")

    def __init__(self, record: dict | None = None):
        self.record: dict[str, dict[str, int]] = record or {}
        self.steps = 0

    def update(self, name: str, **values: int) -> None:
        slot = self.record.setdefault(name, {})
        for key, value in values.items():
            if value > slot.get(key, -1):
                slot[key] = int(value)

    def observe(self, network: Network) -> None:
        self.steps += 1
        for block in network.blocks:
            stats = block.stats
            self.update(f"block{block.index}.fw", weight=max_abs(block.trainable.weight),
                        **{k: stats[k] for k in ("z", "z_star", "act", "out", "grad_w") if k in stats})
            self.update(f"block{block.index}.lr", weight=max_abs(block.head.weight),
                        **({"delta_fw": stats["delta_fw"]} if "delta_fw" in stats else {}))
        self.update("output", weight=max_abs(network.output.weight), **network.output_stats)

    def max_weight(self) -> int:
        return max((slot.get("weight", 0) for slot in self.record.values()), default=0)

    def max_value(self) -> int:
        return max((max(slot.values(), default=0) for slot in self.record.values()), default=0)

    def to_dict(self) -> dict:
        return {"steps": self.steps, "record": self.record}

    @classmethod
    def from_dict(cls, data: dict) -> "Telemetry":
        t = cls({k: dict(v) for k, v in data.get("record", {}).items()})
        t.steps = data.get("steps", 0)
        return t


def signed_bits(value: int) -> int:
    """Bits needed to hold ``+-value`` in two's complement (127 -> 8)."""
    return abs(int(value)).bit_length() + 1


def ceil_log2(n: int) -> int:
    return (int(n) - 1).bit_length()


@dataclass
class TrainState:
    epoch: int = 0
    gamma_inv: int = 512
    train_acc: list[int] = field(default_factory=list)
    test_acc: list[int] = field(default_factory=list)
    losses: list[int] = field(default_factory=list)
    scheduler: dict = field(default_factory=dict)
    telemetry: dict = field(default_factory=dict)

    @property
    def best_test_acc(self) -> int:
        return max(self.test_acc, default=0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainState":
        return cls(**data)


def rss_loss_and_grad(y_hat, y_enc) -> tuple[int, IntTensor]:
    """Residual sum of squares (halved, summed over the batch) and its gradient."""
    y_hat, y_enc = as_int(y_hat), as_int(y_enc)
    if y_hat.shape != y_enc.shape:
        raise ValueError(f"prediction {y_hat.shape} and target {y_enc.shape} differ in shape")
    grad = sub(y_hat, y_enc)
    return intdiv(int((grad.astype(object) ** 2).sum()), 2), grad


def block_optim(config: TrainConfig, class_count: int, gamma_inv: int) -> BlockOptim:
    amp = AmplificationContext.for_classes(class_count, gamma_inv, config.fw_rule)
    return BlockOptim(lr=IntegerSGDParams(gamma_inv, config.eta_lr),
                      fw=IntegerSGDParams(amp.gamma_inv_fw, config.eta_fw),
                      af=amp.af)


def train_step(network: Network, x: IntTensor, y_enc: IntTensor, opt: BlockOptim,
               executor: ThreadPoolExecutor | None = None) -> tuple[IntTensor, int]:
    """One iteration: forward pass, output update, then every block's local update."""
    y_hat = network.forward(x, training=True)
    loss, grad = rss_loss_and_grad(y_hat, y_enc)
    network.update_output(grad, opt.lr)
    if executor is None:
        for block in network.blocks:
            block.backward(y_enc, opt)
    else:
        # blocks share nothing mutable, so completion order does not matter
        list(executor.map(lambda b: b.backward(y_enc, opt), network.blocks))
    return y_hat, loss


def train_epoch(network: Network, dataset, config: TrainConfig, state: TrainState,
                telemetry: Telemetry | None = None, executor=None) -> int:
    """Train for one epoch; returns the training accuracy in basis points."""
    opt = block_optim(config, network.class_count, state.gamma_inv)
    correct = total = loss_sum = 0
    for x, y_enc, labels in batch_iter(dataset, config.batch_size, config.seed, state.epoch):
        y_hat, loss = train_step(network, x, y_enc, opt, executor)
        correct += int((y_hat.argmax(axis=1) == labels).sum())
        total += len(labels)
        loss_sum += loss
        if telemetry is not None:
            telemetry.observe(network)
    state.losses.append(loss_sum)
    return correct * 10000 // max(total, 1)


def evaluate(network: Network, dataset, batch_size: int = 500) -> int:
    """Accuracy in basis points; ties in the prediction go to the lowest class index."""
    correct = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        pred = network.predict(x)
        correct += int((pred == dataset.labels[start:start + batch_size]).sum())
    return correct * 10000 // max(n, 1)


def fit(network: Network, train_set, test_set, config: TrainConfig, state: TrainState | None = None,
        telemetry: Telemetry | None = None, metrics_path=None) -> TrainState:
    """Run ``config.epochs`` epochs with the plateau schedule and per-epoch logging."""
    state = state or TrainState(gamma_inv=config.gamma_inv)
    telemetry = telemetry or Telemetry.from_dict(state.telemetry)
    sched = PlateauScheduler(state.gamma_inv, config.patience, config.min_delta)
    if state.scheduler:
        sched = PlateauScheduler(**state.scheduler)
    metrics = MetricsLog(metrics_path) if metrics_path else None
    if metrics is not None and state.epoch == 0:
        metrics.header(config)
    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for _ in range(config.epochs):
            train_acc = train_epoch(network, train_set, config, state, telemetry, executor)
            test_acc = evaluate(network, test_set)
            state.epoch += 1
            state.train_acc.append(train_acc)
            state.test_acc.append(test_acc)
            new_gamma = sched.step(test_acc)
            if new_gamma is not None:
                log.info("plateau: gamma_inv %d -> %d", state.gamma_inv, new_gamma)
                state.gamma_inv = new_gamma
            state.scheduler = sched.state_dict()
            state.telemetry = telemetry.to_dict()
            log.info("epoch %d train %d bp test %d bp loss %d", state.epoch, train_acc, test_acc,
                     state.losses[-1])
            if metrics is not None:
                metrics.epoch(state, telemetry)
    finally:
        if executor is not None:
            executor.shutdown()
    return state


class MetricsLog:
    """Append-only JSON-lines metrics file."""

    def __init__(self, path):
        self.path = Path(path)

    def _write(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def header(self, config: TrainConfig) -> None:
        self._write({"config": config.to_dict()})

    def epoch(self, state: TrainState, telemetry: Telemetry) -> None:
        self._write({
            "epoch": state.epoch,
            "train_acc_bp": state.train_acc[-1],
            "test_acc_bp": state.test_acc[-1],
            "best_test_acc_bp": state.best_test_acc,
            "loss": state.losses[-1],
            "gamma_inv": state.gamma_inv,
            "max_weight_bits": signed_bits(telemetry.max_weight()),
            "max_value_bits": signed_bits(telemetry.max_value()),
        })

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(network: Network, state: TrainState | None, path,
                    config: TrainConfig | None = None, norm=None) -> None:
    """Write ``NTRD`` | u16 version | descriptor | tensors | CRC32, little-endian."""
    descriptor = {
        "architecture": network.name,
        "input_shape": list(network.input_shape),
        "class_count": network.class_count,
        "hyper": asdict(network.hyper),
        "seed": network.seed,
        "state": state.to_dict() if state is not None else None,
        "config": config.to_dict() if config is not None else None,
        "norm": {"mu": norm.mu, "omega": norm.omega} if norm is not None else None,
    }
    desc = json.dumps(descriptor, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
             struct.pack("<I", len(desc)), desc]
    tensors = network.state_dict()
    parts.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        lo, hi = int(tensor.min()), int(tensor.max())
        if lo < INT32_MIN or hi > INT32_MAX:
            raise CheckpointError(f"{name} has values outside int32 ([{lo}, {hi}])")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.astype("<i4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _read_checkpoint(path) -> tuple[dict, dict[str, IntTensor]]:
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    (dlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    descriptor = json.loads(body[pos:pos + dlen])
    pos += dlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        tensors[name] = np.frombuffer(body, dtype="<i4", count=size // 4,
                                      offset=pos).astype(np.int64).reshape(shape)
        pos += size
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    return descriptor, tensors


def load_checkpoint(path, expect_architecture: str | None = None, with_norm: bool = False):
    """Return ``(network, state, config)``; ``state``/``config`` may be ``None``.

    With ``with_norm`` a fourth item holds the stored :class:`NormStats` (or ``None``).
    """
    descriptor, tensors = _read_checkpoint(path)
    arch = descriptor["architecture"]
    if expect_architecture is not None and arch != expect_architecture:
        raise CheckpointError(f"checkpoint holds {arch}, expected {expect_architecture}")
    network = build_preset(arch, tuple(descriptor["input_shape"]), descriptor["class_count"],
                           ArchHyper(**descriptor["hyper"]), seed=descriptor["seed"])
    network.load_state_dict(tensors)
    state = TrainState.from_dict(descriptor["state"]) if descriptor.get("state") else None
    config = TrainConfig.from_dict(descriptor["config"]) if descriptor.get("config") else None
    if with_norm:
        norm = NormStats(**descriptor["norm"]) if descriptor.get("norm") else None
        return network, state, config, norm
    return network, state, config


# --------------------------------------------------------------------------
# bit-width analysis


def layer_bounds(network: Network) -> list[dict]:
    """Analytical pre-activation bit-width bounds for every trainable layer."""
    rows = []
    delta_bound = 13 + ceil_log2(network.class_count)
    for name, layer in network.named_parameters():
        if isinstance(layer, Conv2D):
            fan_in = layer.kernel * layer.kernel * layer.in_channels
        elif isinstance(layer, Linear):
            fan_in = layer.in_features
        else:
            continue
        row = {"layer": name, "kind": "conv" if isinstance(layer, Conv2D) else "linear",
               "fan_in": fan_in, "z_bound_bits": 15 + ceil_log2(fan_in)}
        if name.endswith(".lr"):
            row["delta_bound_bits"] = delta_bound
        rows.append(row)
    return rows


def bitwidth_report(network: Network, telemetry: Telemetry | dict | None = None) -> list[dict]:
    """Bounds per layer, plus observed maxima (as signed bit-widths) when available.

    A row gets ``exceeds`` listing the quantities whose observed width is above
    the analytical bound.
    """
    if isinstance(telemetry, dict):
        telemetry = Telemetry.from_dict(telemetry)
    record = telemetry.record if telemetry is not None else {}
    scaling = {}
    for block in network.blocks:
        scaling[f"block{block.index}.fw"] = block.forward_layers[block._trainable_pos + 1].sf
        scaling[f"block{block.index}.lr"] = block.learning_layers[block._head_pos + 1].sf
    scaling["output"] = network.output_layers[-1].sf
    rows = []
    for row in layer_bounds(network):
        row["sf"] = scaling[row["layer"]]
        seen = record.get(row["layer"], {})
        exceeds = []
        for key, value in seen.items():
            row[f"{key}_bits"] = signed_bits(value)
        if "z" in seen and signed_bits(seen["z"]) > row["z_bound_bits"]:
            exceeds.append("z")
        if "delta_fw" in seen and signed_bits(seen["delta_fw"]) > row.get("delta_bound_bits", 64):
            exceeds.append("delta_fw")
        if seen:
            row["exceeds"] = exceeds
        rows.append(row)
    return rows


def format_report(rows: list[dict]) -> str:
    lines = []
    for row in rows:
        text = (f"{row['layer']:<12} {row['kind']:<6} fan_in={row['fan_in']:<6} SF={row['sf']:<8} "
                f"b_z<={row['z_bound_bits']}")
        if "delta_bound_bits" in row:
            text += f" b_delta<={row['delta_bound_bits']}"
        observed = [f"{k[:-5]}={v}" for k, v in row.items()
                    if k.endswith("_bits") and not k.endswith("bound_bits")]
        if observed:
            text += "  observed bits: " + " ".join(observed)
        if row.get("exceeds"):
            text += "  EXCEEDS: " + ",".join(row["exceeds"])
        lines.append(text)
    return "\n".join(lines)


def build_for_config(config: TrainConfig, input_shape, class_count: int = 10) -> Network:
    return build_preset(config.preset, input_shape, class_count, config.hyper, seed=config.seed)
