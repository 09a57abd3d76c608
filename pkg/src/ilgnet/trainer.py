"""Training loop, step learning-rate policy, layer freezing, evaluation and
checkpoint persistence."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ilgnet import engine as E
from ilgnet.graph import ArchVariant, NetworkGraph, Variant, assemble, classify

log = logging.getLogger(__name__)

# Caffe solver settings for the three published training runs.
SOLVER_PRESETS = {
    "ava1-delta0": dict(base_lr=0.0001, stepsize=100000, gamma=0.96, max_iter=475000, momentum=0.9, weight_decay=0.0002),
    "ava1-delta1": dict(base_lr=0.00001, stepsize=19000, gamma=0.96, max_iter=760000, momentum=0.9, weight_decay=0.0002),
    "ava2": dict(base_lr=0.00001, stepsize=13325, gamma=0.96, max_iter=533000, momentum=0.9, weight_decay=0.0002),
}

# Freezes everything below the feature projections.
DOMAIN_ADAPTATION_PREFIXES = ("stem", "inc_")


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.0001
    lr_policy: str = "step"
    gamma: float = 0.96
    stepsize: int = 100000
    max_iter: int = 475000
    momentum: float = 0.9
    weight_decay: float = 0.0002
    batch_size: int = 32
    seed: int = 0
    freeze_prefixes: tuple[str, ...] = ()
    eval_interval: int = 100
    variant: str = Variant.ILGNET.value
    width_multiplier: float = 1.0
    input_side: int = 224

    def __post_init__(self):
        if self.lr_policy != "step":
            raise ValueError(f"only the 'step' lr_policy is supported, got {self.lr_policy!r}")
        if self.stepsize < 1:
            raise ValueError("stepsize must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be >= 1")
        if isinstance(self.freeze_prefixes, str):
            self.freeze_prefixes = tuple(p for p in self.freeze_prefixes.split(",") if p)
        self.freeze_prefixes = tuple(self.freeze_prefixes)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        return cls(**{**SOLVER_PRESETS[name], **overrides})

    @property
    def arch(self) -> ArchVariant:
        return ArchVariant(Variant.parse(self.variant), self.width_multiplier, self.input_side)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse ``key=value`` lines (``#`` comments allowed)."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "preset":
                values = {**SOLVER_PRESETS[val], **values}
                continue
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], val.strip('"'))
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["freeze_prefixes"] = list(self.freeze_prefixes)
        return d


def _coerce(typ: str, val: str):
    if typ == "float":
        return float(val)
    if typ == "int":
        return int(float(val)) if "e" in val.lower() else int(val)
    if typ.startswith("tuple"):
        return tuple(p.strip() for p in val.split(",") if p.strip())
    return val


def lr_at(iteration: int, config: TrainConfig) -> float:
    return config.base_lr * config.gamma ** (iteration // config.stepsize)


def freeze(net: NetworkGraph, prefixes: Sequence[str]) -> int:
    """Mark parameters whose layer name starts with any prefix as frozen."""
    count = 0
    for prefix in prefixes:
        hits = [p for p in net.parameters() if p.name.startswith(prefix)]
        if not hits:
            log.warning("freeze prefix %r matches no parameters", prefix)
        for p in hits:
            if not p.frozen:
                p.frozen = True
                count += 1
    return count


def trainable_layers(net: NetworkGraph) -> list[str]:
    seen = []
    for p in net.parameters():
        if not p.frozen and p.layer not in seen:
            seen.append(p.layer)
    return seen


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    iters_per_epoch: int = 1

    def add(self, iteration, lr, loss, accuracy=None, wall_ms=0.0):
        if self.rows and iteration <= self.rows[-1]["iter"]:
            raise ValueError("metrics iterations must be strictly increasing")
        self.rows.append(dict(iter=iteration, lr=lr, loss=loss, accuracy=accuracy, wall_ms=wall_ms))

    def epoch_losses(self) -> list[float]:
        k = self.iters_per_epoch
        return [float(np.mean(self.losses[i : i + k])) for i in range(0, len(self.losses), k)]

    def to_csv(self) -> str:
        lines = ["iter,lr,loss,accuracy,wall_ms"]
        for r in self.rows:
            acc = "" if r["accuracy"] is None else f"{r['accuracy']:.6f}"
            lines.append(f"{r['iter']},{r['lr']:.10g},{r['loss']:.8f},{acc},{r['wall_ms']:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class Checkpoint:
    net: NetworkGraph
    iteration: int = 0
    config: TrainConfig | None = None


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless seeded epoch shuffles; the last partial batch is kept."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]


def train(
    net: NetworkGraph,
    images: np.ndarray,
    labels: Sequence[int],
    config: TrainConfig,
    eval_set: tuple[np.ndarray, Sequence[int]] | None = None,
) -> tuple[Checkpoint, MetricsLog]:
    """Run ``config.max_iter`` SGD steps on preprocessed images (N, 3, S, S).

    Rows are logged every ``eval_interval`` iterations with the mean loss
    since the previous row; accuracy is filled in when ``eval_set`` is given.
    """
    images = np.asarray(images, dtype=net.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if config.freeze_prefixes:
        freeze(net, config.freeze_prefixes)
    params = net.parameters()
    rng = np.random.default_rng(config.seed)
    metrics = MetricsLog(iters_per_epoch=math.ceil(len(images) / config.batch_size))
    stream = batches(len(images), config.batch_size, rng)
    window = []
    t0 = time.perf_counter()
    for it in range(config.max_iter):
        idx = next(stream)
        logits, _ = net.forward(images[idx], train=True)
        _, loss, cache = E.softmax_xent_forward(logits.astype(np.float64), labels[idx])
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at iteration {it}")
        net.backward(E.softmax_xent_backward(cache).astype(net.dtype))
        lr = lr_at(it, config)
        E.sgd_step(params, lr, config.momentum, config.weight_decay)
        metrics.losses.append(loss)
        window.append(loss)
        if (it + 1) % config.eval_interval == 0 or it + 1 == config.max_iter:
            acc = evaluate(net, *eval_set)[0] if eval_set is not None else None
            metrics.add(it + 1, lr, float(np.mean(window)), acc, (time.perf_counter() - t0) * 1e3)
            log.info("iter %d lr %.3g loss %.5f%s", it + 1, lr, np.mean(window), "" if acc is None else f" acc {acc:.4f}")
            window = []
    return Checkpoint(net, config.max_iter, config), metrics


def predict(net: NetworkGraph, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Class decisions; an exact 0.5/0.5 tie goes to class 0."""
    out = []
    for i in range(0, len(images), batch_size):
        p = classify(net, images[i : i + batch_size])
        out.append((p[:, 1] > p[:, 0]).astype(np.int64))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def confusion(labels: Sequence[int], preds: Sequence[int]) -> np.ndarray:
    """2x2 counts indexed [true label, predicted label]."""
    m = np.zeros((2, 2), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return m


def evaluate(net: NetworkGraph, images: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    m = confusion(labels, predict(net, np.asarray(images)))
    return float(np.trace(m) / m.sum()), m


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"ILGC"
VERSION = 1
_HEAD = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def _blobs(net: NetworkGraph) -> dict[str, np.ndarray]:
    out = {p.name: p.value for p in net.parameters()}
    out.update(net.buffers())
    return out


def save_checkpoint(net: NetworkGraph, path, iteration: int = 0, config: TrainConfig | None = None):
    """Layout: magic ``ILGC``, u32 version, u32 manifest length, UTF-8 JSON
    manifest, then every blob as little-endian float32 in registry order."""
    payload = bytearray()
    entries = []
    for name, arr in _blobs(net).items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": len(payload)})
        payload += raw
    manifest = {
        "arch": net.arch.describe(),
        "seed": net.seed,
        "iteration": int(iteration),
        "channel_means": [float(v) for v in net.channel_means],
        "config": config.to_dict() if config is not None else None,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "blobs": entries,
    }
    text = json.dumps(manifest, indent=1).encode("utf-8")
    Path(path).write_bytes(_HEAD.pack(MAGIC, VERSION, len(text)) + text + bytes(payload))


def read_manifest(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < _HEAD.size:
        raise CheckpointCorruptError("file too short for a checkpoint header")
    magic, version, mlen = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    end = _HEAD.size + mlen
    if len(data) < end:
        raise CheckpointCorruptError("truncated manifest")
    try:
        manifest = json.loads(bytes(data[_HEAD.size : end]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable manifest: {exc}") from None
    payload = memoryview(data)[end:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointCorruptError(
            f"payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']} (truncated or padded file)"
        )
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise CheckpointCorruptError("payload checksum mismatch")
    return manifest, payload


def load_checkpoint(path, net: NetworkGraph | None = None) -> Checkpoint:
    """Restore a checkpoint, building the recorded architecture unless ``net``
    is given; a mismatching ``net`` raises naming the first offending blob."""
    manifest, payload = read_manifest(Path(path).read_bytes())
    arch = manifest["arch"]
    if net is None:
        net = assemble(ArchVariant(Variant.parse(arch["variant"]), arch["width_multiplier"], arch["input_side"]),
                       seed=manifest.get("seed", 0))
    targets = _blobs(net)
    recorded = {e["name"]: e for e in manifest["blobs"]}
    for name, arr in targets.items():
        if name not in recorded:
            raise CheckpointShapeError(f"checkpoint has no blob for {name}")
        if tuple(recorded[name]["shape"]) != arr.shape:
            raise CheckpointShapeError(
                f"shape mismatch for {name}: checkpoint {tuple(recorded[name]['shape'])}, network {arr.shape}"
            )
    extra = set(recorded) - set(targets)
    if extra:
        raise CheckpointShapeError(f"checkpoint blob {sorted(extra)[0]} has no counterpart in the network")
    for name, arr in targets.items():
        e = recorded[name]
        count = int(np.prod(e["shape"], dtype=np.int64))
        vals = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        arr[...] = vals
    net.channel_means = tuple(manifest["channel_means"])
    cfg = manifest.get("config")
    config = TrainConfig(**cfg) if cfg else None
    return Checkpoint(net, manifest["iteration"], config)
