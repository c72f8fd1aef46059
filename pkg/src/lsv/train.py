"""Adam training loop with the step-halving schedule, checkpoints and metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DataConfigError, FeatureSequence, chunk_corpus, window_context
from .nets import Batch, Network, NetworkConfig, build_network
from .numcore import ParamTensor, RngStream

log = logging.getLogger(__name__)

SYSTEMS = ("d-vector", "d-ladder", "x-vector", "x-ladder", "x-multi")
CKPT_MAGIC = b"LSVC"
CKPT_VERSION = 1
METRIC_FIELDS = ("epoch", "step", "lr", "ce", "denoise", "total", "eer")


class TrainConfigError(ValueError):
    pass


class NumericAbort(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


class CheckpointFormatError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    system: str = "d-vector"
    epochs: int = 15
    base_lr: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 3
    chunk_min: int = 200
    chunk_max: int = 400

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise TrainConfigError(f"unknown system {self.system!r}; choose from {SYSTEMS}")
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise TrainConfigError("base_lr must be > 0")
        if self.batch_size < 2:
            raise TrainConfigError("batch_size must be >= 2 (batchnorm needs a batch)")
        if self.eval_every < 1:
            raise TrainConfigError("eval_every must be >= 1")

    @property
    def framework(self) -> str:
        return "d-vector" if self.system.startswith("d") else "x-vector"


def lr_schedule(epoch: int, base_lr: float) -> float:
    """Constant for epochs 1-5, then halved at epochs 6, 8, 10, 12, 14, ..."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return base_lr / 2 ** max(0, math.ceil((epoch - 5) / 2))


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, ParamTensor]) -> "OptimState":
        return cls({n: np.zeros_like(p.value) for n, p in params.items()},
                   {n: np.zeros_like(p.value) for n, p in params.items()})


def adam_step(params: dict[str, ParamTensor], state: OptimState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update using ``param.grad``, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        if m.shape != g.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, gradient {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: dict
    epoch: int
    params: dict[str, np.ndarray]
    optim: OptimState
    rng_states: dict[str, np.ndarray]
    config_hash: int = 0

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)


def _hashable_config(config: dict) -> dict:
    d = json.loads(json.dumps(config))
    for k in ("epochs", "eval_every"):
        d.get("train", {}).pop(k, None)
    return d


def config_hash(config: dict) -> int:
    blob = json.dumps(_hashable_config(config), sort_keys=True).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def check_compatible(stored: dict, expected: dict) -> None:
    a, b = _flatten(_hashable_config(stored)), _flatten(_hashable_config(expected))
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    if diff:
        k = diff[0]
        raise CheckpointMismatch(f"checkpoint config differs in {k!r}: stored {a.get(k)!r}, requested {b.get(k)!r}")


def _blob(name: str, kind: bytes, arr) -> bytes:
    nb = name.encode("utf-8")
    if kind == b"j":
        payload = arr
        shape = (len(payload),)
    else:
        a = np.ascontiguousarray(arr, dtype="<f8" if kind == b"f" else "<u8")
        payload, shape = a.tobytes(), a.shape
    head = struct.pack("<H", len(nb)) + nb + kind + struct.pack("<B", len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    count = len(payload) if kind == b"j" else int(np.prod(shape, dtype=np.int64))
    return head + struct.pack("<Q", count) + payload


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blobs = [_blob("config", b"j", json.dumps(ckpt.config, sort_keys=True).encode("utf-8")),
             _blob("optim.step", b"u", [ckpt.optim.step])]
    for n in sorted(ckpt.params):
        blobs.append(_blob(f"param.{n}", b"f", ckpt.params[n]))
    for n in sorted(ckpt.optim.m):
        blobs.append(_blob(f"adam_m.{n}", b"f", ckpt.optim.m[n]))
        blobs.append(_blob(f"adam_v.{n}", b"f", ckpt.optim.v[n]))
    for n in sorted(ckpt.rng_states):
        blobs.append(_blob(f"rng.{n}", b"u", ckpt.rng_states[n]))
    header = CKPT_MAGIC + struct.pack("<HQII", CKPT_VERSION, ckpt.config_hash, ckpt.epoch, len(blobs))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + b"".join(blobs))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated at offset {len(self.raw)} (needed {n} bytes at {self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config: dict | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic at offset 0")
    version, chash, epoch, nblobs = r.unpack("<HQII")
    if version != CKPT_VERSION:
        raise CheckpointMismatch(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    blobs = {}
    for _ in range(nblobs):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        kind = r.take(1)
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (count,) = r.unpack("<Q")
        if kind == b"j":
            blobs[name] = r.take(count)
        elif kind in (b"f", b"u"):
            dt = "<f8" if kind == b"f" else "<u8"
            arr = np.frombuffer(r.take(8 * count), dtype=dt).reshape(shape)
            blobs[name] = arr.astype(np.float64 if kind == b"f" else np.uint64)
        else:
            raise CheckpointFormatError(f"{path}: unknown blob kind {kind!r} at offset {r.pos - 1}")
    if r.pos != len(r.raw):
        raise CheckpointFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    config = json.loads(blobs["config"].decode("utf-8"))
    if config_hash(config) != chash:
        raise CheckpointFormatError(f"{path}: config hash does not match stored config")
    if expected_config is not None:
        check_compatible(config, expected_config)
    params = {k[6:]: v for k, v in blobs.items() if k.startswith("param.")}
    optim = OptimState({k[7:]: v for k, v in blobs.items() if k.startswith("adam_m.")},
                       {k[7:]: v for k, v in blobs.items() if k.startswith("adam_v.")},
                       int(blobs["optim.step"][0]))
    rngs = {k[4:]: v for k, v in blobs.items() if k.startswith("rng.")}
    return Checkpoint(config, epoch, params, optim, rngs, chash)


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = build_network(NetworkConfig.from_dict(ckpt.config["network"]))
    if set(net.params) != set(ckpt.params):
        raise CheckpointMismatch("checkpoint parameters do not match the network layout")
    for n, p in net.params.items():
        if p.value.shape != ckpt.params[n].shape:
            raise CheckpointMismatch(f"parameter {n}: shape {ckpt.params[n].shape} != {p.value.shape}")
        p.value[...] = ckpt.params[n]
    return net


# ---------------------------------------------------------------- training data

@dataclass
class Examples:
    """Training examples for one framework: windows (d) or chunks (x)."""
    items: list | np.ndarray
    labels: np.ndarray
    sequences: bool

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> Batch:
        if self.sequences:
            return Batch.from_sequences([self.items[i] for i in idx], self.labels[idx])
        return Batch(self.items[idx], self.labels[idx])


def speaker_index(seqs) -> dict[str, int]:
    return {s: i for i, s in enumerate(sorted({q.speaker for q in seqs}))}


def prepare_examples(seqs: list[FeatureSequence], cfg: TrainConfig, speakers: dict[str, int] | None = None) -> Examples:
    speakers = speakers or speaker_index(seqs)
    if cfg.framework == "d-vector":
        windows, labels = [], []
        for s in seqs:
            w = window_context(s)
            windows.append(w)
            labels.extend([speakers[s.speaker]] * len(w))
        if not labels:
            raise DataConfigError("no utterance is long enough for a single 51-frame window")
        return Examples(np.concatenate(windows), np.array(labels, dtype=np.int64), False)
    chunks, _ = chunk_corpus(seqs, cfg.chunk_min, cfg.chunk_max, RngStream(cfg.seed, "chunk"))
    if not chunks:
        raise DataConfigError(f"no utterance reaches the {cfg.chunk_min}-frame chunk minimum")
    return Examples([c.frames for c in chunks], np.array([speakers[c.speaker] for c in chunks], dtype=np.int64), True)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    net: Network
    checkpoints: list[Path] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    final: Checkpoint | None = None


def run_config(net: Network, cfg: TrainConfig) -> dict:
    return {"network": net.config.to_dict(), "train": asdict(cfg)}


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                        for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            rows.append({"epoch": int(r["epoch"]), "step": int(r["step"]), "lr": float(r["lr"]),
                         "ce": float(r["ce"]), "denoise": float(r["denoise"]), "total": float(r["total"]),
                         "eer": float(r["eer"]) if r["eer"] else None})
    return rows


def train(net: Network, seqs: list[FeatureSequence], cfg: TrainConfig, out_dir=None,
          evaluator: Callable[[Network], float] | None = None, resume: Checkpoint | None = None,
          keep_checkpoints: bool = True) -> TrainResult:
    """Train ``net`` in place on labelled utterances.

    Writes ``ckpt_eNN.lsvc`` per epoch and ``metrics.csv`` into ``out_dir``
    when given. ``evaluator(net)`` (returning EER in [0, 1]) runs every
    ``cfg.eval_every`` epochs and on the last epoch.
    """
    if net.system != cfg.system:
        raise TrainConfigError(f"network is {net.system} but config asks for {cfg.system}")
    if not seqs:
        raise DataConfigError("empty training corpus")
    speakers = speaker_index(seqs)
    if len(speakers) != net.config.n_speakers:
        raise DataConfigError(f"corpus has {len(speakers)} speakers, network expects {net.config.n_speakers}")
    feat_dim = seqs[0].frames.shape[1]
    expected_in = net.config.layers[0].in_dim
    if (feat_dim * 51 if cfg.framework == "d-vector" else feat_dim) != expected_in:
        raise DataConfigError(f"feature dim {feat_dim} does not fit network input {expected_in}")
    examples = prepare_examples(seqs, cfg, speakers)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    config = run_config(net, cfg)
    rng_shuffle = RngStream(cfg.seed, "shuffle")
    rng_noise = RngStream(cfg.seed, "noise")
    optim = OptimState.zeros_like(net.params)
    result = TrainResult(net)
    start = 0
    if resume is not None:
        check_compatible(resume.config, config)
        for n, p in net.params.items():
            p.value[...] = resume.params[n]
        optim = OptimState({k: v.copy() for k, v in resume.optim.m.items()},
                           {k: v.copy() for k, v in resume.optim.v.items()}, resume.optim.step)
        rng_shuffle.set_state(resume.rng_states["shuffle"])
        rng_noise.set_state(resume.rng_states["noise"])
        start = resume.epoch
        if out is not None and (out / "metrics.csv").exists():
            result.metrics = [r for r in read_metrics(out / "metrics.csv") if r["epoch"] <= start]

    last_good = None
    n = len(examples)
    for epoch in range(start + 1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg.base_lr)
        perm = rng_shuffle.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss = net.loss_and_grad(examples.batch(idx), rng_noise)
            if not (math.isfinite(loss.total) and all(np.all(np.isfinite(p.grad)) for p in net.params.values())):
                raise NumericAbort(f"non-finite loss at epoch {epoch}, step {optim.step + 1}", last_good)
            adam_step(net.params, optim, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            result.metrics.append({"epoch": epoch, "step": optim.step, "lr": lr, "ce": loss.ce,
                                   "denoise": loss.aux, "total": loss.total, "eer": None})
        if evaluator is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            eer = float(evaluator(net))
            result.metrics[-1]["eer"] = eer
            log.info("%s epoch %d: EER %.2f%%", cfg.system, epoch, 100 * eer)
        ckpt = Checkpoint(config, epoch, {k: p.value.copy() for k, p in net.params.items()},
                          OptimState({k: v.copy() for k, v in optim.m.items()},
                                     {k: v.copy() for k, v in optim.v.items()}, optim.step),
                          {"shuffle": rng_shuffle.get_state(), "noise": rng_noise.get_state()})
        result.final = ckpt
        if out is not None:
            path = out / f"ckpt_e{epoch:02d}.lsvc"
            save_checkpoint(path, ckpt)
            write_metrics(out / "metrics.csv", result.metrics)
            if keep_checkpoints:
                result.checkpoints.append(path)
            last_good = path
    return result
