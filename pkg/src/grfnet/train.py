"""SGD training loop, evaluation runner and the SSCK checkpoint format."""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .losses import EvalMask, weight_schedule, weighted_ce
from .metrics import Confusion, EvalReport
from .network import PROFILES, Model, NetworkConfig, build, forward
from .projection import visibility_mask
from .scenes import SceneSample, downsample_labels, load_sample, read_manifest
from .tensor import Graph

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    lr_decay: float = 0.1
    lr_step: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    fusion: str = "grf"
    profile: str = "tiny"
    stages: int = 4
    network: dict = field(default_factory=dict)
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    nonempty_weights: Optional[list] = None
    eval_every: int = 1
    grad_clip: Optional[float] = None
    sc_region: str = "occluded"
    dtype: str = "float32"
    label_min_fraction: float = 0.25
    reduction: str = "mean"

    def __post_init__(self):
        if not (self.lr0 > 0 and self.lr_decay > 0 and self.lr_step > 0):
            raise ValueError("learning-rate settings must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")

    def network_config(self) -> NetworkConfig:
        return PROFILES[self.profile](self.stages, fusion=self.fusion, **self.network)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        base = Path(path).parent
        for key in ("train_manifest", "test_manifest"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
        return cls.from_dict(data)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * decay ** floor(epoch / step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step)


# ---------------------------------------------------------------- optimiser


class SGD:
    """Momentum SGD: v <- mu*v - lr*(g + wd*theta); theta <- theta + v.

    Bias vectors are excluded from weight decay.
    """

    def __init__(self, model: Model, momentum: float, weight_decay: float):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(t.data) for n, t in model.store.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float, clip: Optional[float] = None) -> None:
        if clip is not None:
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            if norm > clip:
                grads = {k: g * (clip / norm) for k, g in grads.items()}
        for name, t in self.model.store.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(t.data)
            if self.weight_decay and t.ndim > 1:
                g = g + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            t.data = t.data + v


# ---------------------------------------------------------------- data


@dataclass
class PreparedSample:
    sample: SceneSample
    labels: np.ndarray  # coarse
    mask: EvalMask


def prepare(sample: SceneSample, cfg: TrainConfig) -> PreparedSample:
    coarse = downsample_labels(sample.labels, 4, cfg.label_min_fraction)
    vis = visibility_mask(sample.depth, sample.intrinsics, sample.grid.scaled(4))
    return PreparedSample(sample, coarse, EvalMask.from_visibility(vis, coarse, cfg.sc_region))


def load_split(manifest, cfg: TrainConfig) -> list[PreparedSample]:
    if manifest is None:
        raise FileNotFoundError("no manifest given")
    entries = read_manifest(manifest)
    if not entries:
        raise ValueError(f"manifest {manifest} is empty")
    return [prepare(load_sample(p), cfg) for p, _ in entries]


def _check_compatible(samples: list[PreparedSample], ncfg: NetworkConfig) -> None:
    grid = ncfg.grid()
    for s in samples:
        if s.sample.depth.shape != ncfg.image_shape:
            raise ValueError(f"sample image {s.sample.depth.shape} incompatible with network {ncfg.image_shape}")
        if tuple(s.sample.labels.shape) != tuple(ncfg.grid_extents):
            raise ValueError(f"sample grid {s.sample.labels.shape} incompatible with network {ncfg.grid_extents}")
        if not np.allclose(s.sample.grid.resolution, grid.resolution) or not np.allclose(s.sample.grid.origin, grid.origin, atol=1e-5):
            raise ValueError("sample voxel grid placement differs from the network grid")
    cams = {tuple(np.float32(v) for v in s.sample.intrinsics.__dict__.values()) for s in samples}
    if len(cams) > 1:
        raise ValueError("samples use different camera intrinsics")


def _batch(items: list[PreparedSample]):
    rgb = np.stack([s.sample.rgb for s in items])
    depth = np.stack([s.sample.depth for s in items])
    labels = np.stack([s.labels for s in items])
    mask = np.stack([s.mask.in_loss for s in items])
    return rgb, depth, labels, mask


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(ValueError):
    code = "BAD_CHECKPOINT"


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    params: dict
    momentum: dict
    rng_state: dict
    log: list = field(default_factory=list)

    def encode(self) -> bytes:
        def blob(obj) -> bytes:
            raw = json.dumps(obj, sort_keys=True).encode()
            return struct.pack("<I", len(raw)) + raw

        parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, self.epoch), blob(self.config), blob(self.rng_state), blob(self.log)]
        tensors = [(f"param/{k}", v) for k, v in self.params.items()] + [(f"momentum/{k}", v) for k, v in self.momentum.items()]
        parts.append(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr)
            raw = name.encode()
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
        off = 4

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(buf):
                raise CheckpointError("checkpoint truncated")
            vals = struct.unpack_from(fmt, buf, off)
            off += size
            return vals

        def take_blob():
            nonlocal off
            (n,) = take("<I")
            if off + n > len(buf):
                raise CheckpointError("checkpoint truncated")
            obj = json.loads(buf[off : off + n].decode())
            off += n
            return obj

        version, epoch = take("<II")
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config, rng_state, log_lines = take_blob(), take_blob(), take_blob()
        (count,) = take("<I")
        params, momentum = {}, {}
        for _ in range(count):
            (nlen,) = take("<H")
            name = buf[off : off + nlen].decode()
            off += nlen
            code, ndim = take("<BB")
            shape = take(f"<{ndim}I")
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape)) * dt.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError("checkpoint truncated")
            arr = np.frombuffer(buf, dt, int(np.prod(shape)), off).reshape(shape).astype(dt.newbyteorder("="))
            off += nbytes
            kind, key = name.split("/", 1)
            (params if kind == "param" else momentum)[key] = arr
        return cls(config, epoch, params, momentum, rng_state, log_lines)

    def save(self, path) -> None:
        Path(path).write_bytes(self.encode())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.decode(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[TrainConfig, Model]:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build(cfg.network_config(), cfg.seed, np.dtype(cfg.dtype))
    model.store.load_state(ckpt.params)
    return cfg, model


# ---------------------------------------------------------------- loops


def evaluate_samples(model: Model, samples: list[PreparedSample], batch_size: int = 4) -> EvalReport:
    """Accumulate SC (occluded and all-in-view regions) and SSC counts."""
    if not samples:
        raise ValueError("nothing to evaluate")
    conf = Confusion(model.config.num_classes)
    conf_all = Confusion(model.config.num_classes)
    cam = samples[0].sample.intrinsics
    for i in range(0, len(samples), batch_size):
        items = samples[i : i + batch_size]
        rgb, depth, labels, _ = _batch(items)
        pred = forward(model, rgb, depth, cam).data.argmax(axis=-1)
        for p, s in zip(pred, items):
            conf.add_sc(p, s.labels, s.mask.in_sc)
            conf.add_ssc(p, s.labels, s.mask.in_ssc)
            conf_all.add_sc(p, s.labels, s.mask.in_loss)
    report = conf.report()
    all_view = conf_all.report()
    report.extra.update({"sc_all.precision": all_view.precision, "sc_all.recall": all_view.recall, "sc_all.iou": all_view.iou})
    return report


def evaluate(checkpoint: Checkpoint | str | Path, manifest) -> EvalReport:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    samples = load_split(manifest, TrainConfig.from_dict(ckpt.config))
    cfg, model = model_from_checkpoint(ckpt)
    _check_compatible(samples, model.config)
    return evaluate_samples(model, samples, cfg.batch_size)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    model: Model
    report: Optional[EvalReport] = None


def train_step(model: Model, opt: SGD, batch, cam, weights, lr: float, cfg: TrainConfig) -> float:
    rgb, depth, labels, mask = batch
    model.store.zero_grad()
    with Graph() as g:
        logits = forward(model, rgb, depth, cam)
        loss = weighted_ce(logits, labels, weights, mask, cfg.reduction)
    grads = g.backward(loss)
    opt.step(grads, lr, cfg.grad_clip)
    return float(loss.data)


def train(
    cfg: TrainConfig,
    train_samples: Optional[list[PreparedSample]] = None,
    test_samples: Optional[list[PreparedSample]] = None,
    out_dir: Optional[str | Path] = None,
    resume: Optional[Checkpoint] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs (or until epoch index ``stop_after``).

    Log entries are dicts; ``{"epoch", "step", "loss", "lr"}`` per step and
    ``{"epoch", "eval": {...}}`` after evaluations.
    """
    if train_samples is None:
        train_samples = load_split(cfg.train_manifest, cfg)
    if test_samples is None and cfg.test_manifest:
        test_samples = load_split(cfg.test_manifest, cfg)
    if not train_samples:
        raise ValueError("training set is empty")
    ncfg = cfg.network_config()
    _check_compatible(train_samples + (test_samples or []), ncfg)
    model = build(ncfg, cfg.seed, np.dtype(cfg.dtype))
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    start = 0
    history: list = []
    if resume is not None:
        model.store.load_state(resume.params)
        for k, v in resume.momentum.items():
            opt.velocity[k] = np.array(v, dtype=model.store.dtype)
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch + 1
        history = list(resume.log)
    cam = train_samples[0].sample.intrinsics
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    last = cfg.epochs - 1 if stop_after is None else min(stop_after, cfg.epochs - 1)
    report = None
    ckpt = resume
    step = sum(1 for e in history if "step" in e)
    for epoch in range(start, last + 1):
        lr = lr_schedule(epoch, cfg)
        weights = weight_schedule(epoch, cfg.nonempty_weights, ncfg.num_classes)
        order = rng.permutation(len(train_samples))
        for i in range(0, len(order), cfg.batch_size):
            batch = _batch([train_samples[j] for j in order[i : i + cfg.batch_size]])
            loss = train_step(model, opt, batch, cam, weights, lr, cfg)
            history.append({"epoch": epoch, "step": step, "loss": loss, "lr": lr})
            step += 1
        log.info("epoch %d lr %.2g loss %.4f", epoch, lr, history[-1]["loss"])
        is_last = epoch == cfg.epochs - 1
        if test_samples and ((epoch + 1) % cfg.eval_every == 0 or is_last):
            report = evaluate_samples(model, test_samples, cfg.batch_size)
            history.append({"epoch": epoch, "eval": _report_dict(report)})
        ckpt = Checkpoint(
            config=cfg.to_dict(),
            epoch=epoch,
            params={k: v.copy() for k, v in model.store.state().items()},
            momentum={k: v.copy() for k, v in opt.velocity.items()},
            rng_state=rng.bit_generator.state,
            log=history,
        )
        if out:
            ckpt.save(out / "checkpoint.ssck")
            write_log(out / "metrics.log", history)
    return TrainResult(ckpt, history, model, report)


def _report_dict(r: EvalReport) -> dict:
    return {"precision": r.precision, "recall": r.recall, "iou": r.iou, "class_iou": r.class_iou, "miou": r.mean_iou}


def write_log(path, history: list) -> None:
    Path(path).write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in history))
