"""Mean-teacher training loop and its pieces.

The student is trained by SGD with momentum on CE + Dice plus a ramped
consistency term; the teacher is an exponential moving average of the student
and is the copy used for prediction. All state is explicit (ParamSets,
momentum buffers, torch generators), every step is a pure function of that
state, and a fixed seed reproduces a run bit for bit.
"""
from __future__ import annotations

import json
import hashlib
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import ClassVar

import numpy as np
import torch

from .data import (
    Batch,
    DatasetSplit,
    Mask,
    SampleStream,
    _stable_int,
    make_batch,
    select_label_budget,
)
from .losses import LossBreakdown, LossWeights
from .model import (
    LossInputs,
    ModelConfig,
    NoiseConfig,
    ParamSet,
    clone_params,
    grad_total_loss,
    init_params,
    inject_noise,
    softmax_probs,
    unet_forward,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "semi"  # "semi" or "fully"
    total_iterations: int = 3000
    batch_size: int = 16
    base_lr: float = 0.01
    momentum: float = 0.9
    w1: float = 0.5
    w2_max: float = 1.0
    ramp_up_length: int = 50  # epochs
    ema_beta_rampup: float = 0.99
    ema_beta_main: float = 0.999
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    noise_on_labeled: bool = True
    consistency_on_labeled: bool = False
    augment: bool = True
    seed: int = 0
    label_budget: int | str = "all"
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.mode not in ("semi", "fully"):
            raise ValueError(f"mode must be 'semi' or 'fully', got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode == "semi" and self.batch_size % 2:
            raise ValueError("semi-supervised batches split in half; batch_size must be even")
        if self.total_iterations < 0 or self.checkpoint_every < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.base_lr <= 0 or not math.isfinite(self.base_lr):
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.w1 < 0 or self.w2_max < 0:
            raise ValueError("loss weights must be >= 0")
        if self.ramp_up_length < 1:
            raise ValueError("ramp_up_length must be >= 1")
        for beta in (self.ema_beta_rampup, self.ema_beta_main):
            if not 0 <= beta <= 1:
                raise ValueError(f"EMA decay {beta} outside [0, 1]")
        if isinstance(self.label_budget, str):
            if self.label_budget != "all":
                raise ValueError(f"label_budget must be an int or 'all', got {self.label_budget!r}")
        elif self.label_budget < 0:
            raise ValueError("label_budget must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("noise"), dict):
            d["noise"] = NoiseConfig.from_dict(d["noise"])
        return cls(**d)


def lr_schedule(iteration: int, total_iterations: int, base_lr: float) -> float:
    """Polynomial decay base_lr * (1 - c/t)^0.9 for completed iterations c of t."""
    if total_iterations < 1:
        raise ValueError("total_iterations must be >= 1")
    if not 0 <= iteration <= total_iterations:
        raise ValueError(
            f"iteration {iteration} outside [0, {total_iterations}]")
    return base_lr * (1.0 - iteration / total_iterations) ** 0.9


def ramp_up_weight(epoch: int, length: int) -> float:
    """exp(-5 (1 - E/L)^2) during the first L epochs, then 1."""
    if epoch < 0 or length < 1:
        raise ValueError("need epoch >= 0 and length >= 1")
    if epoch >= length:
        return 1.0
    x = 1.0 - epoch / length
    return math.exp(-5.0 * x * x)


def ema_decay(epoch: int, config: TrainConfig) -> float:
    """Smaller decay while the consistency weight is still ramping (E <= L)."""
    return config.ema_beta_rampup if epoch <= config.ramp_up_length else config.ema_beta_main


def ema_update(teacher: ParamSet, student: ParamSet, beta: float) -> ParamSet:
    """teacher <- beta * teacher + (1 - beta) * student, elementwise."""
    if not 0 <= beta <= 1:
        raise ValueError(f"EMA decay {beta} outside [0, 1]")
    if set(teacher.arrays) != set(student.arrays):
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for name, t in teacher.arrays.items():
        s = student.arrays[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        out[name] = beta * t + (1.0 - beta) * s
    return ParamSet(out, teacher.role)


def sgd_step(params: ParamSet, grads: dict[str, torch.Tensor], lr: float, momentum: float,
             buffers: dict[str, torch.Tensor]) -> tuple[ParamSet, dict[str, torch.Tensor]]:
    """Classical momentum: v <- m v + g; p <- p - lr v. Returns new params and buffers."""
    if lr < 0 or not math.isfinite(lr):
        raise ValueError(f"bad learning rate {lr}")
    if set(grads) != set(params.arrays):
        raise ValueError("gradient names do not match parameter names")
    new_params, new_buffers = {}, {}
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name}")
        v = momentum * buffers[name] + g if name in buffers else g.clone()
        new_params[name] = p - lr * v
        new_buffers[name] = v
    return ParamSet(new_params, params.role), new_buffers


@dataclass
class TrainState:
    model_config: ModelConfig
    student: ParamSet
    teacher: ParamSet
    momentum: dict[str, torch.Tensor]
    iteration: int  # completed steps c
    epoch: int  # floor(c / iterations_per_epoch)
    iterations_per_epoch: int
    noise_student: torch.Generator
    noise_teacher: torch.Generator


def iterations_per_epoch(labeled_count: int, config: TrainConfig, semi_active: bool) -> int:
    """Number of batches per pass over the labeled pool."""
    if labeled_count < 1:
        raise ValueError("need at least one labeled sample")
    per_batch = config.batch_size // 2 if semi_active else config.batch_size
    return -(-labeled_count // per_batch)


def init_train_state(model_config: ModelConfig, config: TrainConfig,
                     ipe: int) -> TrainState:
    student = init_params(model_config, config.seed)
    gens = []
    for role in ("student", "teacher"):
        g = torch.Generator()
        g.manual_seed(_stable_int(f"noise:{role}:{config.seed}"))
        gens.append(g)
    return TrainState(
        model_config=model_config,
        student=student,
        teacher=clone_params(student, "teacher"),
        momentum={},
        iteration=0,
        epoch=0,
        iterations_per_epoch=ipe,
        noise_student=gens[0],
        noise_teacher=gens[1],
    )


def _stack_images(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.ascontiguousarray(np.stack([im.transpose(2, 0, 1) for im in images]))
    return torch.from_numpy(arr)


def _stack_masks(masks: list[Mask]) -> torch.Tensor:
    return torch.from_numpy(np.stack(masks).astype(np.int64))


def train_step(state: TrainState, batch: Batch, config: TrainConfig
               ) -> tuple[TrainState, LossBreakdown]:
    """One optimization step; returns the advanced state and the loss values."""
    if not batch.labeled:
        raise ValueError("batch has no labeled samples")
    if config.mode == "fully" and batch.unlabeled:
        raise ValueError("fully supervised training got unlabeled samples")
    c, e = state.iteration, state.epoch
    lr = lr_schedule(c, config.total_iterations, config.base_lr)
    w2 = config.w2_max * ramp_up_weight(e, config.ramp_up_length)

    lx = _stack_images([p for p, _ in batch.labeled])
    ly = _stack_masks([m for _, m in batch.labeled])
    lx_in = lx
    if config.noise.enabled and config.noise_on_labeled:
        lx_in = inject_noise(lx, config.noise, state.noise_student)

    weights = LossWeights(config.w1, w2)
    if config.mode == "semi" and batch.unlabeled and w2 > 0:
        base = _stack_images(batch.unlabeled)
        if config.consistency_on_labeled:
            base = torch.cat([base, lx], dim=0)
        inputs = LossInputs(
            labeled_pixels=lx_in,
            labeled_masks=ly,
            weights=weights,
            student_consistency_pixels=inject_noise(base, config.noise, state.noise_student),
            teacher_consistency_pixels=inject_noise(base, config.noise, state.noise_teacher),
            teacher=state.teacher,
        )
    else:
        inputs = LossInputs(labeled_pixels=lx_in, labeled_masks=ly, weights=weights)

    grads, breakdown = grad_total_loss(state.student, state.model_config, inputs)
    student, buffers = sgd_step(state.student, grads, lr, config.momentum, state.momentum)
    teacher = ema_update(state.teacher, student, ema_decay(e, config))
    c += 1
    return (
        replace(state, student=student, teacher=teacher, momentum=buffers,
                iteration=c, epoch=c // state.iterations_per_epoch),
        breakdown,
    )


@dataclass
class LogRecord:
    iteration: int
    epoch: int
    lr: float
    w2: float
    beta: float
    ce: float
    dice: float
    consistency: float
    total: float

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "iteration", "epoch", "lr", "w2", "beta", "ce", "dice", "consistency", "total")

    def line(self) -> str:
        vals = [str(self.iteration), str(self.epoch)] + [
            f"{v:.10g}" for v in (self.lr, self.w2, self.beta,
                                  self.ce, self.dice, self.consistency, self.total)]
        return "\t".join(vals)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    student: ParamSet
    teacher: ParamSet
    iteration: int
    epoch: int
    config_hash: str
    history: list[LogRecord] = field(default_factory=list, repr=False)


def config_fingerprint(model_config: ModelConfig, train_config: TrainConfig) -> str:
    payload = {"model": asdict(model_config), "train": asdict(train_config)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    """Write manifest.json plus one little-endian float32 blob per parameter."""
    path = Path(path)
    if set(ckpt.teacher.arrays) != set(ckpt.student.arrays):
        raise ValueError("student and teacher parameter names differ")
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    for role, ps in (("student", ckpt.student), ("teacher", ckpt.teacher)):
        d = tmp / "params" / role
        d.mkdir(parents=True)
        for name, t in ps.arrays.items():
            t.detach().cpu().numpy().astype("<f4").tofile(d / f"{name}.bin")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "iteration": ckpt.iteration,
        "epoch": ckpt.epoch,
        "ema_phase": ("rampup" if ckpt.epoch <= ckpt.train_config.ramp_up_length
                      else "main"),
        "config_hash": ckpt.config_hash,
        "dtype": "<f4",
        "params": {name: list(t.shape) for name, t in ckpt.student.arrays.items()},
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    model_config = ModelConfig.from_dict(manifest["model_config"])
    train_config = TrainConfig.from_dict(manifest["train_config"])
    shapes = manifest["params"]

    def load_role(role: str) -> ParamSet:
        arrays = {}
        for name, shape in shapes.items():
            f = path / "params" / role / f"{name}.bin"
            if not f.is_file():
                raise FileNotFoundError(f"missing parameter blob {f}")
            raw = np.fromfile(f, dtype="<f4")
            expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if raw.size != expected:
                raise ValueError(f"{f}: {raw.size} values, expected {expected}")
            arrays[name] = torch.from_numpy(raw.astype(np.float32).reshape(shape))
        return ParamSet(arrays, role)

    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        student=load_role("student"),
        teacher=load_role("teacher"),
        iteration=int(manifest["iteration"]),
        epoch=int(manifest["epoch"]),
        config_hash=manifest["config_hash"],
    )


def _as_checkpoint(state: TrainState, config: TrainConfig,
                   history: list[LogRecord]) -> Checkpoint:
    return Checkpoint(
        model_config=state.model_config,
        train_config=config,
        student=clone_params(state.student, "student"),
        teacher=clone_params(state.teacher, "teacher"),
        iteration=state.iteration,
        epoch=state.epoch,
        config_hash=config_fingerprint(state.model_config, config),
        history=history,
    )


def write_train_log(history: list[LogRecord], path: Path | str) -> None:
    Path(path).write_text("".join(r.line() + "\n" for r in history))


def train(config: TrainConfig, data: DatasetSplit,
          model_config: ModelConfig | None = None,
          out_dir: Path | str | None = None) -> Checkpoint:
    """Run the full loop on a split; optionally persist log and checkpoints."""
    model_config = model_config or ModelConfig()
    if not data.train:
        raise ValueError("training requires a non-empty train split")
    k = len(data.train) if config.label_budget == "all" else config.label_budget
    labeled, unlabeled = select_label_budget(data.train, k, config.seed)
    if not labeled:
        raise ValueError("label budget leaves no supervised samples")
    semi = config.mode == "semi" and bool(unlabeled)
    if config.mode == "semi" and not semi:
        log.info("label budget covers every sample; consistency term is inactive")
    ipe = iterations_per_epoch(len(labeled), config, semi)

    lab_stream = SampleStream(labeled, config.seed, "labeled",
                              augment_samples=config.augment)
    unl_stream = (SampleStream(unlabeled, config.seed, "unlabeled",
                               augment_samples=config.augment) if semi else None)
    state = init_train_state(model_config, config, ipe)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[LogRecord] = []
    for _ in range(config.total_iterations):
        c, e = state.iteration, state.epoch
        lr = lr_schedule(c, config.total_iterations, config.base_lr)
        w2 = config.w2_max * ramp_up_weight(e, config.ramp_up_length)
        beta = ema_decay(e, config)
        batch = make_batch(lab_stream, unl_stream, config.batch_size)
        state, bd = train_step(state, batch, config)
        history.append(LogRecord(c + 1, e, lr, w2, beta,
                                 bd.ce, bd.dice, bd.consistency, bd.total))
        done = state.iteration
        if (out is not None and config.checkpoint_every
                and done % config.checkpoint_every == 0
                and done < config.total_iterations):
            save_checkpoint(_as_checkpoint(state, config, []),
                            out / f"checkpoint_{done:06d}")
    ckpt = _as_checkpoint(state, config, history)
    if out is not None:
        write_train_log(history, out / "train_log.tsv")
        save_checkpoint(ckpt, out / "checkpoint_final")
    return ckpt


def predict(ckpt: Checkpoint, pixels: np.ndarray) -> Mask:
    """Teacher-model class map for one image; ties go to the background."""
    cfg = ckpt.model_config
    if pixels.ndim != 3 or pixels.shape[2] != cfg.in_channels:
        raise ValueError(f"expected (H, W, {cfg.in_channels}) pixels, got {pixels.shape}")
    div = 2 ** cfg.depth
    h, w = pixels.shape[:2]
    if h % div or w % div:
        raise ValueError(f"input size {h}x{w} must be divisible by 2^depth = {div}")
    x = _stack_images([pixels.astype(np.float32, copy=False)])
    with torch.no_grad():
        probs = softmax_probs(unet_forward(ckpt.teacher, cfg, x))[0]
    return np.argmax(probs.numpy(), axis=0).astype(np.uint8)
