"""Training: Adam, plateau LR schedule on validation PSNR, flip augmentation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import config as kv
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import RainParams
from .metrics import psnr, rgb_to_luminance, ssim
from .model import GraNetConfig, GraNetWeights, granet_forward, mae_loss
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "RunConfig",
    "AdamState",
    "adam_step",
    "PlateauScheduler",
    "augment",
    "Trainer",
    "TrainingError",
    "train",
    "evaluate",
    "to_tensor",
    "from_tensor",
    "CSV_FIELDS",
]

CSV_FIELDS = ("epoch", "lr", "train_loss", "val_psnr_final", "val_psnr_coarse", "val_psnr_mask", "val_ssim_final")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    min_lr: float = 1e-4
    factor: float = 0.9
    patience: int = 3
    stop_patience: int = 5
    max_epochs: int = 200
    max_steps: Optional[int] = None
    # stop as soon as validation PSNR reaches this value
    target_psnr: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_prob: float = 0.5
    max_side: int = 512
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.min_lr <= self.lr):
            raise ValueError(f"need 0 < min_lr <= lr, got lr={self.lr}, min_lr={self.min_lr}")
        if not (0 < self.factor < 1):
            raise ValueError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 0 or self.stop_patience < 0 or self.max_epochs < 1:
            raise ValueError("patience, stop_patience must be >= 0 and max_epochs >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: GraNetConfig = field(default_factory=GraNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rain: RainParams = field(default_factory=RainParams)

    @classmethod
    def from_values(cls, values: dict[str, str]) -> "RunConfig":
        for key in values:
            section = key.partition(".")[0]
            if section not in ("model", "train", "rain"):
                raise kv.ConfigError(f"unknown config key {key!r}", key)
        return cls(
            model=kv.build(GraNetConfig, "model", values),
            train=kv.build(TrainConfig, "train", values),
            rain=kv.build(RainParams, "rain", values),
        )

    @classmethod
    def load(cls, path: Union[str, Path, None]) -> "RunConfig":
        return cls() if path is None else cls.from_values(kv.read_file(path))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_values(kv.parse_text(text))

    def to_text(self) -> str:
        lines = self.model.to_lines() + kv.to_lines(self.train, "train") + self.rain.to_lines()
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# optimiser and scheduler
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: dict, state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    missing = [name for name, p in weights.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: parameter {missing[0]!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in weights.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class PlateauScheduler:
    """Multiply the LR by ``factor`` once PSNR has not improved for more than ``patience`` epochs."""

    lr: float = 5e-4
    patience: int = 3
    factor: float = 0.9
    min_lr: float = 1e-4
    best_metric: float = -math.inf
    epochs_since_improve: int = 0

    def step(self, val_psnr: float) -> float:
        if val_psnr > self.best_metric:
            self.best_metric = val_psnr
            self.epochs_since_improve = 0
        else:
            self.epochs_since_improve += 1
            if self.epochs_since_improve > self.patience:
                self.lr = max(self.min_lr, self.factor * self.lr)
                self.epochs_since_improve = 0
        return self.lr

    @property
    def at_floor(self) -> bool:
        return self.lr <= self.min_lr


def augment(rainy: np.ndarray, clean: np.ndarray, rng: np.random.Generator, p: float = 0.5):
    """Flip both (h, w, 3) images left-right together with probability ``p``."""
    if rng.random() < p:
        return rainy[:, ::-1], clean[:, ::-1]
    return rainy, clean


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


class TrainingError(RuntimeError):
    pass


def to_tensor(img: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.ascontiguousarray(np.asarray(img, dtype=dtype).transpose(2, 0, 1)[None]))


def from_tensor(t: Tensor) -> np.ndarray:
    return t.data[0].transpose(1, 2, 0)


def evaluate(cfg: GraNetConfig, weights, pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> dict:
    """Mean luminance PSNR of final/coarse/mask outputs and mean SSIM of the final output.

    Outputs are clamped to [0, 1] before measuring; the signed mask is
    compared with the true residual ``rainy - clean`` without clamping.
    Infinite PSNRs are left out of the means.
    """
    rows = []
    with no_grad():
        for name, rainy, clean in pairs:
            out = granet_forward(to_tensor(rainy), cfg, weights)
            gt = rgb_to_luminance(clean)
            final = np.clip(from_tensor(out.final), 0, 1)
            coarse = np.clip(from_tensor(out.coarse_result), 0, 1)
            mask_true = rgb_to_luminance(rainy.astype(np.float64) - clean)
            row = {
                "name": name,
                "psnr_final": psnr(rgb_to_luminance(final), gt),
                "psnr_coarse": psnr(rgb_to_luminance(coarse), gt),
                "psnr_mask": psnr(rgb_to_luminance(from_tensor(out.mask)), mask_true),
                "psnr_input": psnr(rgb_to_luminance(rainy), gt),
            }
            if min(gt.shape) >= 11:
                row["ssim_final"] = ssim(rgb_to_luminance(final), gt)
            rows.append(row)

    def mean(key):
        vals = [r[key] for r in rows if key in r and math.isfinite(r[key])]
        return float(np.mean(vals)) if vals else math.nan

    return {
        "psnr_final": mean("psnr_final"),
        "psnr_coarse": mean("psnr_coarse"),
        "psnr_mask": mean("psnr_mask"),
        "psnr_input": mean("psnr_input"),
        "ssim_final": mean("ssim_final"),
        "per_image": rows,
    }


class Trainer:
    """Holds weights, optimiser, scheduler and RNG; one instance per run."""

    def __init__(self, run: RunConfig, weights: Optional[GraNetWeights] = None):
        self.run = run
        self.cfg = run.model
        tc = run.train
        self.rng = np.random.default_rng(tc.seed)
        self.weights = weights if weights is not None else GraNetWeights.initialize(self.cfg, seed=tc.seed)
        self.adam = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
        self.scheduler = PlateauScheduler(lr=tc.lr, patience=tc.patience, factor=tc.factor, min_lr=tc.min_lr)
        self.epoch = 0
        self.steps = 0
        self.best_psnr = -math.inf
        self.since_best = 0
        self.best_checkpoint: Optional[Checkpoint] = None
        self.history: list[dict] = []

    # -- single steps ------------------------------------------------------

    def train_step(self, rainy: np.ndarray, clean: np.ndarray, name: str = "?") -> float:
        rainy, clean = augment(rainy, clean, self.rng, self.run.train.flip_prob)
        out = granet_forward(to_tensor(rainy), self.cfg, self.weights)
        loss = mae_loss(out.final, to_tensor(clean))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.steps + 1} on image {name!r}")
        self.weights.zero_grads()
        loss.backward()
        adam_step(self.weights, self.adam)
        self.steps += 1
        return value

    def run_epoch(self, pairs: Sequence[tuple[str, np.ndarray, np.ndarray]], max_steps: Optional[int] = None) -> float:
        order = self.rng.permutation(len(pairs))
        losses = []
        for i in order:
            if max_steps is not None and self.steps >= max_steps:
                break
            name, rainy, clean = pairs[i]
            losses.append(self.train_step(rainy, clean, name))
        self.epoch += 1
        return float(np.mean(losses)) if losses else math.nan

    def end_epoch(self, val_metrics: dict) -> None:
        """Feed validation PSNR to the scheduler and track the best weights."""
        score = val_metrics["psnr_final"]
        if score > self.best_psnr:
            self.best_psnr = score
            self.since_best = 0
            self.best_checkpoint = self.checkpoint()
        else:
            self.since_best += 1
        self.adam.lr = self.scheduler.step(score)

    def should_stop(self) -> bool:
        tc = self.run.train
        if self.epoch >= tc.max_epochs:
            return True
        if tc.max_steps is not None and self.steps >= tc.max_steps:
            return True
        if tc.target_psnr is not None and self.best_psnr >= tc.target_psnr:
            return True
        return self.scheduler.at_floor and self.since_best >= tc.stop_patience

    # -- persistence -------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            fingerprint=self.cfg.fingerprint(),
            config_text=self.run.to_text(),
            weights={k: v.data.copy() for k, v in self.weights.items()},
            adam={
                "lr": self.adam.lr,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
                "step": self.adam.step,
                "m": {k: v.copy() for k, v in self.adam.m.items()},
                "v": {k: v.copy() for k, v in self.adam.v.items()},
            },
            scheduler=asdict(self.scheduler),
            meta={
                "epoch": self.epoch,
                "steps": self.steps,
                "best_psnr": self.best_psnr,
                "since_best": self.since_best,
                "rng_state": self.rng.bit_generator.state,
            },
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, run: Optional[RunConfig] = None) -> "Trainer":
        run = run or RunConfig.from_text(ckpt.config_text)
        if run.model.fingerprint() != ckpt.fingerprint:
            raise CheckpointError(
                f"checkpoint config {ckpt.fingerprint} does not match model config {run.model.fingerprint()}"
            )
        weights = weights_from_checkpoint(ckpt, run.model)
        self = cls(run, weights)
        a = ckpt.adam
        self.adam = AdamState(
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=int(a["step"]),
            m={k: v.copy() for k, v in a.get("m", {}).items()},
            v={k: v.copy() for k, v in a.get("v", {}).items()},
        )
        self.scheduler = PlateauScheduler(**ckpt.scheduler)
        meta = ckpt.meta
        self.epoch = int(meta.get("epoch", 0))
        self.steps = int(meta.get("steps", 0))
        self.best_psnr = float(meta.get("best_psnr", -math.inf))
        self.since_best = int(meta.get("since_best", 0))
        if "rng_state" in meta:
            self.rng.bit_generator.state = meta["rng_state"]
        return self


def weights_from_checkpoint(ckpt: Checkpoint, cfg: GraNetConfig) -> GraNetWeights:
    template = GraNetWeights.initialize(cfg, seed=0)
    if set(template) != set(ckpt.weights):
        extra = sorted(set(ckpt.weights) - set(template))
        absent = sorted(set(template) - set(ckpt.weights))
        raise CheckpointError(f"checkpoint parameters do not match the config (missing {absent[:3]}, unexpected {extra[:3]})")
    out = GraNetWeights()
    for name, t in template.items():
        arr = ckpt.weights[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape} does not match config shape {t.shape}")
        out[name] = Tensor(np.array(arr, dtype=np.float32), requires_grad=True)
    return out


def _fmt(x: float) -> str:
    return f"{x:.4f}" if math.isfinite(x) else str(x)


def train(
    run: RunConfig,
    train_set: Sequence[tuple[str, np.ndarray, np.ndarray]],
    val_set: Sequence[tuple[str, np.ndarray, np.ndarray]],
    out_path: Union[str, Path, None] = None,
    csv_path: Union[str, Path, None] = None,
    resume: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Run the protocol until the stop rule fires; return the best-validation checkpoint.

    ``train_set`` and ``val_set`` hold ``(name, rainy, clean)`` image triples.
    With ``out_path`` the best checkpoint is written there and the latest
    state to ``<out_path>.last``; with ``csv_path`` one metrics row per
    epoch is appended.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    trainer = Trainer.from_checkpoint(resume, run) if resume is not None else Trainer(run)
    csv_file = None
    writer = None
    if csv_path is not None:
        csv_path = Path(csv_path)
        new = not csv_path.exists() or resume is None
        csv_file = open(csv_path, "w" if new else "a", newline="")
        writer = csv.writer(csv_file)
        if new:
            writer.writerow(CSV_FIELDS)
    try:
        while not trainer.should_stop():
            t0 = time.perf_counter()
            lr = trainer.adam.lr
            loss = trainer.run_epoch(train_set, run.train.max_steps)
            metrics = evaluate(trainer.cfg, trainer.weights, val_set)
            trainer.end_epoch(metrics)
            row = {
                "epoch": trainer.epoch,
                "lr": lr,
                "train_loss": loss,
                "val_psnr_final": metrics["psnr_final"],
                "val_psnr_coarse": metrics["psnr_coarse"],
                "val_psnr_mask": metrics["psnr_mask"],
                "val_ssim_final": metrics["ssim_final"],
            }
            trainer.history.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in CSV_FIELDS])
                csv_file.flush()
            log.info(
                "epoch %d lr %.3g loss %.5f | val psnr final %s coarse %s mask %s | ssim %s | %.1fs",
                trainer.epoch, lr, loss, _fmt(metrics["psnr_final"]), _fmt(metrics["psnr_coarse"]),
                _fmt(metrics["psnr_mask"]), _fmt(metrics["ssim_final"]), time.perf_counter() - t0,
            )
            if on_epoch is not None:
                on_epoch(row)
            if out_path is not None:
                save_checkpoint(Path(str(out_path) + ".last"), trainer.checkpoint())
                if trainer.best_checkpoint is not None and trainer.since_best == 0:
                    save_checkpoint(out_path, trainer.best_checkpoint)
    finally:
        if csv_file is not None:
            csv_file.close()
    best = trainer.best_checkpoint or trainer.checkpoint()
    best.meta["history"] = trainer.history
    return best
