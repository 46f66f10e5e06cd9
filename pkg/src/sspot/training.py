"""Adam with decoupled weight decay and the day-per-minibatch training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset
from .geometry import Box, assign_targets
from .losses import LossBreakdown, LossWeights, reconstruction_loss, total_loss
from .model import ModelConfig, ModelParams, build_model, decoder_forward, encoder_forward, scorer_forward
from .tensor import Tensor, backprop, no_grad, take

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "total", "l_rec", "l_sup", "l_box", "l_conf", "l_cls"]
MODES = ("supervised", "semi")


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def settings(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}

    @classmethod
    def from_settings(cls, d: Mapping) -> "OptimState":
        return cls(**{k: d[k] for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")})


def adam_step(params: Mapping[str, Tensor] | ModelParams, grads: Mapping[str, np.ndarray], state: OptimState) -> bool:
    """One bias-corrected Adam update, preceded by decoupled weight decay.

    Parameters are updated in place. A non-finite gradient rejects the whole
    step (nothing changes) and returns False.
    """
    tensors = params.tensors if isinstance(params, ModelParams) else params
    for name in tensors:
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name}")
        if not np.isfinite(grads[name]).all():
            log.warning("non-finite gradient in %s; step %d rejected", name, state.step + 1)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    decay = 1.0 - state.lr * state.weight_decay
    for name, t in tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if decay != 1.0:
            t.data *= decay
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


@dataclass
class TrainConfig:
    dataset: str
    out_dir: str
    model: ModelConfig | None = None
    mode: str = "semi"
    lam: float = 1.0
    epochs: int = 30
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 5e-4
    alpha: float = 5.0
    beta: float = 7.0
    gamma: float = 0.5
    split: str = "train"
    eval_split: str | None = None
    eval_every: int = 0
    keep_epoch_checkpoints: bool = False
    augment: bool = False  # seeded random flips and circular shifts of each training sample

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.mode == "supervised" else self.lam

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.effective_lambda)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict() if self.model is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def model_config_for(dataset: Dataset, variant: str = "3d", **overrides) -> ModelConfig:
    """Desk-sized model matching a dataset's shape."""
    m = dataset.manifest
    return ModelConfig.desk(
        variant,
        channels=m.channels,
        timesteps=m.timesteps_per_sample,
        image_h=m.image_h,
        image_w=m.image_w,
        num_classes=m.num_classes,
        labeled_frames=tuple(m.labeled_frames),
        **overrides,
    )


def check_compatible(config: ModelConfig, dataset: Dataset) -> None:
    m = dataset.manifest
    want = (m.channels, m.timesteps_per_sample, m.image_h, m.image_w)
    if config.input_shape != want:
        raise ValueError(f"model input {list(config.input_shape)} does not match dataset samples {list(want)}")
    if config.num_classes != m.num_classes:
        raise ValueError(f"model has {config.num_classes} classes, dataset {m.num_classes}")
    if tuple(m.labeled_frames) != config.labeled_frames:
        raise ValueError(f"labeled frames differ: model {config.labeled_frames}, dataset {m.labeled_frames}")


def compute_loss(params: ModelParams, x: Tensor, target, config: TrainConfig) -> LossBreakdown:
    """Forward pass and loss terms for one sample, without backprop.

    Semi mode normalises by all frames and, for lambda > 0, lets the
    reconstruction term reach the encoder. Supervised mode normalises by the
    labeled frames and only reports l_rec on them.
    """
    cfg = params.config
    weights = config.weights
    code = encoder_forward(params, x)[-1]
    if config.mode == "semi":
        n_frames = cfg.timesteps
        if weights.lam > 0:
            l_rec = reconstruction_loss(x, decoder_forward(params, code))
        else:
            with no_grad():
                l_rec = reconstruction_loss(x, decoder_forward(params, Tensor(code.data)))
    else:
        n_frames = len(cfg.labeled_frames)
        frames = list(cfg.labeled_frames)
        with no_grad():
            recon = decoder_forward(params, Tensor(code.data))
            l_rec = reconstruction_loss(take(x, (slice(None), frames)), take(recon, (slice(None), frames)))
    heads = scorer_forward(params, code)
    return total_loss(None, None, heads, target, weights, n_frames, l_rec=l_rec)


def train_step(
    params: ModelParams,
    x: Tensor,
    boxes,
    config: TrainConfig,
    state: OptimState | None = None,
) -> LossBreakdown:
    """Forward, loss, backprop and (if ``state`` is given) one Adam update."""
    cfg = params.config
    target = assign_targets(boxes, cfg.grid, cfg.labeled_frames, cfg.num_classes)
    params.zero_grad()
    breakdown = compute_loss(params, x, target, config)
    if not math.isfinite(breakdown.total.item()):
        raise TrainingError(f"non-finite loss {breakdown.values()}")
    backprop(breakdown.total)
    if state is not None:
        adam_step(params, params.grads(), state)
    return breakdown


def mirror_sample(x: Tensor, boxes, flip_x: bool, flip_y: bool) -> tuple[Tensor, list[Box]]:
    """Mirror a [C,T,H,W] sample and its boxes left-right and/or top-bottom."""
    data = x.data
    h, w = data.shape[-2:]
    if flip_x:
        data = data[..., ::-1]
    if flip_y:
        data = data[..., ::-1, :]
    out = [
        Box(w - b.x if flip_x else b.x, h - b.y if flip_y else b.y, b.w, b.h, b.class_id, b.frame) for b in boxes
    ]
    return Tensor(np.ascontiguousarray(data)), out


def roll_sample(x: Tensor, boxes, dy: int, dx: int) -> tuple[Tensor, list[Box]] | None:
    """Circularly shift a sample by (dy, dx) pixels; None if a box would wrap across the edge."""
    h, w = x.data.shape[-2:]
    out = []
    for b in boxes:
        nx, ny = (b.x + dx) % w, (b.y + dy) % h
        if nx - b.w / 2 < 0 or nx + b.w / 2 > w or ny - b.h / 2 < 0 or ny + b.h / 2 > h:
            return None
        out.append(Box(nx, ny, b.w, b.h, b.class_id, b.frame))
    return Tensor(np.roll(x.data, (dy, dx), axis=(-2, -1))), out


def _cells_distinct(boxes, cell: int) -> bool:
    keys = [(b.frame, math.floor(b.y / cell), math.floor(b.x / cell)) for b in boxes]
    return len(set(keys)) == len(keys)


def augment_sample(
    x: Tensor, boxes, rng: np.random.Generator, cell: int = 64, tries: int = 8
) -> tuple[Tensor, list[Box]]:
    """Random mirror flips, then a random circular shift that keeps every box whole.

    The synthetic background is periodic over the image, so a shifted day is
    another plausible day. Shifts that would split a box or put two boxes of a
    frame in one anchor cell are redrawn; after ``tries`` failures the sample
    is left unshifted.
    """
    fx, fy = rng.integers(0, 2, size=2)
    x, boxes = mirror_sample(x, boxes, bool(fx), bool(fy))
    h, w = x.data.shape[-2:]
    for _ in range(tries):
        rolled = roll_sample(x, boxes, int(rng.integers(0, h)), int(rng.integers(0, w)))
        if rolled is not None and _cells_distinct(rolled[1], cell):
            return rolled
    return x, list(boxes)


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimState
    epoch_losses: list[float]
    metrics_path: Path
    checkpoint_path: Path
    eval_history: list[dict] = field(default_factory=list)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def train(config: TrainConfig) -> TrainResult:
    """Train on day-sized samples; one metrics row per step, one checkpoint per epoch."""
    from .evaluation import evaluate_dataset

    ds = Dataset(config.dataset)
    model_cfg = config.model or model_config_for(ds)
    check_compatible(model_cfg, ds)
    indices = ds.split(config.split)
    if not indices:
        raise ValueError(f"split {config.split!r} is empty")

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "last.ckpt"

    params = build_model(model_cfg, config.seed)
    state = OptimState(lr=config.lr, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    epoch_losses: list[float] = []
    history: list[dict] = []

    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for epoch in range(1, config.epochs + 1):
            order = order_rng.permutation(indices)
            totals = []
            for idx in order:
                try:
                    x, boxes = ds.load_sample(int(idx))
                except (OSError, ValueError) as exc:
                    log.warning("skipping sample %d: %s", idx, exc)
                    continue
                if config.augment:
                    x, boxes = augment_sample(x, boxes, aug_rng, model_cfg.cell)
                try:
                    bd = train_step(params, x, boxes, config, state)
                except TrainingError:
                    fh.flush()
                    log.error("non-finite loss at epoch %d sample %d; keeping %s", epoch, idx, ckpt_path)
                    raise
                vals = bd.values()
                writer.writerow([state.step, epoch] + [_fmt(vals[k]) for k in LossBreakdown.FIELDS])
                totals.append(vals["total"])
            fh.flush()
            epoch_losses.append(float(np.mean(totals)) if totals else float("nan"))
            # out_dir left out so identical runs in different places write identical files
            extra = {"epoch": epoch, "train": {k: v for k, v in config.to_dict().items() if k != "out_dir"}}
            save_checkpoint(params, state, ckpt_path, extra=extra)
            if config.keep_epoch_checkpoints:
                save_checkpoint(params, state, out / f"epoch_{epoch:03d}.ckpt", extra=extra)
            log.info("epoch %d mean loss %.6g", epoch, epoch_losses[-1])
            if config.eval_every and config.eval_split and epoch % config.eval_every == 0:
                report = evaluate_dataset(params, ds, ds.split(config.eval_split))
                history.append({"epoch": epoch, **{f"mAP@{t:g}": v for t, v in report.mean_ap.items()}})
                log.info("epoch %d eval %s", epoch, history[-1])
    return TrainResult(params, state, epoch_losses, metrics_path, ckpt_path, history)
