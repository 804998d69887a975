"""Photometric training: background stage, then residual + Mixnet with the
background frozen. Also trains the single-field baselines."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .fields import FieldBundle, FieldConfig, MixConfig, MixField, RadianceField, save_bundle
from .renderer import Rays, clip_to_box, generate_rays, render_rays
from .scenes import Dataset, substream

log = logging.getLogger(__name__)

TRAIN_MODES = ("background", "residual", "naive_residual", "scratch")


@dataclass
class TrainConfig:
    epochs: int = 2
    rays_per_batch: int = 4096
    learning_rate: float = 1e-3  # MLP weights
    grid_learning_rate: float = 1e-2  # hash tables
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0
    mode: str = "background"
    n_samples: int = 128
    checkpoint_every: int = 0  # epochs; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0 or self.grid_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {TRAIN_MODES}")


def photometric_loss(predicted, target) -> ad.Tensor:
    """Squared colour error summed over channels, averaged over rays."""
    predicted = ad.as_tensor(predicted)
    target = ad.as_tensor(target)
    if predicted.shape != target.shape:
        raise ad.DimensionError(f"loss: {predicted.shape} vs {target.shape}")
    per_ray = ad.sum_reduce(ad.square(ad.subtract(predicted, target)), axis=-1)
    return ad.mean(per_ray)


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0


def adam_step(params: list, grads: list, state: OptimState, lrs, beta1=0.9, beta2=0.99,
              eps=1e-15) -> None:
    """Bias-corrected Adam update applied in place to ``param.data``."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    if np.isscalar(lrs):
        lrs = [lrs] * len(params)
    for p, g, m, v, lr in zip(params, grads, state.m, state.v, lrs):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


class Adam:
    """Adam over named parameter groups with per-group learning rates."""

    def __init__(self, groups: list[tuple[list[ad.Tensor], float]], beta1=0.9, beta2=0.99,
                 eps=1e-15):
        self.params = [p for ps, _ in groups for p in ps]
        self.lrs = [lr for ps, lr in groups for _ in ps]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimState([np.zeros_like(p.data) for p in self.params],
                                [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lrs,
                  self.beta1, self.beta2, self.eps)


def _param_groups(nets, config: TrainConfig):
    tables, weights = [], []
    for net in nets:
        for name, p in net.params().items():
            (tables if name == "table" else weights).append(p)
    return [(tables, config.grid_learning_rate), (weights, config.learning_rate)]


@dataclass
class RaySet:
    """All training rays of a split, clipped to the scene box."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)


def collect_rays(frames, box) -> RaySet:
    if not frames:
        raise ValueError("no frames to train on")
    parts = []
    for f in frames:
        if f.image is None:
            raise ValueError(f"frame {f.name!r} has no image")
        rays = clip_to_box(generate_rays(f), box)
        parts.append((rays.origins, rays.directions, rays.near, rays.far,
                      f.image.reshape(-1, 3)))
    return RaySet(*(np.concatenate(x) for x in zip(*parts)))


@dataclass
class EpochRecord:
    epoch: int
    wall_seconds: float
    train_loss: float
    extra: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    bundle: FieldBundle
    history: list
    steps: int = 0


EpochHook = Callable[[int, FieldBundle], dict]


def fit(bundle: FieldBundle, trainable: list, rays: RaySet, render_mode: str,
        config: TrainConfig, white_background: bool, epoch_hook: EpochHook | None = None,
        out_dir=None, which: str = "bg") -> TrainResult:
    """Optimise ``trainable`` networks so renders of ``rays`` match their colours.

    One epoch is one pass over a fresh permutation of every ray.
    """
    opt = Adam(_param_groups(trainable, config), config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    shuffle = substream(config.seed, f"shuffle/{config.mode}")
    sampling = substream(config.seed, f"samples/{config.mode}")
    history = []
    if epoch_hook is not None:
        history.append(EpochRecord(0, 0.0, float("nan"), epoch_hook(0, bundle)))
    start = time.perf_counter()
    steps = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(rays))
        total, count = 0.0, 0
        for s in range(0, len(order), config.rays_per_batch):
            idx = order[s:s + config.rays_per_batch]
            batch = Rays(rays.origins[idx], rays.directions[idx], rays.near[idx], rays.far[idx])
            opt.zero_grad()
            out = render_rays(bundle, batch, render_mode, config.n_samples, stratified=True,
                              rng=sampling, white_background=white_background, which=which)
            loss = photometric_loss(out.rgb, rays.colors[idx])
            if loss.requires_grad:
                ad.backward(loss)
                opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
            steps += 1
        wall = time.perf_counter() - start
        extra = epoch_hook(epoch, bundle) if epoch_hook is not None else {}
        rec = EpochRecord(epoch, wall, total / count, extra)
        history.append(rec)
        log.info("%s epoch %d loss %.5f (%.1fs) %s", config.mode, epoch, rec.train_loss, wall,
                 extra)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_bundle(Path(out_dir) / f"epoch_{epoch:04d}", bundle, {"epoch": epoch})
    return TrainResult(bundle, history, steps)


def write_history(path, history: list) -> None:
    keys = sorted({k for rec in history for k in rec.extra})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_seconds", "train_loss", *keys])
        for rec in history:
            w.writerow([rec.epoch, f"{rec.wall_seconds:.3f}", f"{rec.train_loss:.8g}",
                        *(f"{rec.extra[k]:.8g}" if k in rec.extra else "" for k in keys)])


def new_field(config: FieldConfig | None, seed: int, role: str) -> RadianceField:
    return RadianceField(config, substream(seed, f"init/{role}"))


def train_background(dataset: Dataset, config: TrainConfig, field_config: FieldConfig | None = None,
                     epoch_hook: EpochHook | None = None, out_dir=None) -> TrainResult:
    """Stage one: fit a field to the background split."""
    if not dataset.background:
        raise ValueError("dataset has no background frames")
    config = _with_mode(config, "background")
    bg = new_field(field_config, config.seed, "bg")
    bundle = FieldBundle(bg=bg)
    rays = collect_rays(dataset.background, dataset.scene_box)
    return fit(bundle, [bg], rays, "single", config, dataset.white_background, epoch_hook, out_dir)


def train_scratch(dataset: Dataset, config: TrainConfig, field_config: FieldConfig | None = None,
                  epoch_hook: EpochHook | None = None, out_dir=None) -> TrainResult:
    """Single-field baseline fitted to the evaluation split only."""
    if not dataset.eval:
        raise ValueError("dataset has no evaluation frames")
    config = _with_mode(config, "scratch")
    fld = new_field(field_config, config.seed, "scratch")
    bundle = FieldBundle(bg=fld)
    rays = collect_rays(dataset.eval, dataset.scene_box)
    return fit(bundle, [fld], rays, "single", config, dataset.white_background, epoch_hook, out_dir)


def train_residual(dataset: Dataset, background: RadianceField | None, config: TrainConfig,
                   field_config: FieldConfig | None = None, mix_config: MixConfig | None = None,
                   epoch_hook: EpochHook | None = None, out_dir=None) -> TrainResult:
    """Stage two: freeze ``background`` and fit residual (+ Mixnet) to the
    evaluation split. ``config.mode`` picks learned blending or plain sums."""
    if background is None:
        raise ValueError("residual training needs a trained background field")
    if not dataset.eval:
        raise ValueError("dataset has no evaluation frames")
    mode = config.mode if config.mode in ("residual", "naive_residual") else "residual"
    config = _with_mode(config, mode)
    background.freeze()
    before = background.digest()
    field_config = field_config or background.config
    res = new_field(field_config, config.seed, "res")
    nets = [res]
    mix = None
    if mode == "residual":
        mix_config = mix_config or MixConfig(grid=field_config.grid)
        mix = MixField(mix_config, substream(config.seed, "init/mix"))
        nets.append(mix)
    bundle = FieldBundle(bg=background, res=res, mix=mix)
    rays = collect_rays(dataset.eval, dataset.scene_box)
    render_mode = "residual" if mode == "residual" else "naive"
    result = fit(bundle, nets, rays, render_mode, config, dataset.white_background, epoch_hook,
                 out_dir)
    if background.digest() != before:
        raise RuntimeError("background parameters changed during residual training")
    return result


def _with_mode(config: TrainConfig, mode: str) -> TrainConfig:
    d = asdict(config)
    d["mode"] = mode
    return TrainConfig(**d)
