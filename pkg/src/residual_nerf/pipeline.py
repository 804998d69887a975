"""End-to-end experiment: generate a built-in scene, train the background,
then train the stage-two variants side by side and score them per epoch."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encodings import HashGridConfig
from .evaluation import evaluate_bundle, first_epoch_within
from .fields import FieldBundle, FieldConfig, MixConfig, save_bundle
from .scenes import builtin_scene, generate_dataset
from .trainer import TrainConfig, train_background, train_residual, train_scratch

log = logging.getLogger(__name__)

# stage-two variant -> (training mode, methods scored on its bundle)
VARIANTS = {
    "residual": ("residual", ("residual",)),
    "scratch": ("scratch", ("nerf", "dexnerf")),
    "naive": ("naive_residual", ("naive",)),
}


@dataclass
class StudyConfig:
    """Desk-scale settings; every field can be overridden from JSON."""

    scene: str = "A"
    width: int = 100
    height: int = 100
    n_background: int = 40
    n_eval: int = 10
    radius: float = 2.6
    bg_epochs: int = 3
    stage2_epochs: int = 16
    bg_rays_per_batch: int = 1024
    rays_per_batch: int = 4096  # stage two
    n_samples: int = 32
    eval_samples: int = 64
    hidden_width: int = 32
    mix_width: int = 16
    learning_rate: float = 5e-3
    grid_learning_rate: float = 3e-2
    m: float = 3.0
    mix_bias: float = 0.0
    grid: dict = field(default_factory=dict)
    variants: tuple = ("residual", "scratch")

    def __post_init__(self):
        self.variants = tuple(self.variants)
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}; expected {sorted(VARIANTS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown experiment keys {sorted(extra)}")
        return cls(**d)

    def train_config(self, seed: int, epochs: int, rays_per_batch: int) -> TrainConfig:
        return TrainConfig(epochs=epochs, rays_per_batch=rays_per_batch,
                           learning_rate=self.learning_rate,
                           grid_learning_rate=self.grid_learning_rate, seed=seed,
                           n_samples=self.n_samples)


@dataclass
class StudyResult:
    scene: str
    seed: int
    # method -> [{"epoch", "rmse", "mae"}, ...] starting at epoch 1
    curves: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def final(self, method: str, key: str = "rmse") -> float:
        return self.curves[method][-1][key]

    def settle_epoch(self, method: str, factor: float = 1.5) -> int:
        return first_epoch_within(self.curves[method], factor)

    def to_dict(self) -> dict:
        return asdict(self)


def _background_key(config: StudyConfig, spec_bg, seed: int) -> str:
    keys = ("n_background", "width", "height", "radius", "bg_epochs", "bg_rays_per_batch",
            "n_samples", "hidden_width", "learning_rate", "grid_learning_rate", "grid")
    return json.dumps({"spec": spec_bg.to_dict(), "seed": seed,
                       **{k: getattr(config, k) for k in keys}}, sort_keys=True)


def run_experiment(config: StudyConfig, seed: int, out_dir=None,
                   background_cache: dict | None = None) -> StudyResult:
    """Train every requested stage-two variant on one scene and seed.

    Scenes that share a background spec can share one trained background
    field through ``background_cache`` (keyed on everything that shapes it).
    """
    out = Path(out_dir) if out_dir is not None else None
    spec_bg, spec_eval = builtin_scene(config.scene)
    t0 = time.perf_counter()
    ds = generate_dataset(spec_bg, spec_eval, (config.n_background, config.n_eval), seed,
                          None if out is None else out / "data", config.width, config.height,
                          radius=config.radius, name=config.scene)
    result = StudyResult(config.scene, seed)
    result.seconds["generate"] = time.perf_counter() - t0
    grid = HashGridConfig(**{**config.grid, "bounds": ds.scene_box})
    fc = FieldConfig(grid=grid, hidden_width=config.hidden_width)
    mc = MixConfig(grid=grid, hidden_width=config.mix_width, bias_init=config.mix_bias)

    t0 = time.perf_counter()
    key = _background_key(config, spec_bg, seed)
    if background_cache is not None and key in background_cache:
        bg = background_cache[key]
    else:
        tc = config.train_config(seed, config.bg_epochs, config.bg_rays_per_batch)
        bg = train_background(ds, tc, fc).bundle.bg
        if background_cache is not None:
            background_cache[key] = bg
    result.seconds["background"] = time.perf_counter() - t0
    if out is not None:
        save_bundle(out / "background", FieldBundle(bg=bg))

    frames = [f for f in ds.eval if f.crop is not None and f.gt_depth is not None]
    for variant in config.variants:
        mode, methods = VARIANTS[variant]
        for method in methods:
            result.curves[method] = []

        def hook(epoch, bundle, methods=methods):
            if epoch == 0:
                return {}
            scores = {}
            for method in methods:
                rep = evaluate_bundle(bundle, frames, ds.scene_box, method, config.m,
                                      config.eval_samples, ds.white_background)
                result.curves[method].append({"epoch": epoch, "rmse": rep.rmse, "mae": rep.mae})
                scores[f"{method}_rmse"] = rep.rmse
            return scores

        tc = config.train_config(seed, config.stage2_epochs, config.rays_per_batch)
        t0 = time.perf_counter()
        if variant == "scratch":
            trained = train_scratch(ds, tc, fc, epoch_hook=hook)
        else:
            tc.mode = mode
            trained = train_residual(ds, bg, tc, fc, mc, epoch_hook=hook)
        result.seconds[variant] = time.perf_counter() - t0
        if out is not None:
            save_bundle(out / variant, trained.bundle)
        log.info("scene %s seed %d %s: %s", config.scene, seed, variant,
                 {m: round(result.final(m), 4) for m in methods})
    if out is not None:
        (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2))
    return result
