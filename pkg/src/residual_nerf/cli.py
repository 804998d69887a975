"""Command-line entry points: generate, train-background, train-residual,
render-depth, eval, curve and study.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
``RESIDUAL_NERF_THREADS`` caps the BLAS/numba thread pools.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("RESIDUAL_NERF_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import json
import logging
import re
import sys
import dataclasses
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError
from .encodings import FreqEncodingConfig, HashGridConfig
from .evaluation import (EvaluationError, as_crop, epoch_curve, evaluate_depth,
                         write_error_heatmap)
from .fields import FieldBundle, FieldConfig, MixConfig, load_bundle, save_bundle
from .imaging import read_pfm, write_depth_png16, write_pfm, write_png_rgb
from .renderer import render_frame
from .scenes import BUILTIN_SCENES, DatasetError, builtin_scene, generate_dataset, load_dataset
from .trainer import (TrainConfig, train_background, train_residual, train_scratch,
                      write_history)

log = logging.getLogger("residual_nerf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """One JSON document describing a run; command-line flags override it."""

    dataset: str | None = None
    out: str | None = None
    seed: int = 0
    m: float = 3.0
    n_samples: int = 128
    field: dict = dataclasses.field(default_factory=dict)
    mix: dict = dataclasses.field(default_factory=dict)
    background: dict = dataclasses.field(default_factory=dict)
    residual: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.m < 0:
            raise ConfigError(f"m must be >= 0, got {self.m}")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    def field_config(self, box) -> FieldConfig:
        d = dict(self.field)
        grid = HashGridConfig.from_dict({"bounds": box, **d.pop("grid", {})})
        direction = FreqEncodingConfig(**d.pop("direction", {}))
        return FieldConfig(grid, direction, **d)

    def mix_config(self, box) -> MixConfig:
        d = dict(self.mix)
        grid = HashGridConfig.from_dict({"bounds": box, **d.pop("grid", self.field.get("grid", {}))})
        return MixConfig(grid, **d)

    def train_config(self, stage: str, **overrides) -> TrainConfig:
        d = {"seed": self.seed, "n_samples": self.n_samples, **getattr(self, stage)}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**d)


def load_config(args) -> tuple[ExperimentConfig, bytes | None]:
    """Read ``--config`` (if any) and apply flag overrides."""
    raw = None
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = path.read_bytes()
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key in ("dataset", "out", "seed", "m", "n_samples"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    try:
        return ExperimentConfig.from_dict(data), raw
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _prepare_out(cfg: ExperimentConfig, raw: bytes | None) -> Path:
    if not cfg.out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if raw is not None:
        (out / "config.json").write_bytes(raw)
    (out / "resolved_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    return out


def _dataset(cfg: ExperimentConfig):
    if not cfg.dataset:
        raise ConfigError("no dataset: pass --dataset or set 'dataset' in the config")
    if not Path(cfg.dataset).exists():
        raise ConfigError(f"dataset path does not exist: {cfg.dataset}")
    return load_dataset(cfg.dataset)


# commands

def cmd_generate(args) -> int:
    name = args.scene.upper()
    if name not in BUILTIN_SCENES:
        print(f"unknown scene {args.scene!r}; valid scenes: {', '.join(BUILTIN_SCENES)}",
              file=sys.stderr)
        return EXIT_CONFIG
    spec_bg, spec_eval = builtin_scene(name)
    ds = generate_dataset(spec_bg, spec_eval, tuple(args.counts), args.seed, args.out,
                          args.size[0], args.size[1], radius=args.radius, name=name)
    print(f"wrote scene {name}: {len(ds.background)} background, {len(ds.eval)} eval frames "
          f"to {args.out}")
    return EXIT_OK


def cmd_train_background(args) -> int:
    cfg, raw = load_config(args)
    ds = _dataset(cfg)
    out = _prepare_out(cfg, raw)
    tc = cfg.train_config("background", epochs=args.epochs, checkpoint_every=args.checkpoint_every)
    result = train_background(ds, tc, cfg.field_config(ds.scene_box), out_dir=out)
    save_bundle(out / "final", result.bundle, {"epoch": tc.epochs, "stage": "background"})
    write_history(out / "history.csv", result.history)
    print(f"background field saved to {out / 'final'}")
    return EXIT_OK


def cmd_train_residual(args) -> int:
    cfg, raw = load_config(args)
    if args.mode != "scratch" and not args.background:
        raise ConfigError("residual training needs --background (a background checkpoint)")
    ds = _dataset(cfg)
    out = _prepare_out(cfg, raw)
    mode = {"residual": "residual", "naive": "naive_residual", "scratch": "scratch"}[args.mode]
    tc = cfg.train_config("residual", epochs=args.epochs, checkpoint_every=args.checkpoint_every,
                          mode=mode)
    fc = cfg.field_config(ds.scene_box)
    if args.mode == "scratch":
        result = train_scratch(ds, tc, fc, out_dir=out)
    else:
        path = Path(args.background)
        if not path.exists():
            raise ConfigError(f"background checkpoint not found: {path}")
        bg = load_bundle(path).bg
        if bg is None:
            raise CheckpointError(f"{path} holds no background field")
        result = train_residual(ds, bg, tc, bg.config, cfg.mix_config(ds.scene_box), out_dir=out)
    save_bundle(out / "final", result.bundle, {"epoch": tc.epochs, "stage": args.mode})
    write_history(out / "history.csv", result.history)
    print(f"{args.mode} bundle saved to {out / 'final'}")
    return EXIT_OK


def bundle_mode(bundle: FieldBundle) -> str:
    if bundle.res is None:
        return "single"
    return "residual" if bundle.mix is not None else "naive"


def _check_box(bundle: FieldBundle, box) -> None:
    for name, net in bundle.networks().items():
        if not np.allclose(net.config.grid.bounds, box):
            raise CheckpointError(f"checkpoint {name} was trained on box {net.config.grid.bounds}, "
                                  f"dataset box is {tuple(map(tuple, box))}")


def depth_stem(frame_name: str, method: str, m: float) -> str:
    base = frame_name.replace("/", "_")
    return f"{base}_{method}" if method == "expected" else f"{base}_{method}_m{m:g}"


def cmd_render_depth(args) -> int:
    cfg, raw = load_config(args)
    ds = _dataset(cfg)
    out = _prepare_out(cfg, raw)
    bundle = load_bundle(args.checkpoint)
    _check_box(bundle, ds.scene_box)
    mode = bundle_mode(bundle)
    frames = ds.split(args.split)
    if args.limit:
        frames = frames[:args.limit]
    m = cfg.m
    index = []
    for frame in frames:
        r = render_frame(bundle, frame, ds.scene_box, mode, cfg.n_samples, m, ds.white_background)
        if args.method == "expected":
            depth, valid = r.expected, np.ones_like(r.threshold.valid)
        else:
            depth, valid = r.threshold.depth, r.threshold.valid
        stem = depth_stem(frame.name, args.method, m)
        write_pfm(out / f"{stem}.pfm", depth.astype(np.float32))
        write_depth_png16(out / f"{stem}.png", depth, crop=frame.crop)
        write_png_rgb(out / f"{stem}_valid.png", np.repeat(valid[..., None], 3, axis=2).astype(float))
        if args.rgb:
            write_png_rgb(out / f"{frame.name.replace('/', '_')}_rgb.png", r.rgb)
        index.append({"frame": frame.name, "file": f"{stem}.pfm", "crop": frame.crop})
    manifest = {"method": args.method, "m": None if args.method == "expected" else m,
                "mode": mode, "split": args.split, "frames": index}
    (out / "depth_manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"rendered {len(index)} depth maps ({args.method}, mode {mode}) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    manifest_path = pred_dir / "depth_manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"no depth_manifest.json in {pred_dir}")
    manifest = json.loads(manifest_path.read_text())
    ds = load_dataset(args.dataset)
    by_name = {f.name: f for f in ds.split(manifest["split"])}
    preds, gts, crops, names = [], [], [], []
    for entry in manifest["frames"]:
        frame = by_name.get(entry["frame"])
        if frame is None:
            raise DatasetError(f"frame {entry['frame']!r} not in the dataset")
        if frame.gt_depth is None:
            print(f"notice: {frame.name} has no ground-truth depth; outputs are qualitative only",
                  file=sys.stderr)
            continue
        preds.append(read_pfm(pred_dir / entry["file"]))
        gts.append(frame.gt_depth)
        crops.append(as_crop(frame.crop if args.crops == "object" else None,
                             frame.width, frame.height))
        names.append(frame.name)
    if not preds:
        print("notice: no ground-truth depth available; skipping metrics (qualitative only)")
        return EXIT_OK
    report = evaluate_depth(preds, gts, crops, manifest["method"])
    for fm in report.frames:
        fm.name = names[int(fm.name)]
    out = Path(args.out) if args.out else pred_dir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2))
    if args.heatmaps:
        for name, p, g in zip(names, preds, gts):
            write_error_heatmap(out.parent / f"{name.replace('/', '_')}_error.png", p, g)
    print(f"{manifest['method']}: RMSE {report.rmse:.5f}  MAE {report.mae:.5f}  "
          f"pixels {report.n}  holes {report.hole_fraction:.3f}")
    if report.mae > report.rmse + 1e-12:
        print("invariant violated: MAE exceeds RMSE", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


_EPOCH_DIR = re.compile(r"epoch_(\d+)$")


def cmd_curve(args) -> int:
    cfg, raw = load_config(args)
    ds = _dataset(cfg)
    if args.checkpoints:
        series = []
        for item in args.checkpoints:
            epoch, _, path = item.partition(":")
            if not path or not epoch.isdigit():
                raise ConfigError(f"checkpoint spec must be EPOCH:PATH, got {item!r}")
            series.append((int(epoch), path))
    else:
        run = Path(args.run)
        found = [(int(m.group(1)), p) for p in run.iterdir() if (m := _EPOCH_DIR.search(p.name))]
        series = sorted(found)
        if not series:
            raise DatasetError(f"no epoch_NNNN checkpoints under {run}")
    frames = [f for f in ds.eval if f.gt_depth is not None and f.crop is not None]
    method = args.method
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = epoch_curve(series, frames, ds.scene_box, method, cfg.m, cfg.n_samples,
                       ds.white_background, out_csv=out)
    for r in rows:
        print(f"epoch {r['epoch']:4d}  RMSE {r['rmse']:.5f}  MAE {r['mae']:.5f}")
    return EXIT_OK


def cmd_study(args) -> int:
    from .pipeline import StudyConfig, run_experiment

    data = json.loads(Path(args.config).read_text()) if args.config else {}
    data["scene"] = args.scene.upper()
    if args.variants:
        data["variants"] = args.variants
    try:
        cfg = StudyConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    out = Path(args.out)
    for seed in args.seeds:
        res = run_experiment(cfg, seed, out / f"seed_{seed}")
        finals = {k: round(res.final(k), 5) for k in res.curves}
        print(f"scene {cfg.scene} seed {seed}: final RMSE {finals}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="residual-nerf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, out=True):
        sp.add_argument("--config", help="JSON experiment config")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory (overrides config)")
        if out:
            sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n-samples", dest="n_samples", type=int)

    g = sub.add_parser("generate", help="render a built-in synthetic scene")
    g.add_argument("--scene", required=True, help=f"one of {', '.join(BUILTIN_SCENES)}")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--counts", type=int, nargs=2, default=(100, 50),
                   metavar=("BACKGROUND", "EVAL"))
    g.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    g.add_argument("--radius", type=float, default=3.0)
    g.set_defaults(func=cmd_generate)

    tb = sub.add_parser("train-background", help="stage one: fit the background field")
    common(tb)
    tb.add_argument("--epochs", type=int)
    tb.add_argument("--checkpoint-every", type=int)
    tb.set_defaults(func=cmd_train_background)

    tr = sub.add_parser("train-residual", help="stage two: residual field and Mixnet")
    common(tr)
    tr.add_argument("--background", help="background checkpoint directory")
    tr.add_argument("--mode", choices=("residual", "naive", "scratch"), default="residual")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--checkpoint-every", type=int)
    tr.set_defaults(func=cmd_train_residual)

    rd = sub.add_parser("render-depth", help="render depth maps for dataset poses")
    common(rd)
    rd.add_argument("--checkpoint", required=True, help="bundle directory")
    rd.add_argument("--split", choices=("background", "eval"), default="eval")
    rd.add_argument("--method", choices=("expected", "threshold"), default="threshold")
    rd.add_argument("--m", type=float, help="density threshold (default 3.0)")
    rd.add_argument("--limit", type=int, default=0, help="render only the first N frames")
    rd.add_argument("--rgb", action="store_true", help="also write colour renders")
    rd.set_defaults(func=cmd_render_depth)

    ev = sub.add_parser("eval", help="score rendered depth against ground truth")
    ev.add_argument("--pred", required=True, help="render-depth output directory")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--crops", choices=("object", "full"), default="object")
    ev.add_argument("--out", help="report path (default PRED/report.json)")
    ev.add_argument("--heatmaps", action="store_true")
    ev.set_defaults(func=cmd_eval)

    cu = sub.add_parser("curve", help="metric per saved epoch checkpoint")
    common(cu, out=False)
    cu.add_argument("--run", help="training output directory holding epoch_NNNN/")
    cu.add_argument("--checkpoints", nargs="+", metavar="EPOCH:PATH")
    cu.add_argument("--method", choices=("nerf", "dexnerf", "residual", "naive"),
                    default="residual")
    cu.add_argument("--m", type=float)
    cu.add_argument("--out", required=True, help="CSV path")
    cu.set_defaults(func=cmd_curve)

    st = sub.add_parser("study", help="run the built-in comparison for one scene")
    st.add_argument("--scene", required=True)
    st.add_argument("--seeds", type=int, nargs="+", default=[0])
    st.add_argument("--variants", nargs="+", choices=("residual", "scratch", "naive"))
    st.add_argument("--config", help="JSON overrides for the study settings")
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "curve" and not (args.run or args.checkpoints):
        parser.error("curve needs --run or --checkpoints")
    try:
        return args.func(args)
    except ad.NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, EvaluationError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, TypeError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
