"""Radiance fields, the blending Mixnet, and the two ways of merging a frozen
background field with a residual field."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .encodings import (FreqEncodingConfig, HashGridConfig, Located, freq_encode,
                        init_table, interpolate, locate)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: float = 0.0):
        bound = np.sqrt(6.0 / fan_in)
        self.weight = ad.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        self.bias = ad.Tensor(np.full((fan_out,), bias), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


def _mlp(x: ad.Tensor, layers: list[Linear]) -> ad.Tensor:
    for layer in layers:
        x = ad.relu(layer(x))
    return x


@dataclass
class FieldConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    direction: FreqEncodingConfig = field(default_factory=FreqEncodingConfig)
    hidden_layers: int = 2
    hidden_width: int = 64

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(),
                "direction": {"num_frequencies": self.direction.num_frequencies,
                              "include_input": self.direction.include_input},
                "hidden_layers": self.hidden_layers, "hidden_width": self.hidden_width}

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        return cls(HashGridConfig.from_dict(d["grid"]), FreqEncodingConfig(**d["direction"]),
                   d["hidden_layers"], d["hidden_width"])


@dataclass
class MixConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    hidden_layers: int = 2
    hidden_width: int = 32
    bias_init: float = 0.0

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "hidden_layers": self.hidden_layers,
                "hidden_width": self.hidden_width, "bias_init": self.bias_init}

    @classmethod
    def from_dict(cls, d: dict) -> "MixConfig":
        return cls(HashGridConfig.from_dict(d["grid"]), d["hidden_layers"], d["hidden_width"],
                   d.get("bias_init", 0.0))


class _Module:
    """Named parameter bookkeeping shared by both network kinds."""

    frozen = False

    def params(self) -> dict[str, ad.Tensor]:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) ^ set(state)
        if missing:
            raise checkpoint.CheckpointError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in params.items():
            if tuple(state[k].shape) != p.shape:
                raise checkpoint.CheckpointError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        for p in self.params().values():
            p.requires_grad = not frozen
            p.grad = None

    def digest(self) -> str:
        return checkpoint.digest(self.state_dict())


@dataclass
class FieldOutput:
    """Pre-activation colour ``c_prime`` (P, 3) and density ``sigma`` (P,)."""

    c_prime: ad.Tensor
    sigma: ad.Tensor


class RadianceField(_Module):
    def __init__(self, config: FieldConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or FieldConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = self.config
        self.table = ad.Tensor(init_table(cfg.grid, rng), requires_grad=True)
        widths = [cfg.grid.output_dim] + [cfg.hidden_width] * cfg.hidden_layers
        self.trunk = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.density_head = Linear(widths[-1], 1, rng)
        self.color_head = Linear(widths[-1] + cfg.direction.output_dim, 3, rng)

    def params(self) -> dict[str, ad.Tensor]:
        out = {"table": self.table}
        for i, layer in enumerate(self.trunk):
            out[f"trunk.{i}.weight"] = layer.weight
            out[f"trunk.{i}.bias"] = layer.bias
        for name, layer in (("density_head", self.density_head), ("color_head", self.color_head)):
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out


class MixField(_Module):
    def __init__(self, config: MixConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or MixConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = self.config
        self.table = ad.Tensor(init_table(cfg.grid, rng), requires_grad=True)
        widths = [cfg.grid.output_dim] + [cfg.hidden_width] * cfg.hidden_layers
        self.trunk = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.head = Linear(widths[-1], 1, rng, bias=cfg.bias_init)

    def params(self) -> dict[str, ad.Tensor]:
        out = {"table": self.table}
        for i, layer in enumerate(self.trunk):
            out[f"trunk.{i}.weight"] = layer.weight
            out[f"trunk.{i}.bias"] = layer.bias
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 3), x.ndim == 1


def eval_field(fld: RadianceField, pos, direction, located: Located | None = None,
               dir_features: np.ndarray | None = None) -> FieldOutput:
    """Density and pre-activation colour at positions ``pos`` seen along ``direction``.

    ``direction`` (or precomputed ``dir_features``) may have one row per point
    or one row per ray, in which case each row covers ``P // R`` consecutive
    points. ``located`` lets fields on the same grid share corner lookups.
    Density is ``softplus`` of a head that sees position features only.
    """
    pos, single = _batch(pos)
    if located is None:
        located = locate(pos, fld.config.grid)
    if dir_features is None:
        d, _ = _batch(direction)
        dir_features = freq_encode(d, fld.config.direction)
    n, k = len(pos), len(dir_features)
    if n % k:
        raise ad.DimensionError(f"{k} direction rows cannot cover {n} points")
    feats = _mlp(interpolate(fld.table, located), fld.trunk)
    sigma = ad.softplus(fld.density_head(feats)).reshape(-1)
    # the colour head is linear in [feats, dir_features]; split it so the
    # direction half runs once per ray instead of once per sample
    width = feats.shape[1]
    w = fld.color_head.weight
    from_pos = ad.matmul(feats, w[:width])
    from_dir = ad.add(ad.matmul(ad.Tensor(dir_features), w[width:]), fld.color_head.bias)
    if k == n:
        c_prime = ad.add(from_pos, from_dir)
    else:
        c_prime = ad.add(from_pos.reshape(k, n // k, 3), from_dir.reshape(k, 1, 3)).reshape(n, 3)
    if single:
        return FieldOutput(c_prime.reshape(3), sigma.reshape(()))
    return FieldOutput(c_prime, sigma)


def mix_logit(mix: MixField, pos, located: Located | None = None) -> ad.Tensor:
    pos, single = _batch(pos)
    if located is None:
        located = locate(pos, mix.config.grid)
    feats = _mlp(interpolate(mix.table, located), mix.trunk)
    logit = mix.head(feats).reshape(-1)
    return logit.reshape(()) if single else logit


def eval_mix(mix: MixField, pos, located: Located | None = None) -> ad.Tensor:
    """Blend weight beta = S(logit) in (0, 1) from position only."""
    return ad.sigmoid(mix_logit(mix, pos, located))


def compose_residual(bg: FieldOutput, res: FieldOutput, beta) -> tuple[ad.Tensor, ad.Tensor]:
    """Blend densities linearly and pre-activation colours before the sigmoid.

    Returns ``(sigma, color)`` with ``sigma = (1-b) sigma_bg + b sigma_res`` and
    ``color = S((1-b) c'_bg + b c'_res)``.
    """
    beta = ad.as_tensor(beta)
    keep = ad.subtract(1.0, beta)
    sigma = ad.add(ad.multiply(keep, bg.sigma), ad.multiply(beta, res.sigma))
    b3 = beta.reshape(beta.shape + (1,)) if beta.ndim else beta
    k3 = keep.reshape(keep.shape + (1,)) if keep.ndim else keep
    color = ad.sigmoid(ad.add(ad.multiply(k3, bg.c_prime), ad.multiply(b3, res.c_prime)))
    return sigma, color


def compose_naive(bg: FieldOutput, res: FieldOutput) -> tuple[ad.Tensor, ad.Tensor]:
    """Sum densities and pre-activation colours (no learned blending)."""
    return ad.add(bg.sigma, res.sigma), ad.sigmoid(ad.add(bg.c_prime, res.c_prime))


def field_output(c_prime, sigma) -> FieldOutput:
    return FieldOutput(ad.as_tensor(c_prime), ad.as_tensor(sigma))


@dataclass
class FieldBundle:
    """Background, residual and mix networks; any may be absent."""

    bg: RadianceField | None = None
    res: RadianceField | None = None
    mix: MixField | None = None

    def networks(self) -> dict[str, _Module]:
        return {k: v for k, v in (("bg", self.bg), ("res", self.res), ("mix", self.mix))
                if v is not None}


def save_field(path, fld: _Module, meta: dict | None = None) -> None:
    kind = "mix" if isinstance(fld, MixField) else "radiance"
    header = {"kind": kind, "config": fld.config.to_dict(), **(meta or {})}
    checkpoint.save(path, fld.state_dict(), header)


def load_field(path) -> _Module:
    state, meta = checkpoint.load(path)
    if meta.get("kind") == "mix":
        fld = MixField(MixConfig.from_dict(meta["config"]))
    else:
        fld = RadianceField(FieldConfig.from_dict(meta["config"]))
    fld.load_state_dict(state)
    return fld


def save_bundle(directory, bundle: FieldBundle, meta: dict | None = None) -> Path:
    """Write one checkpoint per network plus ``bundle.json`` naming them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"networks": {}, "meta": meta or {}}
    for name, net in bundle.networks().items():
        fname = f"{name}.ckpt"
        save_field(directory / fname, net)
        manifest["networks"][name] = {"checkpoint": fname, "config": net.config.to_dict()}
    path = directory / "bundle.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_bundle(path) -> FieldBundle:
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    manifest = json.loads(path.read_text())
    nets = {name: load_field(path.parent / entry["checkpoint"])
            for name, entry in manifest["networks"].items()}
    return FieldBundle(nets.get("bg"), nets.get("res"), nets.get("mix"))
