"""Shared builders for the test suite."""

import numpy as np

from residual_nerf.encodings import HashGridConfig
from residual_nerf.fields import FieldBundle, FieldConfig, MixConfig, MixField, RadianceField
from residual_nerf.renderer import CameraFrame
from residual_nerf.scenes import look_at

BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def grid(levels=2, res=4, table=2 ** 8, bounds=BOX):
    return HashGridConfig(levels=levels, base_resolution=res, table_size=table, bounds=bounds)


def small_field(seed=0, width=8, bounds=BOX, noisy=True):
    fld = RadianceField(FieldConfig(grid=grid(bounds=bounds), hidden_width=width),
                        np.random.default_rng(seed))
    if noisy:
        fld.table.data[:] = np.random.default_rng(seed + 100).normal(size=fld.table.shape)
    return fld


def small_mix(seed=0, bias=0.0, bounds=BOX):
    return MixField(MixConfig(grid=grid(bounds=bounds), hidden_width=8, bias_init=bias),
                    np.random.default_rng(seed))


def constant_field(sigma: float, color_logit=(0.0, 0.0, 0.0), bounds=BOX) -> RadianceField:
    """Field with the same density and colour everywhere."""
    fld = small_field(bounds=bounds, noisy=False)
    for p in fld.params().values():
        p.data[:] = 0
    fld.density_head.bias.data[:] = (sigma + np.log(-np.expm1(-sigma))
                                       if sigma > 0 else -100.0)
    fld.color_head.bias.data[:] = color_logit
    return fld


def pinned_mix(logit: float, bounds=BOX) -> MixField:
    mix = small_mix(bounds=bounds)
    mix.head.weight.data[:] = 0
    mix.head.bias.data[:] = logit
    return mix


def residual_bundle(seed=0, bounds=BOX) -> FieldBundle:
    return FieldBundle(small_field(seed, bounds=bounds), small_field(seed + 1, bounds=bounds),
                       small_mix(seed + 2, bounds=bounds))


def frame_looking_at_origin(position=(0.0, -2.5, 1.5), size=8, fov=0.8):
    return CameraFrame(look_at(position), fov, size, size)


def tiny_dataset(size=16, counts=(2, 2), seed=0, scene="A"):
    from residual_nerf.scenes import builtin_scene, generate_dataset

    bg, ev = builtin_scene(scene)
    return generate_dataset(bg, ev, counts, seed=seed, width=size, height=size, radius=2.6)


def field_config_for(box, width=16):
    return FieldConfig(grid=grid(levels=4, res=8, table=2 ** 10, bounds=box), hidden_width=width)


def mix_config_for(box):
    return MixConfig(grid=grid(levels=2, res=4, table=2 ** 8, bounds=box), hidden_width=8)


# acceptance lines, echoed in the terminal summary by conftest
ACCEPTANCE: list = []


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
