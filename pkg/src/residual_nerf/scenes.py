"""Analytic tabletop scenes, a small vectorized raytracer, and dataset IO.

The raytracer never bends rays: a transmissive surface tints and attenuates
the light arriving from behind it and adds a Blinn-Phong highlight, which is
enough to make glass-like objects visible and view dependent.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from . import imaging
from .renderer import CameraFrame, generate_rays

EPS = 1e-6


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    kind: str = "opaque"  # "opaque" | "transmissive"
    attenuation: float = 1.0
    specular: float = 0.0
    shininess: float = 40.0

    def __post_init__(self):
        if self.kind not in ("opaque", "transmissive"):
            raise ValueError(f"unknown material kind {self.kind!r}")
        if self.kind == "transmissive" and not 0 < self.attenuation <= 1:
            raise ValueError("transmissive attenuation must lie in (0, 1]")

    @property
    def transmissive(self) -> bool:
        return self.kind == "transmissive"


OPAQUE = Material()


@dataclass(frozen=True)
class Plane:
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    half_size: float | None = None  # square extent around ``point``; None = infinite
    albedo: tuple = (0.7, 0.7, 0.7)
    albedo2: tuple | None = None  # second checker colour
    checker: float = 0.0  # checker cell size; 0 disables texture
    material: Material = OPAQUE


@dataclass(frozen=True)
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.5, 0.5, 0.5)
    albedo: tuple = (0.7, 0.7, 0.7)
    albedo2: tuple | None = None
    checker: float = 0.0
    material: Material = OPAQUE


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    albedo: tuple = (0.7, 0.7, 0.7)
    albedo2: tuple | None = None
    checker: float = 0.0
    material: Material = OPAQUE


@dataclass(frozen=True)
class Capsule:
    """Vertical capsule: segment from ``base`` up by ``height``, swept by ``radius``."""

    base: tuple = (0.0, 0.0, 0.0)
    height: float = 0.5
    radius: float = 0.1
    albedo: tuple = (0.7, 0.7, 0.7)
    albedo2: tuple | None = None
    checker: float = 0.0
    material: Material = OPAQUE


Primitive = Union[Plane, Box, Sphere, Capsule]
_KINDS = {"plane": Plane, "box": Box, "sphere": Sphere, "capsule": Capsule}


@dataclass(frozen=True)
class Light:
    direction: tuple = (0.4, 0.3, 0.85)  # towards the light
    intensity: float = 0.8


@dataclass
class SceneSpec:
    primitives: list
    lights: list = field(default_factory=lambda: [Light()])
    background_color: tuple = (1.0, 1.0, 1.0)
    scene_box: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    ambient: float = 0.3

    def __post_init__(self):
        if not any(not p.material.transmissive for p in self.primitives):
            raise ValueError("a scene needs at least one opaque primitive")

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            d = asdict(p)
            d["kind"] = next(k for k, cls in _KINDS.items() if isinstance(p, cls))
            prims.append(d)
        return {"primitives": prims, "lights": [asdict(l) for l in self.lights],
                "background_color": list(self.background_color),
                "scene_box": [list(self.scene_box[0]), list(self.scene_box[1])],
                "ambient": self.ambient}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        def tup(x):
            return tuple(tup(v) for v in x) if isinstance(x, list) else x

        prims = []
        for p in d["primitives"]:
            p = dict(p)
            kind = _KINDS[p.pop("kind")]
            p["material"] = Material(**p["material"])
            prims.append(kind(**{k: tup(v) for k, v in p.items()}))
        return cls(prims, [Light(**{k: tup(v) for k, v in l.items()}) for l in d["lights"]],
                   tup(d["background_color"]), tup(d["scene_box"]), d["ambient"])


# intersections: each returns (t, normal) for the nearest hit with t > EPS

def _pick(t0, t1, ok0, ok1):
    t0 = np.where(ok0 & (t0 > EPS), t0, np.inf)
    t1 = np.where(ok1 & (t1 > EPS), t1, np.inf)
    return np.minimum(t0, t1)


def intersect_plane(p: Plane, o, d):
    n = np.asarray(p.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(p.point, dtype=np.float64)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - o) @ n) / denom
    ok = np.abs(denom) > 1e-12
    if p.half_size is not None:
        hit = o + np.where(np.isfinite(t), t, 0)[:, None] * d
        u, v = _plane_axes(n)
        rel = hit - p0
        ok &= (np.abs(rel @ u) <= p.half_size) & (np.abs(rel @ v) <= p.half_size)
    t = np.where(ok & (t > EPS), t, np.inf)
    normal = np.broadcast_to(n, o.shape).copy()
    # face the incoming ray so both sides shade
    normal[denom > 0] *= -1
    return t, normal


def _plane_axes(n):
    helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _sphere_roots(center, radius, o, d):
    oc = o - np.asarray(center, dtype=np.float64)
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0))
    return -b - sq, -b + sq, ok


def intersect_sphere(s: Sphere, o, d):
    t0, t1, ok = _sphere_roots(s.center, s.radius, o, d)
    t = _pick(t0, t1, ok, ok)
    hit = o + np.where(np.isfinite(t), t, 0)[:, None] * d
    return t, (hit - np.asarray(s.center)) / s.radius


def intersect_box(b: Box, o, d):
    c = np.asarray(b.center, dtype=np.float64)
    h = np.asarray(b.half_extents, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (c - h - o) * inv
        tb = (c + h - o) * inv
    lo = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf)
    hi = np.nan_to_num(np.maximum(ta, tb), nan=np.inf)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    ok = tmax >= np.maximum(tmin, 0)
    t = _pick(tmin, tmax, ok, ok)
    hit = o + np.where(np.isfinite(t), t, 0)[:, None] * d
    rel = (hit - c) / h
    axis = np.abs(rel).argmax(axis=1)
    normal = np.zeros_like(o)
    normal[np.arange(len(o)), axis] = np.sign(rel[np.arange(len(o)), axis])
    return t, normal


def intersect_capsule(cap: Capsule, o, d):
    a = np.asarray(cap.base, dtype=np.float64)
    top = a[2] + cap.height
    r = cap.radius
    # side: infinite vertical cylinder limited to the segment's z range
    ox, oy = o[:, 0] - a[0], o[:, 1] - a[1]
    dx, dy = d[:, 0], d[:, 1]
    qa = dx * dx + dy * dy
    qb = ox * dx + oy * dy
    qc = ox * ox + oy * oy - r * r
    disc = qb * qb - qa * qc
    okc = (disc >= 0) & (qa > 1e-12)
    sq = np.sqrt(np.where(okc, disc, 0))
    safe = np.where(qa > 1e-12, qa, 1.0)
    cands = []
    for t in ((-qb - sq) / safe, (-qb + sq) / safe):
        z = o[:, 2] + t * d[:, 2]
        cands.append(np.where(okc & (z >= a[2]) & (z <= top) & (t > EPS), t, np.inf))
    # end caps: hemispheres outside the segment
    for center, below in ((a, True), (a + [0, 0, cap.height], False)):
        t0, t1, ok = _sphere_roots(center, r, o, d)
        for t in (t0, t1):
            z = o[:, 2] + t * d[:, 2]
            side = (z <= center[2]) if below else (z >= center[2])
            cands.append(np.where(ok & side & (t > EPS), t, np.inf))
    t = np.min(np.stack(cands), axis=0)
    hit = o + np.where(np.isfinite(t), t, 0)[:, None] * d
    axis_z = np.clip(hit[:, 2], a[2], top)
    axis_pt = np.stack([np.full(len(o), a[0]), np.full(len(o), a[1]), axis_z], axis=1)
    normal = (hit - axis_pt) / r
    return t, normal


_INTERSECT = {Plane: intersect_plane, Sphere: intersect_sphere, Box: intersect_box,
              Capsule: intersect_capsule}


def intersect(prim: Primitive, o, d):
    return _INTERSECT[type(prim)](prim, o, d)


def _albedo(prim: Primitive, hit: np.ndarray) -> np.ndarray:
    base = np.broadcast_to(np.asarray(prim.albedo, dtype=np.float64), hit.shape)
    if not prim.checker or prim.albedo2 is None:
        return base
    cells = np.floor(hit / prim.checker + 1e-7).astype(np.int64).sum(axis=1)
    other = np.broadcast_to(np.asarray(prim.albedo2, dtype=np.float64), hit.shape)
    return np.where((cells % 2 == 0)[:, None], base, other)


@dataclass
class TraceResult:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), +inf on miss
    first_hit: np.ndarray  # (H, W) primitive index, -1 on miss


def trace_rays(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray, max_bounces: int = 8):
    """Shade rays; returns (rgb (R,3), first-hit distance (R,), first-hit index (R,))."""
    n = len(origins)
    o = np.array(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    rgb = np.zeros((n, 3))
    throughput = np.ones((n, 3))
    travelled = np.zeros(n)
    depth = np.full(n, np.inf)
    first = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    lights = [(np.asarray(l.direction, dtype=np.float64) / np.linalg.norm(l.direction),
               l.intensity) for l in spec.lights]
    bg = np.asarray(spec.background_color, dtype=np.float64)

    for bounce in range(max_bounces + 1):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        oo, dd = o[idx], d[idx]
        best_t = np.full(len(idx), np.inf)
        best_n = np.zeros((len(idx), 3))
        best_p = np.full(len(idx), -1, dtype=np.int64)
        for k, prim in enumerate(spec.primitives):
            t, nrm = intersect(prim, oo, dd)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_n[closer] = nrm[closer]
            best_p[closer] = k

        miss = ~np.isfinite(best_t)
        rgb[idx[miss]] += throughput[idx[miss]] * bg
        alive[idx[miss]] = False

        fresh = (bounce == 0) | (first[idx] < 0)
        new_first = ~miss & fresh
        depth[idx[new_first]] = travelled[idx[new_first]] + best_t[new_first]
        first[idx[new_first]] = best_p[new_first]

        for k, prim in enumerate(spec.primitives):
            sel = (best_p == k) & ~miss
            if not sel.any():
                continue
            rows = idx[sel]
            p = oo[sel] + best_t[sel, None] * dd[sel]
            nrm = best_n[sel]
            facing = np.einsum("ij,ij->i", nrm, dd[sel]) < 0
            mat = prim.material
            if not mat.transmissive:
                shade_n = np.where(facing[:, None], nrm, -nrm)
                light = np.full(len(rows), spec.ambient)
                for ldir, inten in lights:
                    light = light + inten * np.clip(shade_n @ ldir, 0, None)
                rgb[rows] += throughput[rows] * _albedo(prim, p) * light[:, None]
                alive[rows] = False
                continue
            spec_term = np.zeros(len(rows))
            for ldir, inten in lights:
                half = ldir - dd[sel]
                half /= np.linalg.norm(half, axis=1, keepdims=True)
                spec_term += inten * np.clip(np.einsum("ij,ij->i", nrm, half), 0, None) ** mat.shininess
            spec_term *= mat.specular * facing
            rgb[rows] += throughput[rows] * spec_term[:, None]
            throughput[rows] *= mat.attenuation * np.asarray(prim.albedo)
            travelled[rows] += best_t[sel] + 1e-5
            o[rows] = p + 1e-5 * dd[sel]

    # rays still inside transmissive stacks after max_bounces see the background
    rgb[alive] += throughput[alive] * bg
    return np.clip(rgb, 0.0, 1.0), depth, first


def raytrace_frame(spec: SceneSpec, frame: CameraFrame) -> TraceResult:
    rays = generate_rays(frame)
    rgb, depth, first = trace_rays(spec, rays.origins, rays.directions)
    shape = (frame.height, frame.width)
    return TraceResult(rgb.reshape(shape + (3,)), depth.reshape(shape), first.reshape(shape))


# poses

def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose under one top-level seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    back = position - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, back, position
    return m


def hemisphere_poses(n: int, radius: float, seed: int, min_elevation: float = np.radians(20),
                     max_elevation: float = np.radians(70)) -> list[np.ndarray]:
    """Cameras on the upper hemisphere looking at the origin.

    Positions are uniform by area over the elevation band.
    """
    if n < 1 or radius <= 0:
        raise ValueError("need n >= 1 and radius > 0")
    rng = substream(seed, "poses") if isinstance(seed, (int, np.integer)) else seed
    z = rng.uniform(np.sin(min_elevation), np.sin(max_elevation), n)
    phi = rng.uniform(0, 2 * np.pi, n)
    rxy = np.sqrt(1 - z * z)
    pts = radius * np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)
    return [look_at(p) for p in pts]


# built-in scenes

TABLE = Plane(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), half_size=0.9,
              albedo=(0.72, 0.55, 0.38), albedo2=(0.45, 0.3, 0.2), checker=0.15)
BOXES = (
    Box(center=(0.5, 0.35, 0.12), half_extents=(0.12, 0.1, 0.12), albedo=(0.8, 0.15, 0.15),
        albedo2=(0.95, 0.75, 0.2), checker=0.06),
    Box(center=(-0.45, 0.45, 0.09), half_extents=(0.1, 0.14, 0.09), albedo=(0.15, 0.6, 0.2),
        albedo2=(0.9, 0.9, 0.85), checker=0.06),
    Box(center=(-0.4, -0.45, 0.15), half_extents=(0.09, 0.09, 0.15), albedo=(0.15, 0.25, 0.8),
        albedo2=(0.85, 0.85, 0.9), checker=0.06),
    Box(center=(0.45, -0.5, 0.07), half_extents=(0.16, 0.1, 0.07), albedo=(0.9, 0.8, 0.2),
        albedo2=(0.3, 0.2, 0.1), checker=0.06),
)
SCENE_BOX = ((-1.0, -1.0, -0.05), (1.0, 1.0, 0.65))

COFFEE = Capsule(base=(0.05, 0.0, 0.13), height=0.2, radius=0.13, albedo=(0.9, 0.75, 0.6),
                 material=Material("transmissive", attenuation=0.8, specular=0.6))
WINE_GLASS = Sphere(center=(0.0, 0.05, 0.21), radius=0.2, albedo=(0.93, 0.96, 1.0),
                    material=Material("transmissive", attenuation=0.8, specular=0.7))
BOTTLE = Capsule(base=(0.15, -0.2, 0.1), height=0.25, radius=0.09, albedo=(0.6, 0.8, 0.95),
                 material=Material("transmissive", attenuation=0.7, specular=0.6))
JAR = Sphere(center=(-0.1, 0.2, 0.14), radius=0.14, albedo=(0.9, 0.95, 0.9),
             material=Material("transmissive", attenuation=0.75, specular=0.6))
VASE = Capsule(base=(0.0, -0.25, 0.12), height=0.15, radius=0.12, albedo=(0.85, 0.9, 1.0),
               material=Material("transmissive", attenuation=0.75, specular=0.6))


def builtin_scene(name: str) -> tuple[SceneSpec, SceneSpec]:
    """(background, evaluation) specs for the built-in scenes A, B, C.

    A adds a tinted capsule, B a faint glass sphere, and C adds glass
    to a background that already holds a transmissive jar.
    """
    name = name.upper()
    base = [TABLE, *BOXES]
    if name == "A":
        bg, added = base, [COFFEE]
    elif name == "B":
        bg, added = base, [WINE_GLASS]
    elif name == "C":
        bg, added = base + [JAR], [BOTTLE, VASE]
    else:
        raise KeyError(f"unknown scene {name!r}; choose from {sorted(BUILTIN_SCENES)}")
    return SceneSpec(list(bg), scene_box=SCENE_BOX), SceneSpec(list(bg) + added, scene_box=SCENE_BOX)


BUILTIN_SCENES = ("A", "B", "C")


# datasets

@dataclass
class Dataset:
    background: list
    eval: list
    camera_angle_x: float
    scene_box: tuple
    white_background: bool = True
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        if name not in ("background", "eval"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


def object_crop(first_hit: np.ndarray, object_ids, dilation: float = 0.2):
    """Bounding box (x0, y0, x1, y1) of pixels whose first hit is an added
    object, grown by ``dilation`` of its size, or None if none is visible."""
    mask = np.isin(first_hit, list(object_ids))
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    h, w = first_hit.shape
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    gx = int(np.ceil(0.5 * dilation * (x1 - x0)))
    gy = int(np.ceil(0.5 * dilation * (y1 - y0)))
    return (max(0, x0 - gx), max(0, y0 - gy), min(w, x1 + gx), min(h, y1 + gy))


def _render_split(spec: SceneSpec, poses, fov_x, width, height, prefix, object_ids=()):
    frames = []
    for i, pose in enumerate(poses):
        frame = CameraFrame(pose, fov_x, width, height, name=f"{prefix}/r_{i:03d}")
        traced = raytrace_frame(spec, frame)
        frame.image = imaging.to_u8(traced.rgb).astype(np.float32) / np.float32(255.0)
        frame.gt_depth = traced.depth.astype(np.float32)
        if object_ids:
            frame.crop = object_crop(traced.first_hit, object_ids)
        frames.append(frame)
    return frames


def generate_dataset(spec_background: SceneSpec, spec_eval: SceneSpec, counts=(100, 50),
                     seed: int = 0, out_path=None, width: int = 64, height: int = 64,
                     fov_x: float = 0.6911112070083618, radius: float = 3.0,
                     name: str = "") -> Dataset:
    """Render background and evaluation splits from independent pose sets."""
    bg_prims = list(spec_background.primitives)
    if any(p not in spec_eval.primitives for p in bg_prims):
        raise ValueError("evaluation scene must contain every background primitive")
    added = [i for i, p in enumerate(spec_eval.primitives) if p not in bg_prims]
    bg_poses = hemisphere_poses(counts[0], radius, substream(seed, "poses/background"))
    ev_poses = hemisphere_poses(counts[1], radius, substream(seed, "poses/eval"))
    ds = Dataset(
        background=_render_split(spec_background, bg_poses, fov_x, width, height, "background"),
        eval=_render_split(spec_eval, ev_poses, fov_x, width, height, "eval", added),
        camera_angle_x=fov_x,
        scene_box=spec_eval.scene_box,
        white_background=True,
        meta={"scene": name, "seed": seed, "radius": radius,
              "spec_background": spec_background.to_dict(), "spec_eval": spec_eval.to_dict()},
    )
    if out_path is not None:
        save_dataset(ds, out_path)
    return ds


def _frame_stem(frame: CameraFrame, split: str, i: int) -> str:
    return frame.name or f"{split}/r_{i:03d}"


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    for split in ("background", "eval"):
        (root / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for i, frame in enumerate(ds.split(split)):
            stem = _frame_stem(frame, split, i)
            entry = {"file_path": f"./{stem}",
                     "transform_matrix": frame.transform.tolist()}
            if frame.crop is not None:
                entry["crop"] = [int(v) for v in frame.crop]
            if frame.image is not None:
                imaging.write_png_rgb(root / f"{stem}.png", frame.image)
            if frame.gt_depth is not None:
                imaging.write_pfm(root / f"{stem}_depth.pfm", frame.gt_depth)
            entries.append(entry)
        doc = {"camera_angle_x": ds.camera_angle_x, "frames": entries}
        (root / f"transforms_{split}.json").write_text(json.dumps(doc, indent=2))
    meta = {"scene_box": [list(ds.scene_box[0]), list(ds.scene_box[1])],
            "white_background": ds.white_background, **ds.meta}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing {path.name} in {path.parent}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc


def load_dataset(path) -> Dataset:
    """Load a dataset directory. Depth files are optional (real captures)."""
    root = Path(path)
    meta = _read_json(root / "meta.json")
    splits, angle = {}, None
    for split in ("background", "eval"):
        doc = _read_json(root / f"transforms_{split}.json")
        angle = float(doc["camera_angle_x"])
        frames = []
        for i, entry in enumerate(doc.get("frames", [])):
            stem = entry["file_path"]
            if stem.endswith(".png"):
                stem = stem[:-4]
            img_path = root / f"{stem}.png"
            if not img_path.exists():
                raise DatasetError(f"missing image {img_path}")
            image = imaging.read_png_rgb(img_path)
            depth_path = root / f"{stem}_depth.pfm"
            depth = imaging.read_pfm(depth_path) if depth_path.exists() else None
            try:
                frame = CameraFrame(np.array(entry["transform_matrix"]), angle, image.shape[1],
                                    image.shape[0], image=image, gt_depth=depth,
                                    name=stem.lstrip("./"),
                                    crop=tuple(entry["crop"]) if "crop" in entry else None)
            except ValueError as exc:
                raise DatasetError(f"{split} frame {i} ({stem}): {exc}") from exc
            frames.append(frame)
        splits[split] = frames
    box = tuple(tuple(float(v) for v in b) for b in meta.pop("scene_box"))
    white = bool(meta.pop("white_background", True))
    return Dataset(splits["background"], splits["eval"], angle, box, white, meta)
