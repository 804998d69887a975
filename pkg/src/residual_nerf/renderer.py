"""Camera rays, sample placement, alpha compositing and depth extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encodings import freq_encode, locate
from .fields import (FieldBundle, compose_naive, compose_residual, eval_field, eval_mix)

MODES = ("single", "residual", "naive")


@dataclass
class CameraFrame:
    """Pinhole camera; ``transform`` is camera-to-world, camera looks down -z."""

    transform: np.ndarray
    fov_x: float
    width: int
    height: int
    image: np.ndarray | None = None
    gt_depth: np.ndarray | None = None
    name: str = ""
    crop: tuple | None = None

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64)
        if self.transform.shape != (4, 4):
            raise ValueError(f"transform must be 4x4, got {self.transform.shape}")
        rot = self.transform[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-5):
            raise ValueError(f"frame {self.name!r}: rotation block is not orthonormal")
        if not 0 < self.fov_x < np.pi:
            raise ValueError(f"fov_x must lie in (0, pi), got {self.fov_x}")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)

    @property
    def origin(self) -> np.ndarray:
        return self.transform[:3, 3].copy()


@dataclass
class Rays:
    """A batch of rays. ``near``/``far`` bound the sampled span per ray."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        n = len(self.origins)
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (n,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (n,)).copy()

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    @property
    def hits(self) -> np.ndarray:
        return self.far > self.near


def make_ray(origin, direction, t_near: float, t_far: float) -> Rays:
    if not 0 <= t_near < t_far:
        raise ValueError(f"need 0 <= t_near < t_far, got {t_near}, {t_far}")
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1) > 1e-5:
        raise ValueError("ray direction must be unit length")
    return Rays(origin, d, t_near, t_far)


def pixel_directions(frame: CameraFrame, u, v) -> np.ndarray:
    """World-space unit directions through continuous pixel coordinates."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    f = frame.focal
    cam = np.stack([(u - 0.5 * frame.width) / f, -(v - 0.5 * frame.height) / f,
                    -np.ones_like(u)], axis=-1)
    d = cam @ frame.transform[:3, :3].T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_rays(frame: CameraFrame, near: float = 0.0, far: float = 1e3) -> Rays:
    """One ray per pixel through the pixel centre, row-major (v, u)."""
    vv, uu = np.meshgrid(np.arange(frame.height) + 0.5, np.arange(frame.width) + 0.5,
                         indexing="ij")
    d = pixel_directions(frame, uu.reshape(-1), vv.reshape(-1))
    o = np.broadcast_to(frame.origin, d.shape)
    return Rays(o, d, near, far)


def clip_to_box(rays: Rays, box, min_near: float = 0.0) -> Rays:
    """Restrict each ray to its overlap with an axis-aligned box.

    Rays that miss come back with ``near == far``.
    """
    lo = np.asarray(box[0], dtype=np.float64)
    hi = np.asarray(box[1], dtype=np.float64)
    d = rays.directions
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - rays.origins) * inv
        t1 = (hi - rays.origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
    near = np.maximum(np.maximum(tmin, rays.near), min_near)
    far = np.minimum(tmax, rays.far)
    far = np.where(far > near, far, near)
    return Rays(rays.origins, rays.directions, near, far)


@dataclass
class RaySamples:
    """Sample distances ``t`` (R, N) and spacings ``delta`` (R, N)."""

    t: np.ndarray
    delta: np.ndarray
    near: np.ndarray = field(default=None)
    far: np.ndarray = field(default=None)


def sample_rays(rays: Rays, n_samples: int, stratified: bool = False,
                rng: np.random.Generator | None = None) -> RaySamples:
    """One sample per equal-width bin of [near, far].

    Deterministic sampling takes bin midpoints; stratified sampling draws one
    uniform offset per bin. Spacing is the gap to the next sample, and the
    last sample gets one bin width.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    near = rays.near[:, None]
    span = (rays.far - rays.near)[:, None]
    bin_width = span / n_samples
    if stratified:
        rng = rng if rng is not None else np.random.default_rng()
        offsets = rng.random((len(rays), n_samples))
    else:
        offsets = np.full((len(rays), n_samples), 0.5)
    t = near + (np.arange(n_samples) + offsets) * bin_width
    delta = np.concatenate([np.diff(t, axis=1), bin_width], axis=1)
    return RaySamples(t, delta, rays.near, rays.far)


def sample_ray(ray: Rays, n_samples: int, stratified: bool = False,
               rng: np.random.Generator | None = None) -> RaySamples:
    return sample_rays(ray, n_samples, stratified, rng)


# quadrature

def composite(sigma, delta, colors, white_background: bool = False):
    """Alpha-composite per-sample colours along each ray.

    ``sigma`` and ``delta`` are (R, N), ``colors`` is (R, N, 3). Returns
    ``(rgb, weights, leftover)`` where ``leftover`` is the transmittance
    past the last sample.
    """
    sigma = ad.as_tensor(sigma)
    tau = ad.multiply(sigma, ad.as_tensor(delta))
    alpha = ad.subtract(1.0, ad.exp(ad.negate(tau)))
    acc = ad.cumsum(tau, axis=1)
    trans = ad.exp(ad.negate(ad.subtract(acc, tau)))
    weights = ad.multiply(trans, alpha)
    r, n = weights.shape
    rgb = ad.sum_reduce(ad.multiply(weights.reshape(r, n, 1), ad.as_tensor(colors)), axis=1)
    leftover = ad.exp(ad.negate(acc[:, n - 1:n]))
    if white_background:
        rgb = ad.add(rgb, leftover)
    return rgb, weights, leftover.reshape(r)


def transmittance(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """T_1..T_{N+1} for each ray, shape (R, N+1)."""
    acc = np.cumsum(sigma * delta, axis=-1)
    zeros = np.zeros(acc.shape[:-1] + (1,))
    return np.exp(-np.concatenate([zeros, acc], axis=-1))


def expected_depth(weights, t) -> np.ndarray:
    w = weights.data if isinstance(weights, ad.Tensor) else np.asarray(weights)
    return (w * t).sum(axis=-1)


def threshold_depth(sigma, t, m: float, far) -> tuple[np.ndarray, np.ndarray]:
    """Distance of the first sample with density >= m, else ``far`` (invalid)."""
    if m < 0:
        raise ValueError("m must be >= 0")
    s = sigma.data if isinstance(sigma, ad.Tensor) else np.asarray(sigma)
    hit = s >= m
    valid = hit.any(axis=-1)
    first = hit.argmax(axis=-1)
    depth = np.take_along_axis(np.asarray(t), first[..., None], axis=-1)[..., 0]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), depth.shape)
    return np.where(valid, depth, far), valid


# field-driven rendering

@dataclass
class RenderResult:
    rgb: ad.Tensor
    sigma: np.ndarray
    weights: np.ndarray
    t: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray


def point_quantities(bundle: FieldBundle, pos: np.ndarray, dirs: np.ndarray, mode: str,
                     which: str = "bg") -> tuple[ad.Tensor, ad.Tensor]:
    """Composed (sigma, colour) at sample points for a render mode.

    ``dirs`` holds one row per point or one per ray (see :func:`eval_field`).
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}; expected one of {MODES}")
    if mode == "single":
        fld = getattr(bundle, which)
        if fld is None:
            raise ValueError(f"bundle has no {which!r} field for single mode")
        out = eval_field(fld, pos, dirs)
        return out.sigma, ad.sigmoid(out.c_prime)
    if bundle.bg is None or bundle.res is None:
        raise ValueError(f"mode {mode!r} needs both background and residual fields")
    if mode == "residual" and bundle.mix is None:
        raise ValueError("mode 'residual' needs a mix field")
    grid = bundle.bg.config.grid
    located = locate(pos, grid)
    dir_feats = freq_encode(dirs, bundle.bg.config.direction)
    bg = eval_field(bundle.bg, pos, dirs, located, dir_feats)
    res_loc = located if bundle.res.config.grid == grid else None
    res_dirs = dir_feats if bundle.res.config.direction == bundle.bg.config.direction else None
    res = eval_field(bundle.res, pos, dirs, res_loc, res_dirs)
    if mode == "naive":
        return compose_naive(bg, res)
    mix_loc = located if bundle.mix.config.grid == grid else None
    return compose_residual(bg, res, eval_mix(bundle.mix, pos, mix_loc))


def render_rays(bundle: FieldBundle, rays: Rays, mode: str = "single", n_samples: int = 128,
                stratified: bool = False, rng: np.random.Generator | None = None,
                white_background: bool = False, which: str = "bg") -> RenderResult:
    """Render colour for every ray; rays with an empty span return background."""
    n = len(rays)
    hit = rays.hits
    hit_idx = np.flatnonzero(hit)
    h = len(hit_idx)
    t = np.zeros((n, n_samples))
    sigma_np = np.zeros((n, n_samples), dtype=ad.default_dtype())
    weights_np = np.zeros((n, n_samples), dtype=ad.default_dtype())
    fill = 1.0 if white_background else 0.0

    if h == 0:
        rgb = ad.Tensor(np.full((n, 3), fill))
        return RenderResult(rgb, sigma_np, weights_np, t, rays.near, rays.far, hit)

    sub = rays.subset(hit_idx)
    samples = sample_rays(sub, n_samples, stratified, rng)
    pos = sub.origins[:, None, :] + samples.t[..., None] * sub.directions[:, None, :]
    sigma, color = point_quantities(bundle, pos.reshape(-1, 3), sub.directions, mode, which)
    sigma = sigma.reshape(h, n_samples)
    color = color.reshape(h, n_samples, 3)
    rgb_hit, weights, _ = composite(sigma, samples.delta, color, white_background)

    t[hit_idx] = samples.t
    sigma_np[hit_idx] = sigma.data
    weights_np[hit_idx] = weights.data
    if h == n:
        rgb = rgb_hit
    else:
        miss = ad.Tensor(np.full((n - h, 3), fill))
        order = np.empty(n, dtype=np.int64)
        order[hit_idx] = np.arange(h)
        order[np.flatnonzero(~hit)] = h + np.arange(n - h)
        rgb = ad.index_select(ad.concatenate([rgb_hit, miss], axis=0), order)
    return RenderResult(rgb, sigma_np, weights_np, t, rays.near, rays.far, hit)


def render_color(rays: Rays, bundle: FieldBundle, mode: str = "single", n_samples: int = 128,
                 seed=None, white_background: bool = False, which: str = "bg") -> ad.Tensor:
    rng = None if seed is None else np.random.default_rng(seed)
    return render_rays(bundle, rays, mode, n_samples, rng is not None, rng,
                       white_background, which).rgb


def render_depth_expected(rays: Rays, bundle: FieldBundle, mode: str = "single",
                          n_samples: int = 128, which: str = "bg") -> np.ndarray:
    with ad.no_grad():
        out = render_rays(bundle, rays, mode, n_samples, which=which)
    return expected_depth(out.weights, out.t)


def render_depth_threshold(rays: Rays, bundle: FieldBundle, mode: str = "single",
                           n_samples: int = 128, m: float = 3.0,
                           which: str = "bg") -> tuple[np.ndarray, np.ndarray]:
    with ad.no_grad():
        out = render_rays(bundle, rays, mode, n_samples, which=which)
    depth, valid = threshold_depth(out.sigma, out.t, m, out.far)
    return depth, valid & out.hit


@dataclass
class DepthMap:
    """Per-pixel depth in scene units with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray
    crop: tuple | None = None


@dataclass
class FrameRender:
    rgb: np.ndarray
    expected: np.ndarray
    threshold: DepthMap


def render_frame(bundle: FieldBundle, frame: CameraFrame, box, mode: str = "single",
                 n_samples: int = 128, m: float = 3.0, white_background: bool = False,
                 pixel_mask: np.ndarray | None = None, chunk: int = 4096,
                 which: str = "bg") -> FrameRender:
    """Render colour, expected depth and threshold depth for a whole frame.

    ``pixel_mask`` limits work to selected pixels; the rest are left at
    background colour and marked invalid.
    """
    rays = clip_to_box(generate_rays(frame), box)
    n = len(rays)
    todo = np.arange(n) if pixel_mask is None else np.flatnonzero(pixel_mask.reshape(-1))
    rgb = np.full((n, 3), 1.0 if white_background else 0.0)
    exp_depth = np.zeros(n)
    thr_depth = rays.far.copy()
    valid = np.zeros(n, dtype=bool)
    with ad.no_grad():
        for start in range(0, len(todo), chunk):
            idx = todo[start:start + chunk]
            out = render_rays(bundle, rays.subset(idx), mode, n_samples,
                              white_background=white_background, which=which)
            rgb[idx] = out.rgb.data
            exp_depth[idx] = expected_depth(out.weights, out.t)
            d, ok = threshold_depth(out.sigma, out.t, m, out.far)
            thr_depth[idx] = d
            valid[idx] = ok & out.hit
    shape = (frame.height, frame.width)
    return FrameRender(rgb.reshape(shape + (3,)), exp_depth.reshape(shape),
                       DepthMap(thr_depth.reshape(shape), valid.reshape(shape), frame.crop))
