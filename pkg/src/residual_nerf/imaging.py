"""PNG and PFM reading/writing for colour images and depth maps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png_rgb(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    Image.fromarray(to_u8(img), mode="RGB").save(path, format="PNG", optimize=False)


def read_png_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def write_pfm(path, arr: np.ndarray) -> None:
    """Little-endian PFM; rows stored bottom-to-top as the format requires."""
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        tag, h, w = b"Pf", arr.shape[0], arr.shape[1]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag, h, w = b"PF", arr.shape[0], arr.shape[1]
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        shape = (h, w) if tag == b"Pf" else (h, w, 3)
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: PFM payload size mismatch")
    return data.reshape(shape)[::-1].astype(np.float32)


def write_depth_png16(path, depth: np.ndarray, crop=None, valid: np.ndarray | None = None,
                      meters_per_unit: float | None = None) -> dict:
    """16-bit grayscale depth PNG plus ``<name>.json`` sidecar.

    Stored value ``k`` means ``k * meters_per_unit`` metres. Non-finite depths
    and invalid pixels are written as 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth)
    if valid is not None:
        ok &= valid
    if meters_per_unit is None:
        top = depth[ok].max() if ok.any() else 1.0
        meters_per_unit = max(float(top), 1e-6) / 65535.0
    q = np.zeros(depth.shape, dtype=np.uint16)
    q[ok] = np.clip(np.round(depth[ok] / meters_per_unit), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")
    sidecar = {"meters_per_unit": meters_per_unit,
               "crop": list(crop) if crop is not None else None}
    Path(path).with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return sidecar


def read_depth_png16(path) -> tuple[np.ndarray, dict]:
    sidecar = json.loads(Path(path).with_suffix(".json").read_text())
    with Image.open(path) as im:
        q = np.asarray(im, dtype=np.uint16)
    return q.astype(np.float64) * sidecar["meters_per_unit"], sidecar
