"""Synthetic multi-scale segmentation data and its on-disk layout.

Samples are 8-bit quantised grayscale images of disks (class 1) and annuli
(class 2) over a smooth noisy background (class 0). Masks come straight from
the geometry: a pixel belongs to an object iff its centre lies inside it.

On disk a dataset is a directory with ``images/*.pgm``, ``masks/*.pgm`` (pixel
value = class index) and ``manifest.json``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lifting import gaussian_blur
from .rng import make_rng

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
ANNULUS_INNER = 0.5  # inner radius as a fraction of the outer one
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass
class Dataset:
    images: list
    masks: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise ValueError("images and masks must pair one-to-one")
        k = self.meta.get("num_classes")
        for i, (im, m) in enumerate(zip(self.images, self.masks)):
            if im.shape[:2] != m.shape:
                raise ValueError(f"sample {i}: image {im.shape[:2]} and mask {m.shape} extents differ")
            if k is not None and m.size and (m.min() < 0 or m.max() >= k):
                raise ValueError(f"sample {i}: mask labels outside [0, {k})")

    def __len__(self):
        return len(self.images)

    def arrays(self):
        """Stacked ``(N, H, W, C)`` float32 images and ``(N, H, W)`` int64 masks."""
        return np.stack(self.images).astype(np.float32), np.stack(self.masks).astype(np.int64)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.images[i] for i in idx], [self.masks[i] for i in idx], dict(self.meta))


# ---------------------------------------------------------------- generator


def _signed_distance(yy, xx, cy, cx, radius, kind):
    rho = np.hypot(yy - cy, xx - cx)
    outer = rho - radius
    if kind == 1:
        return outer
    return np.maximum(outer, ANNULUS_INNER * radius - rho)


def _place(rng, n_obj, extent, r_lo, r_hi, n_kinds):
    """Random non-overlapping circles; ``None`` if a placement fails."""
    objs = []
    for _ in range(n_obj):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            r = rng.uniform(r_lo, r_hi)
            lo, hi = r + 1.0, extent - 1.0 - r
            if hi <= lo:
                return None
            cy, cx = rng.uniform(lo, hi, size=2)
            if all(np.hypot(cy - o[0], cx - o[1]) > r + o[2] + 2.0 for o in objs):
                objs.append((cy, cx, r, int(rng.integers(1, n_kinds + 1))))
                break
        else:
            return None
    return objs


def render_sample(rng: np.random.Generator, extent: int, r_lo: float, r_hi: float, num_classes: int = 3,
                  noise: float = 0.05):
    """One (image, mask) pair; image values are multiples of 1/255 in [0, 1]."""
    n_obj = int(rng.integers(1, 4))
    objs = None
    while objs is None:
        objs = _place(rng, n_obj, extent, r_lo, r_hi, num_classes - 1)
        if objs is None:
            if n_obj == 1:
                raise ValueError(f"cannot fit an object of radius {r_lo:.1f}-{r_hi:.1f} in {extent} pixels")
            n_obj -= 1
            log.debug("placement failed, retrying with %d objects", n_obj)

    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    field_ = gaussian_blur(rng.normal(size=(extent, extent, 1)), extent / 12.0)[..., 0]
    field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
    img = 0.3 + 0.06 * field_
    mask = np.zeros((extent, extent), dtype=np.uint8)
    for cy, cx, r, kind in objs:
        sd = _signed_distance(yy, xx, cy, cx, r, kind)
        cover = np.clip(0.5 - sd, 0.0, 1.0)  # one-pixel anti-aliasing ramp
        level = rng.uniform(0.7, 0.9)
        img = img * (1 - cover) + level * cover
        mask[sd < 0] = kind
    img = img + rng.normal(scale=noise, size=img.shape)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return q, mask


def generate_shapes_dataset(n: int, extent: int = 96, base_radius: float = 10.0, scale_factor: float = 1.0,
                            num_classes: int = 3, rng: np.random.Generator | int = 0) -> Dataset:
    """``n`` samples whose object radii are uniform in ``base_radius * scale_factor * [0.8, 1.2]``.

    ``rng`` may be a seed; each sample draws from its own labelled substream,
    so sample ``i`` does not depend on ``n``.
    """
    if scale_factor <= 0:
        raise ValueError("scale factor must be positive")
    if num_classes not in (2, 3):
        raise ValueError("the shapes generator knows disks and annuli: num_classes must be 2 or 3")
    seed = int(rng) if not isinstance(rng, np.random.Generator) else int(rng.integers(0, 2**63 - 1))
    r = base_radius * scale_factor
    images, masks = [], []
    for i in range(n):
        q, m = render_sample(make_rng(seed, "shapes", i), extent, 0.8 * r, 1.2 * r, num_classes)
        images.append((q.astype(np.float32) / 255.0)[..., None])
        masks.append(m)
    meta = dict(seed=seed, n=n, extent=extent, base_radius=base_radius, scale_factor=scale_factor,
                num_classes=num_classes)
    return Dataset(images, masks, meta)


def split_dataset(ds: Dataset, n_first: int):
    return ds.subset(range(n_first)), ds.subset(range(n_first, len(ds)))


# ---------------------------------------------------------------- netpbm


def write_pnm(path, arr: np.ndarray) -> None:
    """Binary 8-bit PGM for ``(H, W)`` / ``(H, W, 1)``, PPM for ``(H, W, 3)``."""
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValueError("netpbm writer expects uint8 pixels")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot store an array of shape {a.shape} as PGM/PPM")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(a).tobytes())


def _tokens(buf: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if len(buf) - pos < need:
        raise ValueError(f"{path}: pixel data truncated")
    a = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return a[..., 0].copy() if c == 1 else a.copy()


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (im, m) in enumerate(zip(ds.images, ds.masks)):
        name = f"{i:05d}"
        q = np.clip(np.rint(np.asarray(im) * 255.0), 0, 255).astype(np.uint8)
        write_pnm(d / "images" / f"{name}.{'ppm' if q.shape[-1] == 3 else 'pgm'}", q)
        write_pnm(d / "masks" / f"{name}.pgm", np.asarray(m, dtype=np.uint8))
        pairs.append({"image": f"images/{name}.{'ppm' if q.shape[-1] == 3 else 'pgm'}", "mask": f"masks/{name}.pgm"})
    manifest = {"version": MANIFEST_VERSION, "generator": ds.meta, "pairs": pairs}
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    images, masks = [], []
    for pair in manifest["pairs"]:
        im = read_pnm(d / pair["image"])
        if im.ndim == 2:
            im = im[..., None]
        images.append(im.astype(np.float32) / 255.0)
        masks.append(read_pnm(d / pair["mask"]))
    return Dataset(images, masks, manifest.get("generator", {}))


def dataset_files(directory):
    """Relative paths of every file in a saved dataset, sorted."""
    d = Path(directory)
    return sorted(os.path.relpath(p, d) for p in d.rglob("*") if p.is_file())
